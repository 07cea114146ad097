"""
MoSARe model
Wires the modality encoder, cross-modal attention with expert routing,
decoupled reconstruction, final mixture-of-experts aggregation and the
classifier heads into one trainable Keras model
"""

import logging
from typing import Dict, List, Optional

import numpy as np
import tensorflow as tf

from services.config import RunConfig
from services.data_service import MODALITIES, SampleRecord, collate
from services.encoders import ModalityEncoder
from services.fusion import ExpertBank, LocalSelector, ModalityBundle, cma_global, cma_local, final_aggregate
from services.reconstruction import DecouplerSet, decouple

logger = logging.getLogger(__name__)
tf.get_logger().setLevel('ERROR')


class ClassifierHeads(tf.keras.layers.Layer):
    """
    Linear heads D -> n_classes for the global finals, the local finals and X_out
    One shared global and one shared local head unless per_modality
    """

    def __init__(self, n_classes: int, per_modality: bool = False, **kwargs):
        super().__init__(**kwargs)
        self.per_modality = per_modality
        names = [m.value for m in MODALITIES] if per_modality else ['shared']
        self.global_heads = {n: tf.keras.layers.Dense(n_classes, dtype=self.dtype, name=f'global_{n}')
                             for n in names}
        self.local_heads = {n: tf.keras.layers.Dense(n_classes, dtype=self.dtype, name=f'local_{n}')
                            for n in names}
        self.aggregate_head = tf.keras.layers.Dense(n_classes, dtype=self.dtype, name='aggregate')

    def _pick(self, heads: Dict[str, tf.keras.layers.Layer], modality) -> tf.keras.layers.Layer:
        return heads[modality.value] if self.per_modality else heads['shared']

    def call(self, final_global: List[tf.Tensor], final_local: List[tf.Tensor], x_out: tf.Tensor):
        global_logits = [self._pick(self.global_heads, m)(x) for m, x in zip(MODALITIES, final_global)]
        local_logits = [self._pick(self.local_heads, m)(x) for m, x in zip(MODALITIES, final_local)]
        return global_logits, local_logits, self.aggregate_head(x_out)


class MoSAReModel(tf.keras.Model):
    """Full forward pass; forward() returns the populated ModalityBundle"""

    def __init__(self, config: RunConfig, n_classes: int, **kwargs):
        super().__init__(dtype=config.model.dtype, **kwargs)
        self.config = config
        self.n_classes = n_classes
        dim = config.model.dim
        fusion = config.fusion
        dtype = config.model.dtype

        self.encoder = ModalityEncoder(config.model, dtype=dtype, name='encoder')
        self.selectors = {}
        self.final_bank = None
        self.concat_projection = None
        if fusion.use_moe:
            for modality in MODALITIES:
                bank = ExpertBank(dim, fusion.n_experts, fusion.top_k, fusion.renormalize_gate, dtype=dtype,
                                  name=f'{modality.value}_local_bank')
                self.selectors[modality.value] = LocalSelector(bank, fusion.k_loc, dtype=dtype,
                                                               name=f'{modality.value}_selector')
            self.final_bank = ExpertBank(dim, fusion.n_experts, fusion.top_k, fusion.renormalize_gate, dtype=dtype,
                                         name='final_bank')
            if fusion.final_fusion == 'concat':
                self.concat_projection = tf.keras.layers.Dense(dim, dtype=dtype, name='concat_projection')
        self.decoupler = None
        if config.reconstruction.enabled:
            self.decoupler = DecouplerSet(dim, config.reconstruction.share_levels, dtype=dtype, name='decoupler')
        self.heads = ClassifierHeads(n_classes, config.train.per_modality_heads, dtype=dtype, name='heads')

    def forward(self, batch: Dict[str, np.ndarray], training: bool = False,
                routing: Optional[Dict[str, tf.Tensor]] = None) -> ModalityBundle:
        fusion = self.config.fusion
        bundle = self.encoder.encode(batch, training=training)
        cma_global(bundle, use_cma=fusion.use_cma)
        selectors = {m: self.selectors[m.value] for m in MODALITIES} if fusion.use_moe else None
        cma_local(bundle, selectors, fusion.k_loc, use_cma=fusion.use_cma, use_moe=fusion.use_moe, routing=routing)
        if self.decoupler is not None:
            decouple(bundle, self.decoupler)
        final_aggregate(
            bundle,
            self.final_bank,
            mode=fusion.final_fusion,
            use_reconstruction=self.decoupler is not None,
            concat_projection=self.concat_projection,
            routing=None if routing is None else routing.get('final'),
        )
        return bundle

    def logits(self, bundle: ModalityBundle):
        return self.heads([bundle.final_global[m] for m in MODALITIES],
                          [bundle.final_local[m] for m in MODALITIES],
                          bundle.x_out)

    def call(self, inputs: Dict[str, tf.Tensor], training: bool = False) -> tf.Tensor:
        _, _, aggregate = self.logits(self.forward(inputs, training=training))
        return aggregate

    def predict_proba(self, records: List[SampleRecord], batch_size: int = 256) -> np.ndarray:
        probs = []
        for start in range(0, len(records), batch_size):
            batch = collate(records[start:start + batch_size], self.config)
            _, _, aggregate = self.logits(self.forward(batch, training=False))
            probs.append(tf.nn.softmax(aggregate, axis=-1).numpy())
        return np.concatenate(probs, axis=0) if probs else np.zeros((0, self.n_classes))

    def build_from_batch(self, batch: Dict[str, np.ndarray]):
        """Create every variable by running one inference pass"""
        self.logits(self.forward(batch, training=False))
        return self


def routing_of(bundle: ModalityBundle) -> Dict[str, tf.Tensor]:
    """Discrete choices of a forward pass, replayable through forward(routing=...)"""
    routing = {'final': bundle.final_experts}
    if bundle.local_experts:
        for modality in MODALITIES:
            routing[f'{modality.value}_experts'] = bundle.local_experts[modality]
            routing[f'{modality.value}_mask'] = bundle.local_masks[modality]
    return routing


def build_model(config: RunConfig, n_classes: int, build_records: Optional[List[SampleRecord]] = None
                ) -> MoSAReModel:
    model = MoSAReModel(config, n_classes, name='mosare')
    if build_records:
        model.build_from_batch(collate(build_records[:2], config))
        n_params = int(sum(np.prod(v.shape) for v in model.trainable_variables))
        logger.info(f"Built MoSARe model with {n_params} trainable parameters")
    return model
