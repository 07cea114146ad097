"""
Cross-modal fusion
Global and local cross-modal attention, sparse mixture-of-experts routing,
local feature selection and presence-masked final aggregation
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import tensorflow as tf

from services.data_service import MODALITIES, Modality
from services.errors import ConfigurationError, RuntimeFailure

logger = logging.getLogger(__name__)
tf.get_logger().setLevel('ERROR')

LEVELS = ('global', 'local')


@dataclass
class ModalityBundle:
    """
    The six in-model tensors of a batch plus the slots fusion derives from them
    Every tensor carries a leading batch axis; derived slots are written once per forward pass
    """

    globals_: Dict[Modality, tf.Tensor]
    locals_: Dict[Modality, tf.Tensor]
    presence: tf.Tensor                                   # (B, 3), columns in MODALITIES order
    attention: Dict[str, tf.Tensor] = field(default_factory=dict)
    cma_global: Optional[Dict[Modality, tf.Tensor]] = None
    cma_local: Optional[Dict[Modality, tf.Tensor]] = None
    agg_global: Optional[tf.Tensor] = None
    agg_local: Optional[tf.Tensor] = None
    selected_local: Optional[Dict[Modality, tf.Tensor]] = None
    local_masks: Optional[Dict[Modality, tf.Tensor]] = None
    local_means: Optional[Dict[Modality, tf.Tensor]] = None
    local_experts: Optional[Dict[Modality, tf.Tensor]] = None
    rec_global: Optional[Dict[Modality, tf.Tensor]] = None
    rec_local: Optional[Dict[Modality, tf.Tensor]] = None
    final_global: Optional[Dict[Modality, tf.Tensor]] = None
    final_local: Optional[Dict[Modality, tf.Tensor]] = None
    final_experts: Optional[tf.Tensor] = None
    x_out: Optional[tf.Tensor] = None

    _DERIVED = ('cma_global', 'cma_local', 'agg_global', 'agg_local', 'selected_local', 'local_masks',
                'local_means', 'local_experts', 'rec_global', 'rec_local', 'final_global', 'final_local',
                'final_experts', 'x_out')

    def fill(self, **slots):
        for name, value in slots.items():
            if name not in self._DERIVED:
                raise AttributeError(f"ModalityBundle has no derived slot '{name}'")
            if getattr(self, name) is not None:
                raise RuntimeFailure(f"Slot '{name}' already written in this forward pass", slot=name)
            setattr(self, name, value)

    def present(self, modality: Modality) -> tf.Tensor:
        """(B, 1) presence column for one modality"""
        i = MODALITIES.index(modality)
        return self.presence[:, i:i + 1]

    @property
    def batch_size(self) -> int:
        return int(self.presence.shape[0])

    def finals(self) -> tf.Tensor:
        """(B, 6, D) stack: globals then locals, each in MODALITIES order"""
        return tf.stack([self.final_global[m] for m in MODALITIES]
                        + [self.final_local[m] for m in MODALITIES], axis=1)


def cma_pair(a: tf.Tensor, b: tf.Tensor) -> tf.Tensor:
    """a + (a.b) b over the last axis"""
    return a + tf.reduce_sum(a * b, axis=-1, keepdims=True) * b


def cross_modal_attention(vectors: Dict[Modality, tf.Tensor]) -> Tuple[Dict[Modality, tf.Tensor], tf.Tensor]:
    """Each modality attends to its two partners; returns per-modality outputs and their sum"""
    out = {}
    for modality in MODALITIES:
        partners = [p for p in MODALITIES if p != modality]
        a = vectors[modality]
        out[modality] = (cma_pair(a, vectors[partners[0]]) + cma_pair(a, vectors[partners[1]])) / 2.0
    aggregate = out[Modality.WSI] + out[Modality.RNA] + out[Modality.RPT]
    return out, aggregate


def identity_fusion(vectors: Dict[Modality, tf.Tensor]) -> Tuple[Dict[Modality, tf.Tensor], tf.Tensor]:
    out = dict(vectors)
    return out, out[Modality.WSI] + out[Modality.RNA] + out[Modality.RPT]


def cma_global(bundle: ModalityBundle, use_cma: bool = True) -> ModalityBundle:
    fuse = cross_modal_attention if use_cma else identity_fusion
    cma, aggregate = fuse(bundle.globals_)
    bundle.fill(cma_global=cma, agg_global=aggregate)
    return bundle


def top_k_mask(scores: tf.Tensor, k: int) -> tf.Tensor:
    """0/1 mask of the k largest scores on the last axis, lower index first on ties"""
    _, indices = tf.math.top_k(scores, k=k, sorted=True)
    return tf.reduce_sum(tf.one_hot(indices, depth=scores.shape[-1], dtype=scores.dtype), axis=-2)


def top_k_gate(probs: tf.Tensor, k: int, renormalize: bool = True,
               indices: Optional[tf.Tensor] = None) -> Tuple[tf.Tensor, tf.Tensor]:
    """
    Keep the k highest gate probabilities, zero the rest
    Returns dense weights (..., K) and the selected indices (..., k)
    """
    if indices is None:
        _, indices = tf.math.top_k(probs, k=k, sorted=True)
    keep = tf.reduce_sum(tf.one_hot(indices, depth=probs.shape[-1], dtype=probs.dtype), axis=-2)
    weights = probs * keep
    if renormalize:
        weights = weights / tf.reduce_sum(weights, axis=-1, keepdims=True)
    return weights, indices


class ExpertBank(tf.keras.layers.Layer):
    """K two-layer experts behind a softmax gate with top-k routing"""

    def __init__(self, dim: int, n_experts: int = 5, top_k: int = 2, renormalize: bool = True, **kwargs):
        super().__init__(**kwargs)
        if not 0 < top_k <= n_experts:
            raise ConfigurationError(f"top_k={top_k} must be in [1, {n_experts}]", field='fusion.top_k')
        self.dim = dim
        self.n_experts = n_experts
        self.top_k = top_k
        self.renormalize = renormalize
        self.expert_hidden = [
            tf.keras.layers.Dense(dim, activation='relu', dtype=self.dtype, name=f'expert_{k}_hidden')
            for k in range(n_experts)
        ]
        self.expert_out = [tf.keras.layers.Dense(dim, dtype=self.dtype, name=f'expert_{k}_out')
                           for k in range(n_experts)]
        self.gate = tf.keras.layers.Dense(n_experts, dtype=self.dtype, name='gate')

    def gate_probabilities(self, x: tf.Tensor) -> tf.Tensor:
        return tf.nn.softmax(self.gate(x), axis=-1)

    def call(self, x: tf.Tensor, routing: Optional[tf.Tensor] = None):
        lead = tf.shape(x)[:-1]
        flat = tf.reshape(x, (-1, self.dim))
        probs = self.gate_probabilities(flat)
        if routing is not None:
            routing = tf.reshape(routing, (-1, self.top_k))
        weights, indices = top_k_gate(probs, self.top_k, self.renormalize, routing)
        outputs = tf.stack([out(hidden(flat)) for hidden, out in zip(self.expert_hidden, self.expert_out)],
                           axis=1)
        mixed = tf.einsum('nk,nkd->nd', weights, outputs)
        return (tf.reshape(mixed, tf.concat([lead, [self.dim]], 0)),
                tf.reshape(weights, tf.concat([lead, [self.n_experts]], 0)),
                tf.reshape(indices, tf.concat([lead, [self.top_k]], 0)))


class LocalSelector(tf.keras.layers.Layer):
    """Routes each local row through an ExpertBank and keeps the k_loc highest-scoring rows"""

    def __init__(self, bank: ExpertBank, k_loc: int, **kwargs):
        super().__init__(**kwargs)
        self.bank = bank
        self.k_loc = k_loc
        self.act = tf.keras.layers.Dense(1, dtype=self.dtype, name='act')

    def call(self, local: tf.Tensor, routing: Optional[Tuple[tf.Tensor, tf.Tensor]] = None):
        rows = local.shape[-2]
        if self.k_loc > rows:
            raise ConfigurationError(f"k_loc={self.k_loc} exceeds the {rows} local rows", field='fusion.k_loc')
        expert_routing, frozen_mask = routing if routing is not None else (None, None)
        z, _, indices = self.bank(local, routing=expert_routing)
        scores = self.act(z)[..., 0]
        mask = frozen_mask if frozen_mask is not None else top_k_mask(scores, self.k_loc)
        return z * mask[..., None], mask, scores, indices


def select_local(local: tf.Tensor, selector: LocalSelector) -> tf.Tensor:
    selected, _, _, _ = selector(local)
    return selected


def cma_local(bundle: ModalityBundle, selectors: Optional[Dict[Modality, LocalSelector]], k_loc: int,
              use_cma: bool = True, use_moe: bool = True,
              routing: Optional[Dict[str, tf.Tensor]] = None) -> ModalityBundle:
    """Select key local rows per modality, mean-pool them, then apply cross-modal attention"""
    selected, masks, means, experts = {}, {}, {}, {}
    for modality in MODALITIES:
        local = bundle.locals_[modality]
        if use_moe:
            frozen = None
            if routing is not None:
                frozen = (routing[f'{modality.value}_experts'], routing[f'{modality.value}_mask'])
            rows, mask, _, indices = selectors[modality](local, routing=frozen)
            mean = tf.reduce_sum(rows, axis=1) / float(k_loc)
            experts[modality] = indices
        else:
            rows, mask = local, tf.ones(tf.shape(local)[:2], dtype=local.dtype)
            mean = tf.reduce_mean(local, axis=1)
        selected[modality] = rows
        masks[modality] = mask
        # absent modalities contribute nothing downstream, expert biases included
        means[modality] = mean * bundle.present(modality)

    fuse = cross_modal_attention if use_cma else identity_fusion
    cma, aggregate = fuse(means)
    bundle.fill(selected_local=selected, local_masks=masks, local_means=means,
                local_experts=experts or None, cma_local=cma, agg_local=aggregate)
    return bundle


def substitute_missing(cma: tf.Tensor, reconstructed: tf.Tensor, present: tf.Tensor) -> tf.Tensor:
    """Exact selection: present rows keep the CMA slot, absent rows take the reconstruction"""
    return tf.where(present > 0, cma, reconstructed)


def final_aggregate(bundle: ModalityBundle, final_bank: Optional[ExpertBank], mode: str = 'sum',
                    use_reconstruction: bool = True, concat_projection: Optional[tf.keras.layers.Layer] = None,
                    routing: Optional[tf.Tensor] = None) -> tf.Tensor:
    """
    Presence-masked substitution per modality and level, then the final MoE over the six finals
    mode='sum' routes each final separately and sums; mode='concat' projects the concatenation first
    """
    final_global, final_local = {}, {}
    for modality in MODALITIES:
        present = bundle.present(modality)
        if use_reconstruction:
            final_global[modality] = substitute_missing(bundle.cma_global[modality],
                                                        bundle.rec_global[modality], present)
            final_local[modality] = substitute_missing(bundle.cma_local[modality],
                                                       bundle.rec_local[modality], present)
        else:
            final_global[modality] = bundle.cma_global[modality]
            final_local[modality] = bundle.cma_local[modality]
    bundle.fill(final_global=final_global, final_local=final_local)

    stacked = bundle.finals()
    indices = None
    if final_bank is None:
        x_out = tf.reduce_sum(stacked, axis=1)
    elif mode == 'sum':
        routed, _, indices = final_bank(stacked, routing=routing)
        x_out = tf.reduce_sum(routed, axis=1)
    elif mode == 'concat':
        flat = tf.reshape(stacked, (tf.shape(stacked)[0], -1))
        x_out, _, indices = final_bank(concat_projection(flat), routing=routing)
    else:
        raise ConfigurationError(f"Unknown final fusion mode '{mode}'", field='fusion.final_fusion')

    bundle.fill(final_experts=indices, x_out=x_out)
    return x_out
