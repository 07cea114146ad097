"""
Decoupled reconstruction
Per-modality heads regenerate each modality's fused feature from the aggregate,
supplying substitutes for absent modalities and the reconstruction loss
"""

import logging
from typing import Dict, Optional, Tuple

import tensorflow as tf

from services.data_service import MODALITIES, Modality
from services.fusion import LEVELS, ModalityBundle

logger = logging.getLogger(__name__)


class DecouplerSet(tf.keras.layers.Layer):
    """Six two-layer ReLU heads, one per modality and level (or per modality when share_levels)"""

    def __init__(self, dim: int, share_levels: bool = False, **kwargs):
        super().__init__(**kwargs)
        self.share_levels = share_levels
        self.hidden = {}
        self.out = {}
        for level in (('shared',) if share_levels else LEVELS):
            for modality in MODALITIES:
                key = f'{level}_{modality.value}'
                self.hidden[key] = tf.keras.layers.Dense(dim, activation='relu', dtype=self.dtype,
                                                         name=f'psi_{key}_hidden')
                self.out[key] = tf.keras.layers.Dense(dim, dtype=self.dtype, name=f'psi_{key}_out')

    def head(self, level: str, modality: Modality, x: tf.Tensor) -> tf.Tensor:
        key = f"{'shared' if self.share_levels else level}_{modality.value}"
        return self.out[key](self.hidden[key](x))

    def call(self, agg_global: tf.Tensor, agg_local: tf.Tensor):
        return ([self.head('global', m, agg_global) for m in MODALITIES],
                [self.head('local', m, agg_local) for m in MODALITIES])


def decouple(bundle: ModalityBundle, heads: DecouplerSet) -> Tuple[Dict[Modality, tf.Tensor],
                                                                   Dict[Modality, tf.Tensor]]:
    rec_global, rec_local = heads(bundle.agg_global, bundle.agg_local)
    rec_global = dict(zip(MODALITIES, rec_global))
    rec_local = dict(zip(MODALITIES, rec_local))
    bundle.fill(rec_global=rec_global, rec_local=rec_local)
    return rec_global, rec_local


def reconstruction_loss(bundle: ModalityBundle, on_masked: bool = False,
                        targets: Optional[ModalityBundle] = None) -> tf.Tensor:
    """
    Batch mean of the per-sample sum of squared L2 residuals between CMA slots
    and their reconstructions at both levels
    Absent modalities are skipped, unless on_masked and targets (the same samples
    before masking) holds their ground-truth CMA slots; targets carry no gradient
    """
    per_sample = tf.zeros((tf.shape(bundle.presence)[0],), dtype=bundle.presence.dtype)
    for modality in MODALITIES:
        present = bundle.present(modality)
        weight = present[:, 0]
        target_g, target_l = bundle.cma_global[modality], bundle.cma_local[modality]
        if on_masked and targets is not None:
            weight = weight + (1.0 - weight) * targets.present(modality)[:, 0]
            target_g = tf.where(present > 0, target_g, tf.stop_gradient(targets.cma_global[modality]))
            target_l = tf.where(present > 0, target_l, tf.stop_gradient(targets.cma_local[modality]))
        residual_g = tf.reduce_sum(tf.square(target_g - bundle.rec_global[modality]), axis=-1)
        residual_l = tf.reduce_sum(tf.square(target_l - bundle.rec_local[modality]), axis=-1)
        # skipped rows contribute exactly zero
        per_sample += tf.where(weight > 0, residual_g + residual_l, tf.zeros_like(residual_g))
    return tf.reduce_mean(per_sample)
