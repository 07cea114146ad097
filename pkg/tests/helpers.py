"""
Small configs, datasets and comparisons used across the tests
"""

import numpy as np

from services.config import RunConfig
from services.data_service import MODALITIES, SyntheticSpec


SMALL_SHAPE = {
    'model.dim': 8,
    'model.n_components': 4,
    'model.n_heads': 4,
    'fusion.k_loc': 2,
}


def small_config(**overrides) -> RunConfig:
    """Tiny model that trains in seconds"""
    flat = dict(SMALL_SHAPE)
    flat.update({
        'train.epochs': 3,
        'train.warmup_epochs': 1,
        'train.batch_size': 16,
        'train.learning_rate': 3e-3,
        'evaluation.k_folds': 3,
    })
    flat.update(overrides)
    return RunConfig().override(**flat)


def small_spec(**overrides) -> SyntheticSpec:
    values = dict(n_classes=3, samples_per_class=10, dim=8, n_components=4, n_heads=4, seed=0, k_folds=3)
    values.update(overrides)
    return SyntheticSpec(**values)


def records_equal(a, b, atol: float = 0.0) -> bool:
    """Same ids, labels, presence and tensors (within atol)"""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if (x.sample_id, x.label, x.presence()) != (y.sample_id, y.label, y.presence()):
            return False
        for m in MODALITIES:
            if not np.allclose(x.modalities[m].global_vec, y.modalities[m].global_vec, atol=atol, rtol=0):
                return False
            if not np.allclose(x.modalities[m].local, y.modalities[m].local, atol=atol, rtol=0):
                return False
        for name in ('patch_embeddings', 'patch_coords', 'rna_expression', 'sentence_embeddings'):
            u, v = getattr(x, name), getattr(y, name)
            if (u is None) != (v is None):
                return False
            if u is not None and not np.allclose(u, v, atol=atol, rtol=0):
                return False
    return True
