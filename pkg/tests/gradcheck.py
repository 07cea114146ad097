"""
Central finite-difference gradient checks in float64
"""

from typing import Callable, List

import numpy as np
import tensorflow as tf

STEP = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], tf.Tensor], variable: tf.Variable, step: float = STEP) -> np.ndarray:
    """d fn / d variable by central differences, perturbing one entry at a time"""
    base = variable.numpy().copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        variable.assign(flat.reshape(base.shape))
        plus = float(fn())
        flat[i] = original - step
        variable.assign(flat.reshape(base.shape))
        minus = float(fn())
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    variable.assign(base)
    return grad


def check_gradients(fn: Callable[[], tf.Tensor], variables: List[tf.Variable], step: float = STEP) -> float:
    """Largest relative error over the given variables"""
    with tf.GradientTape() as tape:
        value = fn()
    analytic = tape.gradient(value, variables)
    worst = 0.0
    for variable, grad in zip(variables, analytic):
        grad = np.zeros(variable.shape) if grad is None else grad.numpy()
        worst = max(worst, relative_error(grad, numeric_gradient(fn, variable, step)))
    return worst
