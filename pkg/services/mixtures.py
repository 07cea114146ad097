"""
Diagonal Gaussian mixture primitives shared by the local GMM encoder
and the per-class prototype mixtures
"""

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def log_gaussian_diag(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """log N(x_n; mu_c, diag(var_c)) for every (n, c): shape (N, C)"""
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * (np.sum(diff * diff / variances[None, :, :], axis=-1)
                   + np.sum(np.log(variances), axis=-1)[None, :]
                   + x.shape[1] * LOG_2PI)


def log_joint(x: np.ndarray, weights: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore'):
        log_w = np.log(weights)
    return log_w[None, :] + log_gaussian_diag(x, means, variances)


def responsibilities(log_prob: np.ndarray) -> np.ndarray:
    return np.exp(log_prob - logsumexp(log_prob, axis=1, keepdims=True))


def weighted_moments(x: np.ndarray, resp: np.ndarray, means: np.ndarray, variances: np.ndarray,
                     variance_floor: float, empty_tol: float = 1e-10):
    """
    Soft counts, means and diagonal variances from responsibilities
    Components with no mass keep the given means and variances
    """
    x = np.asarray(x, dtype=np.float64)
    counts = resp.sum(axis=0)
    new_means = means.copy()
    new_vars = variances.copy()
    filled = counts > empty_tol
    if np.any(filled):
        r = resp[:, filled]
        mu = (r.T @ x) / counts[filled, None]
        diff_sq = (x[:, None, :] - mu[None, :, :]) ** 2
        var = np.einsum('nc,ncd->cd', r, diff_sq) / counts[filled, None]
        new_means[filled] = mu
        new_vars[filled] = np.maximum(var, variance_floor)
    return counts, new_means, new_vars
