"""
Dual contrastive alignment
Symmetric cross-modal contrastive loss between each modality and the aggregate,
per-class Gaussian mixtures maintained by momentum Sinkhorn-EM, and the
multi-prototype contrastive loss over their most representative components
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import tensorflow as tf
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from services.config import AlignmentConfig, derive_seed
from services.data_service import MODALITIES
from services.errors import EmptyBatchError, GMMStateError, NumericalError
from services.fusion import ModalityBundle
from services.mixtures import log_joint, responsibilities, weighted_moments

logger = logging.getLogger(__name__)


def _normalize_rows(x: tf.Tensor) -> tf.Tensor:
    return tf.math.l2_normalize(x, axis=-1, epsilon=1e-24)


def symcl_loss(a: tf.Tensor, b: tf.Tensor, tau: float, tau_mode: str = 'multiply') -> tf.Tensor:
    """
    Symmetric InfoNCE: matched rows of a and b are positives, every other row in the batch a negative
    tau multiplies the cosine similarity in 'multiply' mode and divides it in 'divide' mode
    """
    a = tf.convert_to_tensor(a)
    b = tf.convert_to_tensor(b, dtype=a.dtype)
    if a.shape[0] == 0:
        raise EmptyBatchError("SymCL needs at least one row")
    similarity = tf.matmul(_normalize_rows(a), _normalize_rows(b), transpose_b=True)
    logits = similarity * tau if tau_mode == 'multiply' else similarity / tau
    forward = -tf.linalg.diag_part(tf.nn.log_softmax(logits, axis=1))
    backward = -tf.linalg.diag_part(tf.nn.log_softmax(logits, axis=0))
    return 0.5 * (tf.reduce_mean(forward) + tf.reduce_mean(backward))


def symcl_total(bundle: ModalityBundle, tau: float, tau_mode: str = 'multiply') -> tf.Tensor:
    """Mean of the six modality-vs-aggregate terms, each over the rows where that modality is present"""
    terms = []
    for i, modality in enumerate(MODALITIES):
        present = bundle.presence[:, i] > 0
        n_present = int(tf.reduce_sum(tf.cast(present, tf.int32)))
        pairs = ((bundle.cma_global[modality], bundle.agg_global),
                 (bundle.cma_local[modality], bundle.agg_local))
        for features, aggregate in pairs:
            if n_present == 0:
                terms.append(tf.zeros((), dtype=bundle.presence.dtype))
                continue
            terms.append(symcl_loss(tf.boolean_mask(features, present), tf.boolean_mask(aggregate, present),
                                    tau, tau_mode))
    return tf.add_n(terms) / float(len(terms))


@dataclass
class ClassGMM:
    """Diagonal mixture per class: weights (K, M), means (K, M, D), variances (K, M, D)"""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    initialized: bool = False
    updates: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.updates is None:
            self.updates = np.zeros(self.weights.shape[0], dtype=np.int64)

    @classmethod
    def empty(cls, n_classes: int, n_components: int, dim: int) -> 'ClassGMM':
        return cls(
            weights=np.full((n_classes, n_components), 1.0 / n_components),
            means=np.zeros((n_classes, n_components, dim)),
            variances=np.ones((n_classes, n_components, dim)),
            initialized=False,
        )

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    def require_initialized(self):
        if not self.initialized:
            raise GMMStateError("Class GMMs are not initialized; they are fitted at the end of the warm-up epochs")

    def log_likelihood(self, features: np.ndarray, labels: np.ndarray) -> float:
        total = 0.0
        for c in np.unique(labels):
            joint = log_joint(features[labels == c], self.weights[c], self.means[c], self.variances[c])
            total += float(np.sum(logsumexp(joint, axis=1)))
        return total

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            'weights': self.weights,
            'means': self.means,
            'variances': self.variances,
            'initialized': np.array([1.0 if self.initialized else 0.0]),
            'updates': self.updates.astype(np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'ClassGMM':
        return cls(
            weights=np.asarray(arrays['weights'], dtype=np.float64),
            means=np.asarray(arrays['means'], dtype=np.float64),
            variances=np.asarray(arrays['variances'], dtype=np.float64),
            initialized=bool(arrays['initialized'][0] > 0.5),
            updates=np.asarray(arrays['updates']).astype(np.int64),
        )


def initialize_class_gmms(features: np.ndarray, labels: np.ndarray, n_classes: int, n_components: int,
                          seed: int, variance_floor: float = 1e-6) -> ClassGMM:
    """Per-class K-means over the warm-up features gives initial means, weights and variances"""
    features = np.asarray(features, dtype=np.float64)
    gmm = ClassGMM.empty(n_classes, n_components, features.shape[1])
    rng = np.random.default_rng(derive_seed(seed, 'initialize_class_gmms'))
    for c in range(n_classes):
        x = features[labels == c]
        if x.shape[0] == 0:
            logger.warning(f"Class {c} absent from warm-up features, seeding its GMM from the global mean")
            x = features.mean(axis=0, keepdims=True) + 1e-3 * rng.standard_normal((n_components, features.shape[1]))
        n_distinct = np.unique(x, axis=0).shape[0]
        if n_distinct >= n_components:
            kmeans = KMeans(n_clusters=n_components, init='k-means++', n_init=1, max_iter=100,
                            random_state=derive_seed(seed, 'class_kmeans', c)).fit(x)
            means, assign = kmeans.cluster_centers_, kmeans.labels_
        else:
            means = x[rng.choice(x.shape[0], size=n_components, replace=True)]
            assign = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
        resp = np.eye(n_components)[assign]
        counts, means, variances = weighted_moments(x, resp, means, np.ones_like(means), variance_floor)
        gmm.means[c] = means
        # singleton clusters borrow the pooled per-dimension variance
        pooled = features.var(axis=0) + variance_floor
        gmm.variances[c] = np.maximum(np.where(counts[:, None] > 1, variances, pooled), variance_floor)
        gmm.weights[c] = np.maximum(counts, 1e-3) / np.maximum(counts, 1e-3).sum()
    gmm.initialized = True
    logger.info(f"Initialized {n_classes} class GMMs ({n_components} components) "
                f"from {features.shape[0]} features")
    return gmm


def gmm_posterior(x: np.ndarray, c: int, gmm: ClassGMM) -> np.ndarray:
    """Responsibilities p(m | x, c) in log space"""
    joint = log_joint(np.atleast_2d(x), gmm.weights[c], gmm.means[c], gmm.variances[c])
    if not np.any(np.isfinite(joint)):
        raise NumericalError(f"Every component likelihood of class {c} underflowed")
    return responsibilities(joint)[0]


def sinkhorn(log_scores: np.ndarray, n_iters: int = 10, epsilon: float = 1.0, tol: float = 1e-6,
             max_iters: int = 10000) -> np.ndarray:
    """
    Balance an (n, M) assignment: rows sum to 1, columns to n / M
    Alternates column and row scaling in log space, ending on rows; runs at least n_iters
    passes, then continues until every column sum is within tol of n / M (at most max_iters)
    """
    log_q = np.asarray(log_scores, dtype=np.float64) / epsilon
    n, m = log_q.shape
    col_target = n / m
    deviation = np.inf
    for iteration in range(max(n_iters, max_iters)):
        log_q = log_q + np.log(col_target) - logsumexp(log_q, axis=0, keepdims=True)
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
        if iteration + 1 >= n_iters:
            deviation = float(np.max(np.abs(np.exp(log_q).sum(axis=0) - col_target)))
            if deviation < tol:
                break
    else:
        logger.warning(f"Sinkhorn stopped after {iteration + 1} iterations, column residual {deviation:.2e}")
    return np.exp(log_q)


def sinkhorn_em_update(gmm: ClassGMM, features: np.ndarray, labels: np.ndarray, momentum: float,
                       sinkhorn_iters: int = 10, epsilon: float = 1.0, variance_floor: float = 1e-6,
                       sinkhorn_tol: float = 1e-6, sinkhorn_max_iters: int = 10000) -> ClassGMM:
    """
    One online step per class seen in the batch: Sinkhorn-balanced E-step, batch M-step,
    then new = momentum * old + (1 - momentum) * batch optimum; sinkhorn_iters=0 gives plain EM
    """
    gmm.require_initialized()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    for c in range(gmm.n_classes):
        x = features[labels == c]
        if x.shape[0] == 0:
            continue
        joint = log_joint(x, gmm.weights[c], gmm.means[c], gmm.variances[c])
        if not np.all(np.any(np.isfinite(joint), axis=1)):
            raise NumericalError(f"Class {c} GMM likelihood underflowed during the E-step")
        resp = (sinkhorn(joint, sinkhorn_iters, epsilon, sinkhorn_tol, sinkhorn_max_iters) if sinkhorn_iters > 0
                else responsibilities(joint))
        counts, batch_means, batch_vars = weighted_moments(x, resp, gmm.means[c], gmm.variances[c], variance_floor)
        batch_weights = counts / counts.sum()
        gmm.weights[c] = momentum * gmm.weights[c] + (1.0 - momentum) * batch_weights
        gmm.weights[c] /= gmm.weights[c].sum()
        gmm.means[c] = momentum * gmm.means[c] + (1.0 - momentum) * batch_means
        gmm.variances[c] = np.maximum(momentum * gmm.variances[c] + (1.0 - momentum) * batch_vars, variance_floor)
        gmm.updates[c] += 1
    return gmm


def select_prototypes(features: np.ndarray, gmm: ClassGMM) -> np.ndarray:
    """(B, K, D): for every sample and class, the mean of that class's max-posterior component"""
    gmm.require_initialized()
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.empty((features.shape[0], gmm.n_classes, features.shape[1]))
    for c in range(gmm.n_classes):
        joint = log_joint(features, gmm.weights[c], gmm.means[c], gmm.variances[c])
        prototypes[:, c, :] = gmm.means[c][np.argmax(joint, axis=1)]
    return prototypes


def mcl_loss(x: tf.Tensor, labels: tf.Tensor, gmm: ClassGMM, tau: float,
             prototypes: Optional[np.ndarray] = None) -> tf.Tensor:
    """
    Cross-entropy of x against one prototype per class, the true class as positive
    Prototypes are constants; pass them in to hold the argmax selection fixed
    """
    x = tf.convert_to_tensor(x)
    if prototypes is None:
        prototypes = select_prototypes(x.numpy(), gmm)
    prototypes = tf.constant(prototypes, dtype=x.dtype)
    logits = tf.einsum('bd,bcd->bc', x, prototypes) / tau
    labels = tf.cast(labels, tf.int64)
    return tf.reduce_mean(tf.nn.sparse_softmax_cross_entropy_with_logits(labels=labels, logits=logits))


def alignment_features(x_out: tf.Tensor) -> tf.Tensor:
    """Prototype space: unit-normalized X_out"""
    return _normalize_rows(x_out)


def update_from_config(gmm: ClassGMM, features: np.ndarray, labels: np.ndarray, config: AlignmentConfig) -> ClassGMM:
    return sinkhorn_em_update(gmm, features, labels, config.momentum, config.sinkhorn_iters,
                              config.sinkhorn_epsilon, config.variance_floor, config.sinkhorn_tol,
                              config.sinkhorn_max_iters)
