"""
Modality encoders
ABMIL pooling of patch bags, corpus K-means plus per-bag GMM local components,
the RNA global MLP and multi-head local attention, and the in-model
normalization that turns raw or precomputed inputs into a ModalityBundle
"""

import logging
from dataclasses import replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import tensorflow as tf
from sklearn.cluster import KMeans

from services.config import ModelConfig, RunConfig, derive_seed
from services.data_service import MODALITIES, Modality, ModalityInput, SampleRecord, collate
from services.errors import (
    ConfigurationError,
    DegenerateClusteringError,
    DimensionError,
    EmptyBagError,
    NumericalError,
)
from services.fusion import ModalityBundle
from services.mixtures import log_joint, responsibilities, weighted_moments

logger = logging.getLogger(__name__)

MASKED_SCORE = -1e9


class AbmilPooler(tf.keras.layers.Layer):
    """Gated attention pooling: a = softmax(w^T (tanh(V z) * sigmoid(U z)))"""

    def __init__(self, attention_dim: int, **kwargs):
        super().__init__(**kwargs)
        self.attention_v = tf.keras.layers.Dense(attention_dim, activation='tanh', dtype=self.dtype, name='V')
        self.attention_u = tf.keras.layers.Dense(attention_dim, activation='sigmoid', dtype=self.dtype, name='U')
        self.attention_w = tf.keras.layers.Dense(1, use_bias=False, dtype=self.dtype, name='w')

    def call(self, instances: tf.Tensor, instance_mask: Optional[tf.Tensor] = None):
        """instances (B, N, D), instance_mask (B, N) -> pooled (B, D), weights (B, N)"""
        scores = self.attention_w(self.attention_v(instances) * self.attention_u(instances))[..., 0]
        if instance_mask is not None:
            instance_mask = tf.cast(instance_mask, scores.dtype)
            scores = tf.where(instance_mask > 0, scores, tf.constant(MASKED_SCORE, dtype=scores.dtype))
        weights = tf.nn.softmax(scores, axis=-1)
        if instance_mask is not None:
            # rows with no instances pool to zero
            weights = weights * tf.reduce_max(instance_mask, axis=-1, keepdims=True)
        return tf.einsum('bn,bnd->bd', weights, instances), weights


def abmil_pool(pooler: AbmilPooler, instances: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    instances = np.asarray(instances)
    if instances.ndim != 2 or instances.shape[0] == 0:
        raise EmptyBagError(f"ABMIL pooling needs at least one instance, got shape {instances.shape}")
    pooled, weights = pooler(tf.constant(instances[None, :, :], dtype=pooler.dtype))
    return pooled.numpy()[0], weights.numpy()[0]


def fit_corpus_kmeans(instances: np.ndarray, n_components: int, seed: int) -> np.ndarray:
    """Lloyd's K-means with k-means++ seeding over every training instance"""
    instances = np.asarray(instances, dtype=np.float64)
    n_distinct = np.unique(instances, axis=0).shape[0] if instances.size else 0
    if n_distinct < n_components:
        raise DegenerateClusteringError(f"{n_distinct} distinct points cannot form {n_components} clusters",
                                        n_distinct=n_distinct, n_components=n_components)
    kmeans = KMeans(
        n_clusters=n_components,
        init='k-means++',
        n_init=1,
        max_iter=100,
        tol=0.0,
        algorithm='lloyd',
        random_state=derive_seed(seed, 'fit_corpus_kmeans'),
    )
    kmeans.fit(instances)
    logger.debug(f"Corpus K-means: {instances.shape[0]} points, {kmeans.n_iter_} iterations")
    return kmeans.cluster_centers_


def fit_local_gmm(bag: np.ndarray, centroids: np.ndarray, max_iter: int = 25, tol: float = 1e-6,
                  variance_floor: float = 1e-6) -> Tuple[np.ndarray, List[float]]:
    """
    Diagonal-covariance EM started at the corpus centroids (uniform weights, unit variances)
    Returns the C component means and the log-likelihood of every E-step
    """
    bag = np.asarray(bag, dtype=np.float64)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise EmptyBagError(f"Local GMM needs at least one instance, got shape {bag.shape}")
    n_components = centroids.shape[0]
    weights = np.full(n_components, 1.0 / n_components)
    means = np.array(centroids, dtype=np.float64)
    variances = np.ones_like(means)

    history = []
    for iteration in range(max_iter):
        log_prob = log_joint(bag, weights, means, variances)
        resp = responsibilities(log_prob)
        log_likelihood = float(np.sum(np.logaddexp.reduce(log_prob, axis=1)))
        if not np.isfinite(log_likelihood) or not np.all(np.isfinite(resp)):
            raise NumericalError(f"Local GMM likelihood became non-finite at iteration {iteration}",
                                 iteration=iteration)
        history.append(log_likelihood)
        if iteration > 0 and abs(history[-1] - history[-2]) < tol * abs(history[-2]):
            break
        counts, means, variances = weighted_moments(bag, resp, means, variances, variance_floor)
        weights = counts / bag.shape[0]
    return means, history


class GlobalMlp(tf.keras.layers.Layer):
    """Three Dense -> LayerNorm -> ReLU -> Dropout blocks mapping N_G to D"""

    def __init__(self, input_dim: int, dim: int, dropout: float = 0.2, **kwargs):
        super().__init__(**kwargs)
        self.input_dim = input_dim
        self.blocks = []
        for i in range(3):
            self.blocks.append(tf.keras.layers.Dense(dim, dtype=self.dtype, name=f'dense_{i}'))
            self.blocks.append(tf.keras.layers.LayerNormalization(epsilon=1e-5, dtype=self.dtype, name=f'norm_{i}'))
            self.blocks.append(tf.keras.layers.ReLU(dtype=self.dtype, name=f'relu_{i}'))
            self.blocks.append(tf.keras.layers.Dropout(dropout, dtype=self.dtype, name=f'dropout_{i}'))

    def call(self, x: tf.Tensor, training: bool = False):
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"GlobalMlp expects {self.input_dim} inputs, got {x.shape[-1]}")
        for layer in self.blocks:
            x = layer(x, training=training) if isinstance(layer, tf.keras.layers.Dropout) else layer(x)
        return x


class MultiHeadLocalAttention(tf.keras.layers.Layer):
    """
    Row j = sum_k alpha_jk W_j t_k with alpha softmax-normalized over tokens per head
    Scores come from a per-head affine read of each token
    """

    def __init__(self, n_heads: int, token_dim: int, dim: int, **kwargs):
        super().__init__(**kwargs)
        self.n_heads = n_heads
        self.token_dim = token_dim
        self.dim = dim
        self.scorer = tf.keras.layers.Dense(n_heads, dtype=self.dtype, name='scorer')

    def build(self, input_shape):
        self.projections = self.add_weight(
            name='projections',
            shape=(self.n_heads, self.token_dim, self.dim),
            initializer='glorot_uniform',
            dtype=self.dtype,
        )
        super().build(input_shape)

    def call(self, tokens: tf.Tensor, token_mask: Optional[tf.Tensor] = None):
        """tokens (B, N_G, D_token) -> rows (B, N_h, D), alpha (B, N_h, N_G)"""
        if tokens.shape[-1] != self.token_dim:
            raise DimensionError(f"Tokens of width {tokens.shape[-1]}, expected {self.token_dim}")
        scores = tf.transpose(self.scorer(tokens), (0, 2, 1))
        if token_mask is not None:
            keep = tf.cast(token_mask, scores.dtype)[:, None, :] > 0
            scores = tf.where(keep, scores, tf.constant(MASKED_SCORE, dtype=scores.dtype))
        alpha = tf.nn.softmax(scores, axis=-1)
        pooled = tf.einsum('bhk,bkt->bht', alpha, tokens)
        return tf.einsum('bht,htd->bhd', pooled, self.projections), alpha


def multihead_local(layer: MultiHeadLocalAttention, tokens: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise DimensionError(f"Expected a non-empty (N_G, D_token) token matrix, got {tokens.shape}")
    rows, alpha = layer(tf.constant(tokens[None], dtype=layer.dtype))
    return rows.numpy()[0], alpha.numpy()[0]


def mlp_global(layer: GlobalMlp, expression: np.ndarray, training: bool = False) -> np.ndarray:
    return layer(tf.constant(np.asarray(expression)[None], dtype=layer.dtype), training=training).numpy()[0]


def l2_normalize(x: tf.Tensor) -> tf.Tensor:
    """Unit L2 norm on the last axis; zero vectors stay zero"""
    return tf.math.l2_normalize(x, axis=-1, epsilon=1e-24)


class ModalityEncoder(tf.keras.layers.Layer):
    """
    Turns a collated batch into the six normalized, presence-masked modality tensors
    Precomputed mode passes the stored vectors through; raw mode computes the
    WSI global with ABMIL and both RNA representations from the expression vector
    """

    INPUT_KEYS = ('presence', 'wsi_global', 'wsi_local', 'rna_global', 'rna_local', 'rpt_global', 'rpt_local',
                  'wsi_patches', 'wsi_patch_mask', 'rna_expression')

    def __init__(self, config: ModelConfig, **kwargs):
        super().__init__(**kwargs)
        self.mode = config.mode
        self.rna_genes = config.rna_genes
        self.token_dim = config.rna_token_dim
        if self.mode == 'raw':
            if config.rna_genes <= 0:
                raise ConfigurationError("raw mode needs model.rna_genes from the dataset manifest",
                                         field='model.rna_genes')
            self.pooler = AbmilPooler(config.attention_width, dtype=self.dtype, name='abmil')
            self.rna_mlp = GlobalMlp(config.rna_genes, config.dim, config.dropout, dtype=self.dtype, name='rna_mlp')
            self.rna_attention = MultiHeadLocalAttention(config.n_heads, config.rna_token_dim, config.dim,
                                                         dtype=self.dtype, name='rna_attention')

    def call(self, inputs: Dict[str, tf.Tensor], training: bool = False) -> Dict[str, tf.Tensor]:
        presence = tf.cast(inputs['presence'], self.dtype)
        out = {'presence': presence}
        globals_ = {m: tf.cast(inputs[f'{m.value}_global'], self.dtype) for m in MODALITIES}
        locals_ = {m: tf.cast(inputs[f'{m.value}_local'], self.dtype) for m in MODALITIES}

        if self.mode == 'raw':
            patches = tf.cast(inputs['wsi_patches'], self.dtype)
            globals_[Modality.WSI], out['patch_weights'] = self.pooler(patches, inputs['wsi_patch_mask'])
            expression = tf.cast(inputs['rna_expression'], self.dtype)
            globals_[Modality.RNA] = self.rna_mlp(expression, training=training)
            tokens = tf.reshape(expression, (-1, self.rna_genes // self.token_dim, self.token_dim))
            locals_[Modality.RNA], out['token_weights'] = self.rna_attention(tokens)

        for i, modality in enumerate(MODALITIES):
            present = presence[:, i:i + 1]
            out[f'{modality.value}_global'] = l2_normalize(globals_[modality]) * present
            out[f'{modality.value}_local'] = l2_normalize(locals_[modality]) * present[:, :, None]
        return out

    def encode(self, batch: Dict[str, np.ndarray], training: bool = False) -> ModalityBundle:
        inputs = {k: v for k, v in batch.items() if k in self.INPUT_KEYS}
        out = self(inputs, training=training)
        return ModalityBundle(
            globals_={m: out[f'{m.value}_global'] for m in MODALITIES},
            locals_={m: out[f'{m.value}_local'] for m in MODALITIES},
            presence=out['presence'],
            attention={k: out[k] for k in ('patch_weights', 'token_weights') if k in out},
        )


def encode_sample(record: SampleRecord, config: RunConfig, encoder: Optional[ModalityEncoder] = None
                  ) -> ModalityBundle:
    """Encode a single record in inference mode"""
    encoder = encoder or ModalityEncoder(config.model, dtype=config.model.dtype)
    return encoder.encode(collate([record], config), training=False)


def prepare_local_components(records: List[SampleRecord], n_components: int, seed: int,
                             centroids: Optional[Dict[str, np.ndarray]] = None,
                             variance_floor: float = 1e-6) -> Tuple[List[SampleRecord], Dict[str, np.ndarray]]:
    """
    Replace WSI and report local matrices by per-bag GMM means
    Centroids are fitted on these records unless given (use the training split's centroids at test time)
    """
    sources = {
        Modality.WSI: lambda r: r.patch_embeddings,
        Modality.RPT: lambda r: r.sentence_embeddings,
    }
    fitted = dict(centroids or {})
    for modality, source in sources.items():
        if modality.value in fitted:
            continue
        bags = [source(r) for r in records if r.present(modality) and source(r) is not None]
        if not bags:
            logger.warning(f"No raw {modality.value} bags to cluster, keeping stored local components")
            continue
        fitted[modality.value] = fit_corpus_kmeans(np.concatenate(bags, axis=0), n_components,
                                                   derive_seed(seed, modality.value))
        logger.info(f"Fitted {n_components} corpus centroids for {modality.value} over {len(bags)} bags")

    out = []
    for record in records:
        modalities = dict(record.modalities)
        for modality, source in sources.items():
            bag = source(record)
            if modality.value not in fitted or bag is None or not record.present(modality):
                continue
            means, _ = fit_local_gmm(bag, fitted[modality.value], variance_floor=variance_floor)
            modalities[modality] = ModalityInput(global_vec=record.modalities[modality].global_vec,
                                                 local=means, present=True)
        out.append(replace(record, modalities=modalities))
    return out, fitted
