import numpy as np
import pytest
import tensorflow as tf
from scipy.optimize import linear_sum_assignment

from services.config import ModelConfig
from services.data_service import Modality, collate
from services.encoders import (
    AbmilPooler,
    GlobalMlp,
    ModalityEncoder,
    MultiHeadLocalAttention,
    abmil_pool,
    encode_sample,
    fit_corpus_kmeans,
    fit_local_gmm,
    mlp_global,
    multihead_local,
    prepare_local_components,
)
from services.errors import DegenerateClusteringError, DimensionError, EmptyBagError
from tests.gradcheck import check_gradients
from tests.helpers import small_config


@pytest.fixture
def pooler():
    tf.keras.utils.set_random_seed(0)
    return AbmilPooler(4, dtype='float64')


class TestAbmilPool:
    def test_identical_instances(self, pooler):
        v = np.array([0.5, -1.0, 2.0, 0.25])
        pooled, weights = abmil_pool(pooler, np.tile(v, (6, 1)))
        np.testing.assert_allclose(pooled, v, atol=1e-12)
        np.testing.assert_allclose(weights, np.full(6, 1 / 6), atol=1e-12)

    def test_single_instance(self, pooler, rng):
        z = rng.standard_normal((1, 4))
        pooled, weights = abmil_pool(pooler, z)
        np.testing.assert_allclose(pooled, z[0], atol=1e-12)
        np.testing.assert_allclose(weights, [1.0])

    def test_convex_hull(self, pooler, rng):
        z = rng.standard_normal((20, 4))
        pooled, weights = abmil_pool(pooler, z)
        assert np.all(weights >= 0)
        assert abs(weights.sum() - 1) < 1e-12
        assert np.all(pooled >= z.min(axis=0) - 1e-12) and np.all(pooled <= z.max(axis=0) + 1e-12)

    def test_permutation_invariant(self, pooler, rng):
        z = rng.standard_normal((15, 4))
        perm = rng.permutation(15)
        a, wa = abmil_pool(pooler, z)
        b, wb = abmil_pool(pooler, z[perm])
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(wa[perm], wb, atol=1e-6)

    def test_padding_is_ignored(self, pooler, rng):
        z = rng.standard_normal((1, 5, 4))
        padded = np.concatenate([z, 100 * np.ones((1, 3, 4))], axis=1)
        mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0]], dtype=np.float64)
        pooled, weights = pooler(tf.constant(padded), tf.constant(mask))
        reference, _ = abmil_pool(pooler, z[0])
        np.testing.assert_allclose(pooled.numpy()[0], reference, atol=1e-10)
        assert np.all(weights.numpy()[0, 5:] == 0)

    def test_empty_bag(self, pooler):
        with pytest.raises(EmptyBagError):
            abmil_pool(pooler, np.zeros((0, 4)))


class TestFitCorpusKmeans:
    def test_recovers_blobs(self, rng):
        centers = np.array([[0, 0], [10, 0], [0, 10], [10, 10]], dtype=np.float64)
        sigma = 0.1
        points = np.concatenate([c + sigma * rng.standard_normal((2000, 2)) for c in centers])
        found = fit_corpus_kmeans(points, 4, seed=0)
        cost = ((found[:, None, :] - centers[None]) ** 2).sum(-1)
        rows, cols = linear_sum_assignment(cost)
        assert np.all(np.sqrt(cost[rows, cols]) < 0.1 * sigma)

    def test_distinct_points_are_centroids(self):
        points = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
        found = fit_corpus_kmeans(np.repeat(points, 3, axis=0), 3, seed=1)
        assert sorted(map(tuple, found.round(12))) == sorted(map(tuple, points))

    def test_deterministic(self, rng):
        points = rng.standard_normal((50, 3))
        np.testing.assert_array_equal(fit_corpus_kmeans(points, 4, seed=5), fit_corpus_kmeans(points, 4, seed=5))

    def test_degenerate(self):
        with pytest.raises(DegenerateClusteringError):
            fit_corpus_kmeans(np.ones((10, 2)), 2, seed=0)


class TestFitLocalGmm:
    def test_fixed_point_at_centroids(self):
        centroids = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
        bag = np.repeat(centroids, 20, axis=0)
        means, _ = fit_local_gmm(bag, centroids)
        np.testing.assert_allclose(means, centroids, atol=1e-6)

    def test_fewer_instances_than_components(self, rng):
        centroids = rng.standard_normal((4, 3))
        means, _ = fit_local_gmm(rng.standard_normal((2, 3)), centroids)
        assert means.shape == (4, 3)
        assert np.all(np.isfinite(means))

    def test_log_likelihood_monotone(self, rng):
        centroids = rng.standard_normal((3, 2))
        bag = np.concatenate([rng.standard_normal((30, 2)) + c * 4 for c in centroids])
        _, history = fit_local_gmm(bag, centroids, tol=0.0)
        assert len(history) == 25
        assert np.all(np.diff(history) >= -1e-8)

    def test_empty_bag(self):
        with pytest.raises(EmptyBagError):
            fit_local_gmm(np.zeros((0, 2)), np.zeros((1, 2)))


class TestGlobalMlp:
    def test_zero_input(self):
        layer = GlobalMlp(6, 4, dtype='float64')
        np.testing.assert_array_equal(mlp_global(layer, np.zeros(6)), np.zeros(4))

    def test_eval_deterministic(self, rng):
        layer = GlobalMlp(6, 4, dropout=0.5, dtype='float64')
        x = rng.standard_normal(6)
        np.testing.assert_array_equal(mlp_global(layer, x), mlp_global(layer, x))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            mlp_global(GlobalMlp(6, 4), np.zeros(5))

    def test_input_gradient(self, rng):
        tf.keras.utils.set_random_seed(3)
        layer = GlobalMlp(5, 4, dropout=0.0, dtype='float64')
        x = tf.Variable(rng.standard_normal((1, 5)))
        assert check_gradients(lambda: tf.reduce_sum(layer(x)), [x]) < 1e-4


class TestMultiHeadLocal:
    def test_single_token(self, rng):
        layer = MultiHeadLocalAttention(3, 2, 4, dtype='float64')
        t = rng.standard_normal((1, 2))
        rows, alpha = multihead_local(layer, t)
        expected = np.einsum('t,htd->hd', t[0], layer.projections.numpy())
        np.testing.assert_allclose(rows, expected, atol=1e-12)
        np.testing.assert_allclose(alpha, np.ones((3, 1)))

    def test_identical_tokens(self, rng):
        layer = MultiHeadLocalAttention(3, 2, 4, dtype='float64')
        t = rng.standard_normal(2)
        rows, _ = multihead_local(layer, np.tile(t, (7, 1)))
        expected = np.einsum('t,htd->hd', t, layer.projections.numpy())
        np.testing.assert_allclose(rows, expected, atol=1e-12)

    def test_head_weights_sum_to_one(self, rng):
        layer = MultiHeadLocalAttention(4, 1, 3)
        _, alpha = multihead_local(layer, rng.standard_normal((10, 1)))
        np.testing.assert_allclose(alpha.sum(axis=1), np.ones(4), atol=1e-6)

    def test_masked_token_leaves_rows(self, rng):
        layer = MultiHeadLocalAttention(2, 3, 4, dtype='float64')
        tokens = rng.standard_normal((1, 5, 3))
        mask = np.array([[1, 1, 1, 1, 0]], dtype=np.float64)
        masked_rows, alpha = layer(tf.constant(tokens), tf.constant(mask))
        reference, _ = multihead_local(layer, tokens[0, :4])
        assert np.all(alpha.numpy()[0, :, 4] == 0)
        np.testing.assert_allclose(masked_rows.numpy()[0], reference, atol=1e-6)


class TestEncodeSample:
    def test_precomputed_normalizes(self, dataset):
        records, _ = dataset
        config = small_config()
        bundle = encode_sample(records[0], config)
        v = records[0].modalities[Modality.RNA].global_vec
        np.testing.assert_allclose(bundle.globals_[Modality.RNA].numpy()[0], v / np.linalg.norm(v), atol=1e-6)
        local = records[0].modalities[Modality.WSI].local
        np.testing.assert_allclose(bundle.locals_[Modality.WSI].numpy()[0],
                                   local / np.linalg.norm(local, axis=1, keepdims=True), atol=1e-6)

    def test_absent_modality_is_zero(self, dataset):
        from services.data_service import drop_modality
        records, _ = dataset
        record = drop_modality(records[:1], Modality.WSI)[0]
        bundle = encode_sample(record, small_config())
        assert not np.any(bundle.globals_[Modality.WSI].numpy())
        assert not np.any(bundle.locals_[Modality.WSI].numpy())
        np.testing.assert_array_equal(bundle.presence.numpy()[0], [0, 1, 1])

    def test_raw_identical_patches(self, raw_dataset):
        records, _ = raw_dataset
        config = small_config(**{'model.mode': 'raw', 'model.rna_genes': 12})
        p = np.arange(1, 9, dtype=np.float32)
        record = records[0]
        record.patch_embeddings = np.tile(p, (6, 1))
        bundle = encode_sample(record, config)
        np.testing.assert_allclose(bundle.globals_[Modality.WSI].numpy()[0], p / np.linalg.norm(p), atol=1e-6)
        weights = bundle.attention['patch_weights'].numpy()[0]
        np.testing.assert_allclose(weights.sum(), 1.0, atol=1e-6)

    def test_raw_mode_needs_genes(self):
        from services.errors import ConfigurationError
        with pytest.raises(ConfigurationError):
            ModalityEncoder(ModelConfig(mode='raw', dim=8, rna_genes=0))

    def test_prepare_local_components(self, raw_dataset):
        records, _ = raw_dataset
        prepared, centroids = prepare_local_components(records, 4, seed=0)
        assert set(centroids) == {'wsi', 'rpt'}
        assert centroids['wsi'].shape == (4, 8)
        assert prepared[0].modalities[Modality.WSI].local.shape == (4, 8)
        reused, again = prepare_local_components(records[:3], 4, seed=99, centroids=centroids)
        np.testing.assert_array_equal(again['wsi'], centroids['wsi'])
        np.testing.assert_allclose(reused[0].modalities[Modality.RPT].local,
                                   prepared[0].modalities[Modality.RPT].local, atol=1e-12)

    def test_raw_batch_through_encoder(self, raw_dataset):
        records, _ = raw_dataset
        config = small_config(**{'model.mode': 'raw', 'model.rna_genes': 12})
        encoder = ModalityEncoder(config.model)
        bundle = encoder.encode(collate(records[:4], config))
        assert bundle.locals_[Modality.RNA].shape == (4, 4, 8)
        assert bundle.attention['token_weights'].shape == (4, 4, 12)
