"""
Contrastive losses and the per-class prototype mixtures
"""

import logging
import math

import numpy as np
import pytest
import tensorflow as tf

from services.alignment import (
    ClassGMM,
    alignment_features,
    gmm_posterior,
    initialize_class_gmms,
    mcl_loss,
    select_prototypes,
    sinkhorn,
    sinkhorn_em_update,
    symcl_loss,
    symcl_total,
)
from services.config import AlignmentConfig
from services.data_service import MODALITIES
from services.mixtures import log_joint
from services.errors import EmptyBatchError, GMMStateError
from services.fusion import ModalityBundle
from tests.gradcheck import check_gradients


def _two_class_features(rng, n=60, dim=4):
    labels = np.repeat([0, 1], n // 2)
    centers = np.stack([np.full(dim, -3.0), np.full(dim, 3.0)])
    features = centers[labels] + rng.standard_normal((n, dim))
    return features, labels


class TestSymcl:
    def test_single_row_is_zero(self, rng):
        a = tf.constant(rng.standard_normal((1, 4)))
        b = tf.constant(rng.standard_normal((1, 4)))
        assert float(symcl_loss(a, b, tau=1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_orthonormal_rows(self):
        eye = tf.eye(2, dtype=tf.float64)
        assert float(symcl_loss(eye, eye, tau=1.0)) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)

    def test_divide_mode(self):
        eye = tf.eye(2, dtype=tf.float64)
        assert float(symcl_loss(eye, eye, tau=0.5, tau_mode='divide')) == pytest.approx(
            float(symcl_loss(eye, eye, tau=2.0)), abs=1e-12)

    def test_scale_invariant(self, rng):
        a = rng.standard_normal((5, 3))
        b = rng.standard_normal((5, 3))
        base = float(symcl_loss(tf.constant(a), tf.constant(b), tau=10.0))
        scaled = float(symcl_loss(tf.constant(3 * a), tf.constant(0.5 * b), tau=10.0))
        assert base == pytest.approx(scaled, abs=1e-10)

    def test_symmetric_in_its_arguments(self, rng):
        a = tf.constant(rng.standard_normal((6, 4)))
        b = tf.constant(rng.standard_normal((6, 4)))
        assert float(symcl_loss(a, b, tau=10.0)) == pytest.approx(float(symcl_loss(b, a, tau=10.0)), abs=1e-12)

    def test_row_permutation_invariant(self, rng):
        a = rng.standard_normal((7, 4))
        b = rng.standard_normal((7, 4))
        order = rng.permutation(7)
        base = float(symcl_loss(tf.constant(a), tf.constant(b), tau=10.0))
        permuted = float(symcl_loss(tf.constant(a[order]), tf.constant(b[order]), tau=10.0))
        assert permuted == pytest.approx(base, abs=1e-10)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatchError):
            symcl_loss(tf.zeros((0, 3), tf.float64), tf.zeros((0, 3), tf.float64), tau=1.0)

    def test_total_averages_six_terms(self, rng):
        def slots():
            return {m: tf.constant(rng.standard_normal((4, 3))) for m in MODALITIES}
        cma_g, cma_l = slots(), slots()
        agg_g = tf.constant(rng.standard_normal((4, 3)))
        agg_l = tf.constant(rng.standard_normal((4, 3)))
        bundle = ModalityBundle(globals_=cma_g, locals_=cma_l, presence=tf.ones((4, 3), tf.float64))
        bundle.fill(cma_global=cma_g, cma_local=cma_l, agg_global=agg_g, agg_local=agg_l)
        expected = np.mean([float(symcl_loss(cma_g[m], agg_g, 10.0)) for m in MODALITIES]
                           + [float(symcl_loss(cma_l[m], agg_l, 10.0)) for m in MODALITIES])
        assert float(symcl_total(bundle, 10.0)) == pytest.approx(expected, abs=1e-10)

    def test_total_skips_absent_rows(self, rng):
        slots = {m: tf.constant(rng.standard_normal((3, 3))) for m in MODALITIES}
        agg = tf.constant(rng.standard_normal((3, 3)))
        presence = tf.constant([[1, 1, 0], [1, 1, 0], [1, 0, 0]], tf.float64)
        bundle = ModalityBundle(globals_=slots, locals_=slots, presence=presence)
        bundle.fill(cma_global=slots, cma_local=slots, agg_global=agg, agg_local=agg)
        value = float(symcl_total(bundle, 10.0))
        assert np.isfinite(value)
        wsi = MODALITIES[0]
        rna = MODALITIES[1]
        expected = (2 * float(symcl_loss(slots[wsi], agg, 10.0))
                    + 2 * float(symcl_loss(slots[rna][:2], agg[:2], 10.0))) / 6
        assert value == pytest.approx(expected, abs=1e-10)


class TestMcl:
    def _gmm_stub(self, n_classes, dim):
        gmm = ClassGMM.empty(n_classes, 1, dim)
        gmm.initialized = True
        return gmm

    def test_three_class_logits(self):
        x = tf.constant([[2.0, 0.0, 0.0]], tf.float64)
        prototypes = np.eye(3)[None]
        loss = mcl_loss(x, tf.constant([0]), self._gmm_stub(3, 3), tau=1.0, prototypes=prototypes)
        assert float(loss) == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 2)), abs=1e-12)
        assert float(loss) == pytest.approx(0.2395, abs=1e-4)

    def test_symmetric_logits(self):
        x = tf.constant([[1.0, 1.0]], tf.float64)
        prototypes = np.eye(2)[None]
        loss = mcl_loss(x, tf.constant([1]), self._gmm_stub(2, 2), tau=0.1, prototypes=prototypes)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-12)

    def test_selects_max_posterior_component(self):
        gmm = ClassGMM.empty(2, 2, 2)
        gmm.means[0] = [[5.0, 0.0], [-5.0, 0.0]]
        gmm.means[1] = [[0.0, 5.0], [0.0, -5.0]]
        gmm.initialized = True
        prototypes = select_prototypes(np.array([[4.0, -4.0]]), gmm)
        np.testing.assert_array_equal(prototypes[0], [[5.0, 0.0], [0.0, -5.0]])

    def test_decreases_toward_own_prototype(self):
        prototypes = np.eye(3)[None]
        gmm = self._gmm_stub(3, 3)
        start, target = np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])
        losses = []
        for t in np.linspace(0.0, 1.0, 11):
            x = tf.constant([(1 - t) * start + t * target])
            losses.append(float(mcl_loss(x, tf.constant([0]), gmm, tau=0.1, prototypes=prototypes)))
        assert np.all(np.diff(losses) < 0)

    def test_decreases_as_normalized_features_approach_prototype(self, rng):
        gmm = self._gmm_stub(2, 4)
        own = rng.standard_normal(4)
        other = rng.standard_normal(4)
        prototypes = np.stack([own, other])[None] / np.linalg.norm([own, other], axis=1)[None, :, None]
        x0 = prototypes[0, 1]
        far = float(mcl_loss(alignment_features(tf.constant([x0])), tf.constant([0]), gmm, 0.1, prototypes))
        near = float(mcl_loss(alignment_features(tf.constant([x0 + 5.0 * prototypes[0, 0]])), tf.constant([0]),
                              gmm, 0.1, prototypes))
        assert near < far

    def test_uninitialized(self):
        with pytest.raises(GMMStateError):
            mcl_loss(tf.ones((1, 2), tf.float64), tf.constant([0]), ClassGMM.empty(2, 2, 2), tau=0.1)


class TestClassGmm:
    def test_initialize(self, rng):
        features, labels = _two_class_features(rng)
        gmm = initialize_class_gmms(features, labels, 2, 3, seed=0)
        assert gmm.initialized
        assert gmm.means.shape == (2, 3, 4)
        np.testing.assert_allclose(gmm.weights.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(gmm.means[0].mean(axis=0) < 0) and np.all(gmm.means[1].mean(axis=0) > 0)

    def test_initialize_deterministic(self, rng):
        features, labels = _two_class_features(rng)
        a = initialize_class_gmms(features, labels, 2, 3, seed=5)
        b = initialize_class_gmms(features, labels, 2, 3, seed=5)
        np.testing.assert_array_equal(a.means, b.means)

    def test_posterior(self):
        gmm = ClassGMM.empty(1, 2, 2)
        gmm.means[0] = [[0.0, 0.0], [10.0, 10.0]]
        gmm.initialized = True
        post = gmm_posterior(np.array([0.0, 0.0]), 0, gmm)
        assert post.sum() == pytest.approx(1.0, abs=1e-12)
        assert post[0] > 0.999

    def test_posterior_at_midpoint(self):
        gmm = ClassGMM.empty(1, 2, 2)
        gmm.means[0] = [[-1.0, 0.0], [1.0, 0.0]]
        gmm.initialized = True
        np.testing.assert_allclose(gmm_posterior(np.zeros(2), 0, gmm), [0.5, 0.5], atol=1e-12)

    def test_update_requires_initialization(self, rng):
        features, labels = _two_class_features(rng)
        with pytest.raises(GMMStateError):
            sinkhorn_em_update(ClassGMM.empty(2, 3, 4), features, labels, momentum=0.9)


class TestSinkhorn:
    def test_marginals(self, rng):
        q = sinkhorn(rng.standard_normal((12, 3)), n_iters=200)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-10)
        np.testing.assert_allclose(q.sum(axis=0), 4.0, atol=1e-6)

    def test_balances_a_collapsed_assignment(self):
        log_scores = np.log(np.array([[0.9, 0.1]] * 4))
        q = sinkhorn(log_scores, n_iters=50)
        np.testing.assert_allclose(q.sum(axis=0), [2.0, 2.0], atol=1e-6)

    def test_marginals_at_training_defaults(self, rng):
        x = np.vstack([rng.normal(2.0, 0.3, (28, 2)), rng.normal(-2.0, 0.3, (4, 2))])
        means = np.array([[2.0, 0.0], [0.0, 0.0], [-2.0, 0.0]])
        joint = log_joint(x, np.full(3, 1 / 3), means, np.ones((3, 2)))
        config = AlignmentConfig()
        q = sinkhorn(joint, config.sinkhorn_iters, config.sinkhorn_epsilon, config.sinkhorn_tol,
                     config.sinkhorn_max_iters)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(q.sum(axis=0), 32 / 3, atol=1e-6)

    def test_iteration_cap_is_reported(self, rng, caplog):
        x = np.vstack([rng.normal(2.0, 0.3, (28, 2)), rng.normal(-2.0, 0.3, (4, 2))])
        joint = log_joint(x, np.full(3, 1 / 3), np.array([[2.0, 0.0], [0.0, 0.0], [-2.0, 0.0]]), np.ones((3, 2)))
        with caplog.at_level(logging.WARNING, logger='services.alignment'):
            sinkhorn(joint, n_iters=1, tol=1e-12, max_iters=1)
        assert 'column residual' in caplog.text


class TestSinkhornEmUpdate:
    def test_plain_em_log_likelihood_monotone(self, rng):
        features, labels = _two_class_features(rng, n=80)
        gmm = initialize_class_gmms(features, labels, 2, 2, seed=1)
        history = [gmm.log_likelihood(features, labels)]
        for _ in range(15):
            sinkhorn_em_update(gmm, features, labels, momentum=0.0, sinkhorn_iters=0)
            history.append(gmm.log_likelihood(features, labels))
        assert np.all(np.diff(history) >= -1e-8)

    def test_full_momentum_keeps_state(self, rng):
        features, labels = _two_class_features(rng)
        gmm = initialize_class_gmms(features, labels, 2, 3, seed=2)
        means, variances, weights = gmm.means.copy(), gmm.variances.copy(), gmm.weights.copy()
        sinkhorn_em_update(gmm, features + 1.0, labels, momentum=1.0)
        np.testing.assert_array_equal(gmm.means, means)
        np.testing.assert_array_equal(gmm.variances, variances)
        np.testing.assert_allclose(gmm.weights, weights, atol=1e-12)
        assert gmm.updates.tolist() == [1, 1]

    def test_stays_on_simplex(self, rng):
        features, labels = _two_class_features(rng)
        gmm = initialize_class_gmms(features, labels, 2, 3, seed=3)
        for step in range(200):
            batch = rng.choice(len(labels), size=16, replace=False)
            sinkhorn_em_update(gmm, features[batch] + 0.1 * rng.standard_normal((16, 4)), labels[batch],
                               momentum=0.9, variance_floor=1e-6)
            assert np.all(gmm.weights >= 0)
            np.testing.assert_allclose(gmm.weights.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(gmm.variances >= 1e-6)

    def test_unseen_class_untouched(self, rng):
        features, labels = _two_class_features(rng)
        gmm = initialize_class_gmms(features, labels, 2, 2, seed=4)
        before = gmm.means[1].copy()
        sinkhorn_em_update(gmm, features[labels == 0], labels[labels == 0], momentum=0.5)
        np.testing.assert_array_equal(gmm.means[1], before)
        assert gmm.updates.tolist() == [1, 0]

    def test_array_round_trip(self, rng):
        features, labels = _two_class_features(rng)
        gmm = initialize_class_gmms(features, labels, 2, 2, seed=4)
        restored = ClassGMM.from_arrays(gmm.to_arrays())
        np.testing.assert_array_equal(restored.means, gmm.means)
        assert restored.initialized and restored.updates.tolist() == gmm.updates.tolist()


class TestAlignmentGradients:
    def test_symcl(self, rng):
        a = tf.Variable(rng.standard_normal((4, 3)))
        b = tf.Variable(rng.standard_normal((4, 3)))
        assert check_gradients(lambda: symcl_loss(a, b, tau=10.0), [a, b]) < 1e-4

    def test_mcl_with_fixed_prototypes(self, rng):
        gmm = ClassGMM.empty(3, 2, 3)
        gmm.initialized = True
        x = tf.Variable(rng.standard_normal((5, 3)))
        prototypes = rng.standard_normal((5, 3, 3))
        labels = tf.constant([0, 1, 2, 1, 0])
        assert check_gradients(lambda: mcl_loss(x, labels, gmm, tau=1.0, prototypes=prototypes), [x]) < 1e-4
