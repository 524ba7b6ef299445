import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capfed.errors import DomainError, LabelOutOfRangeError, ShapeMismatchError
from capfed.geometry import normalize, normalize_rows, sample_uniform_directions
from capfed.losses import (
    ConsensusContext,
    LossConfig,
    classification_loss,
    cluster_similarity,
    consensus_loss,
    finite_diff_check,
    loss_gradients,
    margin_similarity,
)


def random_instance(rng, n=8, d=16, batch=4, clusters=2):
    w = normalize_rows(rng.standard_normal((n, d)))
    f = normalize_rows(rng.standard_normal((batch, d)))
    labels = rng.integers(0, n, size=batch)
    ctx = ConsensusContext(normalize_rows(rng.standard_normal((clusters, d))))
    return f, labels, w, ctx


class TestMarginSimilarity:
    def test_cosface_positive_at_zero_angle(self):
        assert margin_similarity(LossConfig("cosface", 64.0, 0.35), 0.0, "positive") == pytest.approx(41.6)

    def test_arcface_positive_at_zero_angle(self):
        value = margin_similarity(LossConfig("arcface", 64.0, 0.5), 0.0, "positive")
        assert value == pytest.approx(64.0 * math.cos(-0.5), abs=1e-12)
        assert value == pytest.approx(56.165, abs=1e-3)

    def test_negative_role_orthogonal(self):
        for kind in ("cosface", "arcface"):
            assert margin_similarity(LossConfig(kind, 64.0), math.pi / 2, "negative") == pytest.approx(
                0.0, abs=1e-12
            )

    @given(st.floats(min_value=0.0, max_value=math.pi))
    @settings(max_examples=80, deadline=None)
    def test_negative_role_same_for_both_kinds(self, theta):
        a = margin_similarity(LossConfig("cosface", 16.0), theta, "negative")
        b = margin_similarity(LossConfig("arcface", 16.0), theta, "negative")
        assert a == b == pytest.approx(16.0 * math.cos(theta), abs=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            margin_similarity(LossConfig(), -0.1, "positive")
        with pytest.raises(DomainError):
            margin_similarity(LossConfig(), 0.1, "sideways")

    def test_config_defaults_and_validation(self):
        assert LossConfig("cosface").margin == 0.35
        assert LossConfig("arcface").margin == 0.5
        with pytest.raises(DomainError):
            LossConfig("sphereface")
        with pytest.raises(DomainError):
            LossConfig("cosface", scale=0.0)
        with pytest.raises(DomainError):
            LossConfig("cosface", margin=-0.1)


class TestClusterSimilarity:
    def _pair_at(self, theta, d=8):
        p = np.zeros(d)
        p[0] = 1.0
        f = np.zeros(d)
        f[0], f[1] = math.cos(theta), math.sin(theta)
        return p, f

    def test_inside_margin_saturates(self):
        p, f = self._pair_at(0.65)
        assert cluster_similarity(p, f, 1.3, 64.0) == pytest.approx(64.0, abs=1e-9)

    def test_boundary(self):
        p, f = self._pair_at(1.3)
        assert cluster_similarity(p, f, 1.3, 64.0) == pytest.approx(64.0, abs=1e-6)

    def test_quarter_turn_beyond(self):
        p, f = self._pair_at(1.0 + math.pi / 2)
        assert cluster_similarity(p, f, 1.0, 64.0) == pytest.approx(0.0, abs=1e-9)

    def test_continuous_at_kink(self):
        values = [
            cluster_similarity(*self._pair_at(1.3 + eps), 1.3, 32.0)
            for eps in (-1e-7, 0.0, 1e-7)
        ]
        assert max(values) - min(values) < 1e-4

    def test_decreasing_beyond_margin(self):
        thetas = np.linspace(1.3, math.pi, 40)
        vals = [cluster_similarity(*self._pair_at(t), 1.3, 8.0) for t in thetas]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


class TestClassificationLoss:
    def test_single_class_is_exactly_zero(self):
        rng = np.random.default_rng(0)
        f = sample_uniform_directions(4, 16, rng)
        w = sample_uniform_directions(1, 16, rng)
        assert classification_loss(f, np.zeros(4, dtype=int), w, LossConfig("cosface", 64.0)) == 0.0

    def test_zero_margin_families_coincide(self):
        rng = np.random.default_rng(1)
        f, labels, w, _ = random_instance(rng)
        a = classification_loss(f, labels, w, LossConfig("cosface", 32.0, 0.0))
        b = classification_loss(f, labels, w, LossConfig("arcface", 32.0, 0.0))
        assert a == pytest.approx(b, rel=1e-12)

    def test_hand_value_one_negative(self):
        f = np.array([[1.0, 0.0]])
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = classification_loss(f, np.array([0]), w, LossConfig("cosface", 1.0, 0.0))
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1.0)), abs=1e-12)

    def test_label_out_of_range(self):
        f = np.eye(3)[:2]
        w = np.eye(3)
        with pytest.raises(LabelOutOfRangeError):
            classification_loss(f, np.array([0, 3]), w, LossConfig())
        with pytest.raises(LabelOutOfRangeError):
            classification_loss(f, np.array([-1, 0]), w, LossConfig())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            classification_loss(np.eye(3), np.zeros(3, dtype=int), np.eye(4), LossConfig())

    def test_large_scale_is_finite(self):
        rng = np.random.default_rng(2)
        f, labels, w, ctx = random_instance(rng)
        loss = consensus_loss(f, labels, w, ctx, 1.3, LossConfig("cosface", 64.0))
        assert math.isfinite(loss)


class TestConsensusLoss:
    def test_empty_context_bit_for_bit(self):
        rng = np.random.default_rng(3)
        f, labels, w, _ = random_instance(rng)
        for kind in ("cosface", "arcface"):
            config = LossConfig(kind, 24.0)
            plain = classification_loss(f, labels, w, config)
            empty = consensus_loss(f, labels, w, ConsensusContext.empty(16), 1.3, config)
            assert plain == empty

    def test_never_below_classification(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            f, labels, w, ctx = random_instance(rng)
            config = LossConfig("cosface", 12.0)
            assert consensus_loss(f, labels, w, ctx, 1.0, config) > classification_loss(
                f, labels, w, config
            )

    def test_cluster_inside_margin_adds_full_weight(self):
        # one sample, one cluster at the sample itself: denominator gains e^s
        s = 4.0
        f = np.array([[1.0, 0.0, 0.0]])
        w = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        labels = np.array([0])
        config = LossConfig("cosface", s, 0.0)
        ctx = ConsensusContext(np.array([[1.0, 0.0, 0.0]]))
        expected = -math.log(math.exp(s) / (math.exp(s) + 1.0 + math.exp(s)))
        assert consensus_loss(f, labels, w, ctx, 1.3, config) == pytest.approx(expected, rel=1e-12)

    def test_adding_cluster_never_decreases(self):
        rng = np.random.default_rng(5)
        f, labels, w, ctx = random_instance(rng, clusters=1)
        config = LossConfig("arcface", 10.0)
        base = consensus_loss(f, labels, w, ctx, 1.0, config)
        extra = ConsensusContext(
            np.concatenate([ctx.centers, sample_uniform_directions(1, 16, rng)])
        )
        assert consensus_loss(f, labels, w, extra, 1.0, config) >= base

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        f, labels, w, ctx = random_instance(rng, clusters=3)
        config = LossConfig("cosface", 16.0)
        base = consensus_loss(f, labels, w, ctx, 1.0, config)
        perm = rng.permutation(w.shape[0])
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        shuffled = consensus_loss(f, inverse[labels], w[perm], ctx, 1.0, config)
        assert shuffled == pytest.approx(base, rel=1e-12)
        cluster_perm = ConsensusContext(ctx.centers[::-1].copy())
        assert consensus_loss(f, labels, w, cluster_perm, 1.0, config) == pytest.approx(
            base, rel=1e-12
        )

    def test_moving_away_from_cluster_decreases_loss(self):
        # rotate the sample directly away from a foreign cluster: loss drops
        config = LossConfig("cosface", 8.0)
        w = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
        cluster = np.array([[1.0, 0.0, 0.0]])
        labels = np.array([0])
        ctx = ConsensusContext(cluster)
        losses = []
        for theta in np.linspace(0.9, 2.2, 12):
            f = np.array([[math.cos(theta), math.sin(theta), 0.0]])
            losses.append(consensus_loss(f, labels, w, ctx, 0.8, config))
        # angle to the cluster grows along the sweep while the class geometry
        # stays symmetric enough for the first steps to strictly improve
        assert losses[1] < losses[0]

    def test_own_clusters_filtered(self):
        from capfed.clustering import SanitizedCluster

        mine = SanitizedCluster(np.array([1.0, 0.0]), 1.0, 5, 1, client="me")
        theirs = SanitizedCluster(np.array([0.0, 1.0]), 1.0, 5, 1, client="other")
        ctx = ConsensusContext.from_clusters([mine, theirs], "me", 2)
        assert ctx.centers.shape == (1, 2)
        np.testing.assert_array_equal(ctx.centers[0], [0.0, 1.0])


class TestGradients:
    def test_single_class_empty_context_zero_gradients(self):
        rng = np.random.default_rng(7)
        f = sample_uniform_directions(3, 8, rng)
        w = sample_uniform_directions(1, 8, rng)
        bundle = loss_gradients(
            f, np.zeros(3, dtype=int), w, ConsensusContext.empty(8), 1.0, LossConfig()
        )
        assert bundle.loss == 0.0
        np.testing.assert_allclose(bundle.d_embeddings, 0.0, atol=1e-15)
        np.testing.assert_allclose(bundle.d_centers, 0.0, atol=1e-15)

    @pytest.mark.parametrize("kind", ["cosface", "arcface"])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(8)
        config = LossConfig(kind, 8.0)
        for _ in range(6):
            f, labels, w, ctx = random_instance(rng)
            bundle = loss_gradients(f, labels, w, ctx, 1.0, config)
            err_f = finite_diff_check(
                lambda p: consensus_loss(p, labels, w, ctx, 1.0, config), f, bundle.d_embeddings
            )
            err_w = finite_diff_check(
                lambda p: consensus_loss(f, labels, p, ctx, 1.0, config), w, bundle.d_centers
            )
            assert err_f < 1e-5
            assert err_w < 1e-5

    def test_gradients_tangent_at_unit_inputs(self):
        # cosines are scale-invariant, so ambient gradients at unit inputs
        # project to zero along the inputs themselves
        rng = np.random.default_rng(9)
        f, labels, w, ctx = random_instance(rng)
        bundle = loss_gradients(f, labels, w, ctx, 1.0, LossConfig("cosface", 16.0))
        np.testing.assert_allclose(np.sum(bundle.d_embeddings * f, axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(np.sum(bundle.d_centers * w, axis=1), 0.0, atol=1e-12)

    def test_gradient_chain_through_scaling(self):
        # doubling a raw row must halve its ambient gradient (cosine is scale-free)
        rng = np.random.default_rng(10)
        f, labels, w, ctx = random_instance(rng)
        config = LossConfig("cosface", 16.0)
        base = loss_gradients(f, labels, w, ctx, 1.0, config)
        scaled = f.copy()
        scaled[0] *= 2.0
        bundle = loss_gradients(scaled, labels, w, ctx, 1.0, config)
        assert bundle.loss == pytest.approx(base.loss, rel=1e-12)
        np.testing.assert_allclose(bundle.d_embeddings[0], base.d_embeddings[0] / 2.0, rtol=1e-10)

    def test_finite_diff_check_quadratic(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        err = finite_diff_check(lambda p: float(np.sum(p * p)), x, 2.0 * x, h=1e-5)
        assert err < 1e-9

    def test_finite_diff_check_validation(self):
        with pytest.raises(DomainError):
            finite_diff_check(lambda p: 0.0, np.zeros(3), np.zeros(3), h=0.0)
        with pytest.raises(ShapeMismatchError):
            finite_diff_check(lambda p: 0.0, np.zeros(3), np.zeros(4))
