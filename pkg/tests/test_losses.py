import numpy as np
import pytest

import coconolab.losses as losses_mod
from coconolab.assignment import AssignmentMatrix, CostMatrix
from coconolab.attention import (
    AttentionBundle,
    CrossAttentionStack,
    SegmentSet,
    SelfAttentionTensor,
    SmoothingConfig,
)
from coconolab.losses import (
    LossWeights,
    PipelineConfig,
    attention_complete,
    attention_contrast,
    evaluate_pipeline,
    frozen_attention_loss,
    kl_gaussian,
    kl_gradients,
    loss_gradients,
    softened_to_self_cotangent,
    total_loss,
)
from coconolab.optimizer import NoiseParams
from coconolab.synthetic import make_producer, scenario

from conftest import random_bundle


def _segments_with_masses(mass_values, r=4):
    """Disjoint one-row segments whose masses equal the requested values."""
    n = len(mass_values)
    masks = np.zeros((n, r, r))
    values = np.zeros((n, r, r))
    for i, mass in enumerate(mass_values):
        if mass == 0.0:
            continue
        masks[i, i, :] = 1.0
        values[i, i, :] = mass / r
    return SegmentSet(masks=masks, values=values, masses=values.sum(axis=(1, 2)))


class TestContrast:
    def test_disjoint_supports_zero(self):
        segments = _segments_with_masses([2.0, 3.0])
        cost = CostMatrix(values=np.diag([2.0, 3.0]))
        assign = AssignmentMatrix(perm=(0, 1))
        assert attention_contrast(assign, cost, segments) == 0.0

    def test_hand_example(self):
        # identity assignment, C = [[4,1],[0.5,2]], masses = [4,2] -> 1/4 + 0.5/2
        segments = _segments_with_masses([4.0, 2.0])
        cost = CostMatrix(values=np.array([[4.0, 1.0], [0.5, 2.0]]))
        assign = AssignmentMatrix(perm=(0, 1))
        expected = 0.0  # independent scalar evaluation
        perm = (0, 1)
        for token in range(2):
            seg = perm[token]
            for j in range(2):
                if j != token:
                    expected += cost.values[seg, j] / segments.masses[seg]
        got = attention_contrast(assign, cost, segments)
        assert got == pytest.approx(expected)
        assert got == pytest.approx(0.5)

    def test_all_padded_zero(self):
        segments = _segments_with_masses([0.0, 0.0])
        cost = CostMatrix(values=np.zeros((2, 2)))
        assign = AssignmentMatrix(perm=(0, 1))
        assert attention_contrast(assign, cost, segments) == 0.0


class TestComplete:
    def test_padded_segment_saturates(self):
        segments = _segments_with_masses([3.0, 0.0])
        cost = CostMatrix(values=np.array([[3.0, 0.0], [0.0, 0.0]]))
        assign = AssignmentMatrix(perm=(0, 1))
        assert attention_complete(assign, cost, segments) == 1.0

    def test_saturated_coverage(self):
        segments = _segments_with_masses([2.0, 5.0])
        cost = CostMatrix(values=np.diag([2.0, 5.0]))
        assign = AssignmentMatrix(perm=(0, 1))
        assert attention_complete(assign, cost, segments) == pytest.approx(0.0)

    def test_min_ratio(self):
        segments = _segments_with_masses([1.0, 1.0])
        cost = CostMatrix(values=np.diag([0.9, 0.6]))
        assign = AssignmentMatrix(perm=(0, 1))
        assert attention_complete(assign, cost, segments) == pytest.approx(0.4)


class TestKL:
    def mc_estimate(self, mu, sigma, seed, n=10**6):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(n)
        x = mu + sigma * u
        return float(np.mean(-np.log(sigma) - 0.5 * u**2 + 0.5 * x**2))

    def test_standard_normal_is_zero(self):
        assert kl_gaussian(NoiseParams(mu=np.zeros(5), sigma=np.ones(5))) == 0.0

    def test_unit_shift(self):
        params = NoiseParams(mu=np.array([1.0]), sigma=np.array([1.0]))
        assert kl_gaussian(params) == pytest.approx(0.5)
        assert abs(kl_gaussian(params) - self.mc_estimate(1.0, 1.0, seed=1)) < 1e-2

    def test_double_sigma(self):
        params = NoiseParams(mu=np.array([0.0]), sigma=np.array([2.0]))
        expected = 0.5 * (4.0 - 1.0 - 2.0 * np.log(2.0))
        assert kl_gaussian(params) == pytest.approx(expected)
        assert expected == pytest.approx(0.8069, abs=1e-4)
        assert abs(kl_gaussian(params) - self.mc_estimate(0.0, 2.0, seed=2)) < 1e-2

    def test_nonpositive_sigma_rejected(self):
        class Fake:
            mu = np.array([0.0])
            sigma = np.array([0.0])

        with pytest.raises(ValueError):
            kl_gaussian(Fake())

    def test_gradients_closed_form(self, rng):
        mu = rng.standard_normal(6)
        sigma = 0.5 + rng.random(6)
        d_mu, d_sigma = kl_gradients(NoiseParams(mu=mu, sigma=sigma))
        assert np.allclose(d_mu, mu / 6)
        assert np.allclose(d_sigma, (sigma - 1.0 / sigma) / 6)


class TestTotalLoss:
    def test_aligned_scenario_near_zero(self):
        producer = make_producer(scenario("aligned", 2, 8, 4))
        report = total_loss(producer.evaluate(np.zeros(4)), None, LossWeights())
        assert report.l_contrast < 1e-2
        assert report.l_complete < 0.1

    def test_neglect_scenario_saturates(self):
        producer = make_producer(scenario("neglect", 2, 8, 4))
        report = total_loss(producer.evaluate(np.zeros(4)), None, LossWeights())
        assert report.l_complete == 1.0

    def test_zero_attention_weights(self, rng):
        bundle = random_bundle(rng)
        params = NoiseParams(mu=rng.standard_normal(4), sigma=1.0 + rng.random(4))
        weights = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=500.0)
        report = total_loss(bundle, params, weights)
        assert report.total == 500.0 * report.l_kl

    def test_total_identity_and_interference_table(self, rng):
        weights = LossWeights(lambda1=1.3, lambda2=0.7, lambda3=250.0)
        for _ in range(10):
            bundle = random_bundle(rng, r=8, n=3)
            params = NoiseParams(mu=rng.standard_normal(4), sigma=1.0 + rng.random(4))
            report, ctx = evaluate_pipeline(bundle, params, weights)
            expected = (
                weights.lambda1 * report.l_contrast
                + weights.lambda2 * report.l_complete
                + weights.lambda3 * report.l_kl
            )
            assert abs(report.total - expected) < 1e-12
            table = report.interference_table
            assert np.all(np.diag(table) == 0.0)
            assert report.l_contrast == pytest.approx(table.sum(), abs=1e-12)

    def test_params_none_reports_zero_kl(self, rng):
        report = total_loss(random_bundle(rng), None, LossWeights())
        assert report.l_kl == 0.0


class TestGradients:
    def test_contrast_cross_cotangent_formula(self, rng):
        # with smoothing off and weights (1, 0): d/d cross_j = sum over foreign
        # segments of values/mass
        cfg = PipelineConfig(smoothing=None)
        weights = LossWeights(lambda1=1.0, lambda2=0.0, lambda3=0.0)
        bundle = random_bundle(rng, r=8, n=3)
        _, ctx = evaluate_pipeline(bundle, None, weights, cfg)
        grads = loss_gradients(bundle, None, weights, cfg, ctx=ctx)
        perm = ctx.assignment.perm
        for j in range(3):
            expected = np.zeros((8, 8))
            for token, segment in enumerate(perm):
                if token == j or ctx.segments.masses[segment] <= 0:
                    continue
                expected += ctx.segments.values[segment] / ctx.segments.masses[segment]
            assert np.allclose(grads.cross[:, :, j], expected, atol=1e-12)

    def test_cross_cotangent_matches_fd_through_smoothing(self, rng):
        weights = LossWeights()
        cfg = PipelineConfig(smoothing=SmoothingConfig(3, 0.5))
        cross = 0.1 + 0.8 * rng.random((8, 8, 2))
        factors = np.abs(rng.standard_normal((64, 5)))
        bundle = AttentionBundle(
            cross=CrossAttentionStack(values=cross, token_labels=("a", "b")),
            self_attn=SelfAttentionTensor(values=factors @ factors.T),
        )
        _, ctx = evaluate_pipeline(bundle, None, weights, cfg)
        grads = loss_gradients(bundle, None, weights, cfg, ctx=ctx)
        h = 1e-6
        for _ in range(12):
            k, l, j = rng.integers(8), rng.integers(8), rng.integers(2)
            up, down = cross.copy(), cross.copy()
            up[k, l, j] += h
            down[k, l, j] -= h
            labels = ("a", "b")
            f_up = frozen_attention_loss(
                ctx,
                AttentionBundle(
                    cross=CrossAttentionStack(values=up, token_labels=labels),
                    self_attn=bundle.self_attn,
                ),
                weights,
            )
            f_down = frozen_attention_loss(
                ctx,
                AttentionBundle(
                    cross=CrossAttentionStack(values=down, token_labels=labels),
                    self_attn=bundle.self_attn,
                ),
                weights,
            )
            fd = (f_up - f_down) / (2 * h)
            assert grads.cross[k, l, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_self_cotangent_matches_fd(self, rng):
        weights = LossWeights()
        bundle = random_bundle(rng, r=8, n=2)
        _, ctx = evaluate_pipeline(bundle, None, weights)
        grads = loss_gradients(bundle, None, weights, ctx=ctx)
        d_self = softened_to_self_cotangent(ctx, grads.softened)
        S = np.asarray(bundle.self_attn.values)
        h = 1e-6
        for _ in range(12):
            a, b = rng.integers(64), rng.integers(64)
            if S[a, b] < h:
                continue
            up, down = S.copy(), S.copy()
            up[a, b] += h
            down[a, b] -= h
            f_up = frozen_attention_loss(
                ctx,
                AttentionBundle(cross=bundle.cross, self_attn=SelfAttentionTensor(values=up)),
                weights,
            )
            f_down = frozen_attention_loss(
                ctx,
                AttentionBundle(cross=bundle.cross, self_attn=SelfAttentionTensor(values=down)),
                weights,
            )
            fd = (f_up - f_down) / (2 * h)
            assert d_self[a, b] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestInvariants:
    def test_bounds(self, rng):
        weights = LossWeights()
        for _ in range(30):
            report = total_loss(random_bundle(rng, n=int(rng.integers(2, 5))), None, weights)
            assert 0.0 <= report.l_complete <= 1.0
            assert report.l_contrast >= 0.0

    def test_kl_zero_iff_standard(self, rng):
        assert kl_gaussian(NoiseParams(mu=np.zeros(3), sigma=np.ones(3))) == 0.0
        perturbed = NoiseParams(mu=np.array([0.0, 0.01, 0.0]), sigma=np.ones(3))
        assert kl_gaussian(perturbed) > 0.0
        widened = NoiseParams(mu=np.zeros(3), sigma=np.array([1.0, 1.0, 1.1]))
        assert kl_gaussian(widened) > 0.0

    def test_subject_permutation_invariance(self, rng):
        weights = LossWeights()
        for _ in range(10):
            bundle = random_bundle(rng, r=8, n=3)
            base = total_loss(bundle, None, weights)
            order = rng.permutation(3)
            permuted = AttentionBundle(
                cross=CrossAttentionStack(
                    values=np.asarray(bundle.cross.values)[:, :, order],
                    token_labels=tuple(bundle.cross.token_labels[i] for i in order),
                ),
                self_attn=bundle.self_attn,
            )
            other = total_loss(permuted, None, weights)
            assert other.l_contrast == pytest.approx(base.l_contrast, abs=1e-12)
            assert other.l_complete == pytest.approx(base.l_complete, abs=1e-12)
            assert other.total == pytest.approx(base.total, abs=1e-12)

    def test_pca_sign_invariance(self, rng, monkeypatch):
        weights = LossWeights()
        bundle = random_bundle(rng, r=8, n=2)
        base = total_loss(bundle, None, weights)

        true_projection = losses_mod.principal_projection

        def negated(values, tol=1e-9, max_iter=1000):
            v, scores, lo, hi = true_projection(values, tol=tol, max_iter=max_iter)
            return -v, -scores, -hi, -lo

        monkeypatch.setattr(losses_mod, "principal_projection", negated)
        flipped = total_loss(bundle, None, weights)
        assert flipped.total == pytest.approx(base.total, abs=1e-12)
        assert flipped.l_contrast == pytest.approx(base.l_contrast, abs=1e-12)
        assert flipped.l_complete == pytest.approx(base.l_complete, abs=1e-12)

    def test_midpoint_convexity_within_assignment(self, rng):
        weights_contrast = LossWeights(lambda1=1.0, lambda2=0.0, lambda3=0.0)
        weights_complete = LossWeights(lambda1=0.0, lambda2=1.0, lambda3=0.0)
        for _ in range(20):
            bundle_x = random_bundle(rng, r=8, n=2)
            cross_y = rng.random((8, 8, 2))
            _, ctx = evaluate_pipeline(bundle_x, None, LossWeights())
            t = float(rng.random())

            def frozen(cross_values, weights):
                b = AttentionBundle(
                    cross=CrossAttentionStack(
                        values=cross_values, token_labels=bundle_x.cross.token_labels
                    ),
                    self_attn=bundle_x.self_attn,
                )
                return frozen_attention_loss(ctx, b, weights)

            x = np.asarray(bundle_x.cross.values)
            mix = t * x + (1.0 - t) * cross_y
            for weights in (weights_contrast, weights_complete):
                lhs = frozen(mix, weights)
                rhs = t * frozen(x, weights) + (1.0 - t) * frozen(cross_y, weights)
                assert lhs <= rhs + 1e-10
