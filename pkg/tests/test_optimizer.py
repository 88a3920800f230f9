import numpy as np
import pytest

from coconolab.losses import LossWeights, PipelineConfig, evaluate_pipeline, kl_gradients
from coconolab.optimizer import (
    AdamState,
    NoiseParams,
    OptimizerConfig,
    SIGMA_FLOOR,
    finite_diff_gradient,
    init_params,
    optimize,
    step,
    _total_gradients,
)
from coconolab.synthetic import make_producer, scenario


class ConstantProducer:
    """Producer that ignores the latent; gradients are exactly zero."""

    def __init__(self, bundle, dim=4):
        self._bundle = bundle
        self._dim = dim

    def dimension(self):
        return self._dim

    def evaluate(self, z):
        return self._bundle

    def vjp(self, z, cross_cotangent, self_cotangent):
        return np.zeros(self._dim)


def _healthy_bundle():
    return make_producer(scenario("aligned", 2, 8, 4)).evaluate(np.zeros(4))


def _sick_bundle():
    return make_producer(scenario("neglect", 2, 8, 4)).evaluate(np.zeros(4))


class TestInitParams:
    def test_exact_values(self):
        params = init_params(4)
        assert np.array_equal(params.mu, np.zeros(4))
        assert np.array_equal(params.sigma, np.ones(4))

    def test_kl_zero(self):
        from coconolab.losses import kl_gaussian

        for dim in (1, 3, 17):
            assert kl_gaussian(init_params(dim)) == 0.0

    def test_deterministic(self):
        a, b = init_params(5), init_params(5)
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)

    def test_invalid_dimension(self):
        with pytest.raises(ValueError):
            init_params(0)


class TestStep:
    def test_kl_only_descends_mu(self, rng):
        producer = ConstantProducer(_healthy_bundle())
        weights = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=1.0)
        params = NoiseParams(mu=np.ones(4), sigma=np.ones(4))
        new_params, report = step(
            producer, params, rng.standard_normal(4), weights, AdamState.fresh(4)
        )
        assert np.all(new_params.mu < params.mu)
        assert np.all(new_params.mu > 0.0)
        assert report.l_kl == pytest.approx(0.5)

    def test_zero_gradient_fixed_point(self, rng):
        producer = ConstantProducer(_healthy_bundle())
        weights = LossWeights(lambda1=1.0, lambda2=1.0, lambda3=500.0)
        params = init_params(4)  # KL gradient vanishes at (0, 1)
        state = AdamState.fresh(4)
        new_params, _ = step(producer, params, rng.standard_normal(4), weights, state)
        assert np.array_equal(new_params.mu, params.mu)
        assert np.array_equal(new_params.sigma, params.sigma)
        assert state.t == 1

    def test_sigma_clamped(self):
        producer = ConstantProducer(_healthy_bundle())
        weights = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=1.0)
        params = NoiseParams(mu=np.zeros(2), sigma=np.full(2, SIGMA_FLOOR * 1.5), )
        base = np.zeros(2)
        state = AdamState.fresh(2)
        for _ in range(5):
            params, _ = step(ConstantProducer(_healthy_bundle(), dim=2), params, base, weights, state)
        assert np.all(params.sigma >= SIGMA_FLOOR)

    def test_full_chain_matches_finite_differences(self, rng):
        weights = LossWeights()
        cfg = PipelineConfig()
        for kind in ("neglect", "interference", "aligned"):
            producer = make_producer(scenario(kind, 2, 8, 4))
            params = NoiseParams(
                mu=0.3 * rng.standard_normal(4), sigma=1.0 + 0.2 * rng.random(4)
            )
            eps = rng.standard_normal(4)
            z = params.mu + params.sigma * eps
            _, ctx = evaluate_pipeline(producer.evaluate(z), params, weights, cfg)
            g_mu, g_sigma = _total_gradients(producer, params, eps, weights, cfg, ctx)
            fd_mu, fd_sigma = finite_diff_gradient(producer, params, eps, weights, h=1e-5)
            analytic = np.concatenate([g_mu, g_sigma])
            numeric = np.concatenate([fd_mu, fd_sigma])
            scale = max(float(np.abs(numeric).max()), 1e-10)
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3 * scale)
            assert rel.max() < 1e-4


class TestOptimize:
    def test_immediate_success(self):
        producer = ConstantProducer(_healthy_bundle())
        result = optimize(producer, LossWeights(), OptimizerConfig(rng_seed=0))
        assert result.converged
        assert result.rounds_used == 1
        assert len(result.trace) == 1

    def test_constant_sick_producer_exhausts_rounds(self):
        producer = ConstantProducer(_sick_bundle())
        cfg = OptimizerConfig(rng_seed=0)
        result = optimize(producer, LossWeights(), cfg)
        assert not result.converged
        assert result.rounds_used == cfg.max_rounds
        # stall ends each round one step past the window
        assert len(result.trace) == cfg.max_rounds * (cfg.stall_window + 1)
        assert result.best_report.l_complete == 1.0

    def test_neglect_repair(self):
        producer = make_producer(scenario("neglect", 2, 8, 4))
        result = optimize(producer, LossWeights(), OptimizerConfig(rng_seed=0))
        assert result.converged
        assert result.best_report.l_complete <= 0.2
        assert result.rounds_used <= 5

    def test_best_cache_monotone_and_minimal(self):
        producer = make_producer(scenario("interference", 2, 8, 4))
        result = optimize(producer, LossWeights(), OptimizerConfig(rng_seed=3))
        totals = [rec.total for rec in result.trace]
        running = np.minimum.accumulate(totals)
        assert np.all(np.diff(running) <= 0.0)
        assert result.best_report.total == min(totals)

    def test_determinism(self):
        producer = make_producer(scenario("interference", 2, 8, 4))
        cfg = OptimizerConfig(rng_seed=11)
        a = optimize(producer, LossWeights(), cfg)
        b = optimize(producer, LossWeights(), cfg)
        assert a.trace == b.trace
        assert np.array_equal(a.best_params.mu, b.best_params.mu)
        assert np.array_equal(a.best_latent.z, b.best_latent.z)

    def test_reparameterization_identity(self):
        producer = make_producer(scenario("neglect", 2, 8, 4))
        result = optimize(producer, LossWeights(), OptimizerConfig(rng_seed=0))
        recomputed = result.best_params.mu + result.best_params.sigma * result.best_latent.base_noise
        assert np.array_equal(result.best_latent.z, recomputed)

    def test_sigma_stays_positive(self):
        producer = make_producer(scenario("interference", 2, 8, 4))
        result = optimize(producer, LossWeights(), OptimizerConfig(rng_seed=5))
        assert np.all(result.best_params.sigma >= SIGMA_FLOOR)


class TestFiniteDiff:
    def test_kl_closed_form(self, rng):
        producer = ConstantProducer(_healthy_bundle())
        weights = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=1.0)
        params = NoiseParams(mu=rng.standard_normal(4), sigma=1.0 + rng.random(4))
        fd_mu, fd_sigma = finite_diff_gradient(
            producer, params, rng.standard_normal(4), weights, h=1e-5
        )
        d_mu, d_sigma = kl_gradients(params)
        assert np.allclose(fd_mu, d_mu, rtol=1e-6, atol=1e-9)
        assert np.allclose(fd_sigma, d_sigma, rtol=1e-6, atol=1e-9)

    def test_h_validation(self, rng):
        producer = ConstantProducer(_healthy_bundle())
        params = init_params(4)
        with pytest.raises(ValueError):
            finite_diff_gradient(producer, params, np.zeros(4), LossWeights(), h=0.0)
        tight = NoiseParams(mu=np.zeros(4), sigma=np.full(4, 1e-6))
        with pytest.raises(ValueError):
            finite_diff_gradient(producer, tight, np.zeros(4), LossWeights(), h=1e-5)

    def test_h_sweep_stays_within_tolerance(self, rng):
        weights = LossWeights()
        producer = make_producer(scenario("interference", 2, 8, 4))
        params = NoiseParams(mu=0.2 * rng.standard_normal(4), sigma=1.0 + 0.1 * rng.random(4))
        eps = rng.standard_normal(4)
        z = params.mu + params.sigma * eps
        _, ctx = evaluate_pipeline(producer.evaluate(z), params, weights)
        g_mu, g_sigma = _total_gradients(producer, params, eps, weights, PipelineConfig(), ctx)
        analytic = np.concatenate([g_mu, g_sigma])
        scale = max(float(np.abs(analytic).max()), 1e-10)
        for h in (1e-4, 1e-5, 1e-6):
            fd_mu, fd_sigma = finite_diff_gradient(producer, params, eps, weights, h=h)
            numeric = np.concatenate([fd_mu, fd_sigma])
            rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3 * scale)
            assert rel.max() < 1e-4
