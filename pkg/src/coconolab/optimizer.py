"""Adam optimization of per-element Gaussian latent parameters.

The latent is reparameterized as z = mu + sigma * eps against a fixed
per-round base noise, so the Gaussian parameters are the optimization
variables and the KL term stays meaningful. Rounds restart with fresh base
noise when the loss stalls; the best (params, latent, report) triple seen
anywhere is cached and returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from coconolab.attention import AttentionBundle, DegenerateMapError
from coconolab.losses import (
    LossReport,
    LossWeights,
    PipelineConfig,
    evaluate_pipeline,
    frozen_attention_loss,
    kl_gaussian,
    loss_gradients,
    softened_to_self_cotangent,
)

__all__ = [
    "NoiseParams",
    "LatentSample",
    "OptimizerConfig",
    "AdamState",
    "StepRecord",
    "OptimizationResult",
    "AttentionProducer",
    "GradientError",
    "init_params",
    "step",
    "optimize",
    "finite_diff_gradient",
]

SIGMA_FLOOR = 1e-4


class GradientError(RuntimeError):
    """Gradient computation produced non-finite values; the round should restart."""


class AttentionProducer(Protocol):
    """The seam between the optimizer and whatever produces attention maps."""

    def dimension(self) -> int: ...

    def evaluate(self, z: np.ndarray) -> AttentionBundle: ...

    def vjp(self, z: np.ndarray, cross_cotangent: np.ndarray, self_cotangent: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseParams:
    """Per-element Gaussian parameters of the initial latent."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        sigma = np.array(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or mu.shape != sigma.shape:
            raise ValueError(f"mu and sigma must be equal-length vectors, got {mu.shape} and {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("parameters contain non-finite entries")
        if np.any(sigma <= 0.0):
            raise ValueError("sigma must be positive elementwise")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dimension(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class LatentSample:
    """A concrete latent draw: z = mu + sigma * base_noise, recomputable exactly."""

    base_noise: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        base = np.array(self.base_noise, dtype=np.float64)
        z = np.array(self.z, dtype=np.float64)
        base.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "base_noise", base)
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps_per_round: int = 50
    max_rounds: int = 5
    stall_window: int = 10
    stall_min_decrease: float = 1e-3
    success_l_complete: float = 0.2
    success_l_contrast: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_steps_per_round < 1 or self.max_rounds < 1 or self.stall_window < 1:
            raise ValueError("step, round and window counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.success_l_complete <= 1.0:
            raise ValueError("success_l_complete must lie in [0, 1]")
        if self.success_l_contrast < 0.0:
            raise ValueError("success_l_contrast must be nonnegative")


@dataclass
class AdamState:
    """First/second moment accumulators for the (mu, sigma) pair."""

    m_mu: np.ndarray
    v_mu: np.ndarray
    m_sigma: np.ndarray
    v_sigma: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), np.zeros(dim), np.zeros(dim))


@dataclass(frozen=True)
class StepRecord:
    round: int
    step: int
    l_contrast: float
    l_complete: float
    l_kl: float
    total: float


@dataclass(frozen=True)
class OptimizationResult:
    best_params: NoiseParams
    best_latent: LatentSample
    best_report: LossReport
    trace: tuple[StepRecord, ...]
    rounds_used: int
    converged: bool


def init_params(dim: int) -> NoiseParams:
    """Zero-mean, unit-sigma parameters (KL exactly zero)."""
    if dim < 1:
        raise ValueError(f"latent dimension must be >= 1, got {dim}")
    return NoiseParams(mu=np.zeros(dim), sigma=np.ones(dim))


def _adam_update(value, grad, m, v, state_t, cfg: OptimizerConfig):
    m[:] = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad
    v[:] = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad**2
    m_hat = m / (1.0 - cfg.adam_beta1**state_t)
    v_hat = v / (1.0 - cfg.adam_beta2**state_t)
    return value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _total_gradients(producer, params, base_noise, weights, pipeline_cfg, ctx):
    """Gradient of the full loss with respect to (mu, sigma) at the evaluated point."""
    z = params.mu + params.sigma * base_noise
    grads = loss_gradients(None, params, weights, pipeline_cfg, ctx=ctx)
    d_self = softened_to_self_cotangent(ctx, grads.softened)
    g_z = producer.vjp(z, grads.cross, d_self)
    g_mu = g_z + weights.lambda3 * grads.kl_mu
    g_sigma = g_z * base_noise + weights.lambda3 * grads.kl_sigma
    return g_mu, g_sigma


def step(
    producer: AttentionProducer,
    params: NoiseParams,
    base_noise: np.ndarray,
    weights: LossWeights,
    opt_state: AdamState,
    pipeline_cfg: PipelineConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
) -> tuple[NoiseParams, LossReport]:
    """Evaluate the current parameters and apply one Adam descent update.

    The returned report describes the loss at the *evaluated* parameters (the
    input ones); the returned params are the updated pair with sigma clamped
    away from zero. Non-finite gradients raise :class:`GradientError` so the
    caller can abort the round and resample.
    """
    pipeline_cfg = pipeline_cfg if pipeline_cfg is not None else PipelineConfig()
    opt_cfg = opt_cfg if opt_cfg is not None else OptimizerConfig()
    base_noise = np.asarray(base_noise, dtype=np.float64)

    z = params.mu + params.sigma * base_noise
    bundle = producer.evaluate(z)
    report, ctx = evaluate_pipeline(bundle, params, weights, pipeline_cfg)
    g_mu, g_sigma = _total_gradients(producer, params, base_noise, weights, pipeline_cfg, ctx)
    if not (np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_sigma))):
        raise GradientError("non-finite gradient encountered")

    opt_state.t += 1
    new_mu = _adam_update(params.mu, g_mu, opt_state.m_mu, opt_state.v_mu, opt_state.t, opt_cfg)
    new_sigma = _adam_update(
        params.sigma, g_sigma, opt_state.m_sigma, opt_state.v_sigma, opt_state.t, opt_cfg
    )
    new_sigma = np.maximum(new_sigma, SIGMA_FLOOR)
    return NoiseParams(mu=new_mu, sigma=new_sigma), report


def _stalled(round_best: list[float], cfg: OptimizerConfig) -> bool:
    if len(round_best) <= cfg.stall_window:
        return False
    return round_best[-1 - cfg.stall_window] - round_best[-1] < cfg.stall_min_decrease


def optimize(
    producer: AttentionProducer,
    weights: LossWeights,
    cfg: OptimizerConfig | None = None,
    pipeline_cfg: PipelineConfig | None = None,
) -> OptimizationResult:
    """Multi-round optimization with resampling restarts and a best-latent cache.

    Every round draws fresh base noise from the seeded generator, restarts the
    parameters at zero-mean/unit-sigma and resets the Adam moments. A round
    ends early when the success thresholds are met or when the running best
    fails to improve by ``stall_min_decrease`` over ``stall_window`` steps.
    Exhausting all rounds is not an error; the best-effort result is returned
    with ``converged=False``.
    """
    cfg = cfg if cfg is not None else OptimizerConfig()
    pipeline_cfg = pipeline_cfg if pipeline_cfg is not None else PipelineConfig()
    rng = np.random.default_rng(cfg.rng_seed)
    dim = producer.dimension()

    trace: list[StepRecord] = []
    best: tuple[NoiseParams, LatentSample, LossReport] | None = None
    converged = False
    rounds_used = 0

    for round_idx in range(1, cfg.max_rounds + 1):
        rounds_used = round_idx
        base_noise = rng.standard_normal(dim)
        params = init_params(dim)
        adam = AdamState.fresh(dim)
        round_best: list[float] = []

        for step_idx in range(1, cfg.max_steps_per_round + 1):
            evaluated = params
            try:
                params, report = step(
                    producer, params, base_noise, weights, adam, pipeline_cfg, cfg
                )
            except (GradientError, DegenerateMapError):
                break
            trace.append(
                StepRecord(
                    round=round_idx,
                    step=step_idx,
                    l_contrast=report.l_contrast,
                    l_complete=report.l_complete,
                    l_kl=report.l_kl,
                    total=report.total,
                )
            )
            if best is None or report.total < best[2].total:
                z = evaluated.mu + evaluated.sigma * base_noise
                best = (evaluated, LatentSample(base_noise=base_noise, z=z), report)
            if (
                report.l_complete <= cfg.success_l_complete
                and report.l_contrast <= cfg.success_l_contrast
            ):
                converged = True
                break
            round_best.append(min(round_best[-1], report.total) if round_best else report.total)
            if _stalled(round_best, cfg):
                break
        if converged:
            break

    if best is None:
        raise RuntimeError("no step could be evaluated in any round")
    return OptimizationResult(
        best_params=best[0],
        best_latent=best[1],
        best_report=best[2],
        trace=tuple(trace),
        rounds_used=rounds_used,
        converged=converged,
    )


def finite_diff_gradient(
    producer: AttentionProducer,
    params: NoiseParams,
    base_noise: np.ndarray,
    weights: LossWeights,
    h: float = 1e-5,
    pipeline_cfg: PipelineConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of the total loss over (mu, sigma).

    The pipeline's discrete decisions are frozen at the base point (the same
    stop-gradient branch the analytic path differentiates), so this is a valid
    oracle for :func:`step`'s gradients. Sigma entries within ``h`` of zero
    cannot be perturbed and raise.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    if np.any(params.sigma - h <= 0.0):
        raise ValueError("sigma - h would leave the positive domain; reduce h")
    pipeline_cfg = pipeline_cfg if pipeline_cfg is not None else PipelineConfig()
    base_noise = np.asarray(base_noise, dtype=np.float64)

    z0 = params.mu + params.sigma * base_noise
    bundle0 = producer.evaluate(z0)
    _, ctx = evaluate_pipeline(bundle0, params, weights, pipeline_cfg)

    def frozen_total(mu, sigma):
        z = mu + sigma * base_noise
        attention = frozen_attention_loss(ctx, producer.evaluate(z), weights)
        probe = NoiseParams(mu=mu, sigma=sigma)
        return attention + weights.lambda3 * kl_gaussian(probe)

    dim = params.dimension
    g_mu = np.zeros(dim)
    g_sigma = np.zeros(dim)
    for d in range(dim):
        offset = np.zeros(dim)
        offset[d] = h
        g_mu[d] = (
            frozen_total(params.mu + offset, params.sigma)
            - frozen_total(params.mu - offset, params.sigma)
        ) / (2.0 * h)
        g_sigma[d] = (
            frozen_total(params.mu, params.sigma + offset)
            - frozen_total(params.mu, params.sigma - offset)
        ) / (2.0 * h)
    return g_mu, g_sigma
