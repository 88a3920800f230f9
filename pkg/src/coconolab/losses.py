"""Alignment losses over attention maps and their analytic gradients.

The attention-contrast loss penalizes a token's cross-attention leaking into
segments owned by other tokens; the attention-complete loss penalizes the
worst-covered segment (saturating at 1 when a token has no segment at all);
the KL term keeps the latent's Gaussian parameters near the standard normal.

Per evaluation, the discrete pipeline decisions (segment masks, threshold,
principal direction, normalization constants, assignment, worst-row choice)
are frozen and gradients flow only through the attention values. That makes
the objective piecewise smooth: the analytic gradients returned here are exact
for the frozen branch and match finite differences of
:func:`frozen_attention_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from coconolab.assignment import AssignmentMatrix, CostMatrix, cost_matrix, optimal_assignment
from coconolab.attention import (
    AttentionBundle,
    CrossAttentionStack,
    SegmentSet,
    SmoothingConfig,
    extract_segments,
    otsu_threshold,
    principal_projection,
    smooth_map,
    smooth_map_adjoint,
)

if TYPE_CHECKING:
    from coconolab.optimizer import NoiseParams

__all__ = [
    "LossWeights",
    "PipelineConfig",
    "LossReport",
    "EvalContext",
    "LossGradients",
    "attention_contrast",
    "attention_complete",
    "kl_gaussian",
    "kl_gradients",
    "total_loss",
    "evaluate_pipeline",
    "loss_gradients",
    "softened_to_self_cotangent",
    "frozen_attention_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the contrast, complete and KL terms."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 500.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the map-processing pipeline feeding the losses."""

    alpha: float = 16.0
    beta: float = 0.5
    smoothing: SmoothingConfig | None = field(default_factory=SmoothingConfig)
    pca_tol: float = 1e-9
    pca_max_iter: int = 1000


@dataclass(frozen=True)
class LossReport:
    """All loss terms of one evaluation plus the per-pair interference table."""

    l_contrast: float
    l_complete: float
    l_kl: float
    total: float
    pca_sign_chosen: str
    interference_table: np.ndarray

    def __post_init__(self):
        table = np.array(self.interference_table, dtype=np.float64)
        table.setflags(write=False)
        object.__setattr__(self, "interference_table", table)


@dataclass(frozen=True)
class EvalContext:
    """Frozen per-evaluation state: every discrete decision plus the maps it was made on.

    ``smoothed`` holds the cross maps actually used in the cost matrix and
    ``smooth_scales`` the per-map renormalization divisors applied after
    blurring. ``direction``/``score_lo``/``score_hi`` pin the principal
    projection and its min-max normalization, ``inverted`` the chosen sign.
    """

    cfg: PipelineConfig
    smoothed: np.ndarray
    smooth_scales: np.ndarray
    direction: np.ndarray
    score_lo: float
    score_hi: float
    inverted: bool
    softened: np.ndarray
    threshold: float
    segments: SegmentSet
    cost: CostMatrix
    assignment: AssignmentMatrix
    ratios: np.ndarray
    argmin_token: int

    @property
    def n(self) -> int:
        return self.assignment.n

    @property
    def resolution(self) -> int:
        return self.softened.shape[0]


@dataclass(frozen=True)
class LossGradients:
    """Cotangents of one evaluation, holding the frozen decisions fixed.

    ``cross`` and ``softened`` are gradients of the weighted attention part
    (lambda1 * contrast + lambda2 * complete) with respect to the bundle's
    cross maps and the softened self map; ``kl_mu``/``kl_sigma`` are the exact
    unweighted KL gradients.
    """

    cross: np.ndarray
    softened: np.ndarray
    kl_mu: np.ndarray
    kl_sigma: np.ndarray


def _diagonal_ratios(assign: AssignmentMatrix, cost: CostMatrix, segments: SegmentSet) -> np.ndarray:
    """Per-token coverage: own-map intersection over segment mass, 0 for empty segments."""
    ratios = np.zeros(assign.n)
    for token, segment in enumerate(assign.perm):
        mass = segments.masses[segment]
        if mass > 0.0:
            ratios[token] = cost.values[segment, token] / mass
    return ratios


def attention_contrast(assign: AssignmentMatrix, cost: CostMatrix, segments: SegmentSet) -> float:
    """Sum of mass-normalized off-diagonal intersections under the assignment.

    Zero exactly when no token's cross-attention touches another token's
    segment; terms over zero-mass segments contribute 0.
    """
    total = 0.0
    for token, segment in enumerate(assign.perm):
        mass = segments.masses[segment]
        if mass <= 0.0:
            continue
        row = cost.values[segment]
        total += (row.sum() - row[token]) / mass
    return float(total)


def attention_complete(assign: AssignmentMatrix, cost: CostMatrix, segments: SegmentSet) -> float:
    """One minus the worst mass-normalized diagonal coverage.

    A zero-mass (missing) segment forces a coverage of 0 and therefore a loss
    of exactly 1.
    """
    return float(1.0 - _diagonal_ratios(assign, cost, segments).min())


def kl_gaussian(params: "NoiseParams") -> float:
    """Mean elementwise KL divergence from N(mu, sigma^2) to the standard normal."""
    mu = np.asarray(params.mu, dtype=np.float64)
    sigma = np.asarray(params.sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive elementwise")
    return float(np.mean(0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma))))


def kl_gradients(params: "NoiseParams") -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of :func:`kl_gaussian` with respect to mu and sigma."""
    mu = np.asarray(params.mu, dtype=np.float64)
    sigma = np.asarray(params.sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive elementwise")
    d = mu.size
    return mu / d, (sigma - 1.0 / sigma) / d


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _smooth_stack(cross: np.ndarray, cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Blur and per-map max-renormalize the cross stack; returns (maps, scales)."""
    n = cross.shape[2]
    scales = np.ones(n)
    if cfg.smoothing is None:
        return np.array(cross), scales
    smoothed = np.empty_like(np.asarray(cross))
    for j in range(n):
        blurred = smooth_map(cross[:, :, j], cfg.smoothing)
        peak = blurred.max()
        scales[j] = peak if peak > 0.0 else 1.0
        smoothed[:, :, j] = blurred / scales[j]
    return smoothed, scales


def evaluate_pipeline(
    bundle: AttentionBundle,
    params: "NoiseParams | None",
    weights: LossWeights,
    cfg: PipelineConfig | None = None,
) -> tuple[LossReport, EvalContext]:
    """Full forward pass: saliency (both signs), segmentation, assignment, losses.

    The principal map and its inversion are both pushed through the pipeline
    and the sign with the smaller weighted attention loss wins; KL is added
    once. ``params=None`` evaluates attention-only (KL reported as 0), which
    is the file-backed mode where no Gaussian parameters exist.
    """
    cfg = cfg if cfg is not None else PipelineConfig()
    n = bundle.n_tokens
    r = bundle.resolution

    cross = np.asarray(bundle.cross.values)
    smoothed, scales = _smooth_stack(cross, cfg)
    smoothed_stack = CrossAttentionStack(values=smoothed, token_labels=bundle.cross.token_labels)

    direction, scores, lo, hi = principal_projection(
        bundle.self_attn.values, tol=cfg.pca_tol, max_iter=cfg.pca_max_iter
    )
    base = (scores - lo) / (hi - lo)

    best = None
    for inverted in (False, True):
        projected = 1.0 - base if inverted else base
        softened = _sigmoid(cfg.alpha * (projected - cfg.beta)).reshape(r, r)
        threshold = otsu_threshold(softened)
        segments = extract_segments(softened, threshold, n)
        cost = cost_matrix(segments, smoothed_stack)
        assign = optimal_assignment(cost)
        l_contrast = attention_contrast(assign, cost, segments)
        l_complete = attention_complete(assign, cost, segments)
        score = weights.lambda1 * l_contrast + weights.lambda2 * l_complete
        if best is None or score < best[0]:
            best = (score, inverted, softened, threshold, segments, cost, assign, l_contrast, l_complete)
    _, inverted, softened, threshold, segments, cost, assign, l_contrast, l_complete = best

    l_kl = kl_gaussian(params) if params is not None else 0.0
    total = weights.lambda1 * l_contrast + weights.lambda2 * l_complete + weights.lambda3 * l_kl

    ratios = _diagonal_ratios(assign, cost, segments)
    interference = np.zeros((n, n))
    for token, segment in enumerate(assign.perm):
        mass = segments.masses[segment]
        if mass <= 0.0:
            continue
        for j in range(n):
            if j != token:
                interference[token, j] = cost.values[segment, j] / mass

    report = LossReport(
        l_contrast=l_contrast,
        l_complete=l_complete,
        l_kl=l_kl,
        total=total,
        pca_sign_chosen="principal-inverted" if inverted else "principal",
        interference_table=interference,
    )
    ctx = EvalContext(
        cfg=cfg,
        smoothed=smoothed,
        smooth_scales=scales,
        direction=direction,
        score_lo=lo,
        score_hi=hi,
        inverted=inverted,
        softened=softened,
        threshold=threshold,
        segments=segments,
        cost=cost,
        assignment=assign,
        ratios=ratios,
        argmin_token=int(np.argmin(ratios)),
    )
    return report, ctx


def total_loss(
    bundle: AttentionBundle,
    params: "NoiseParams | None",
    weights: LossWeights,
    cfg: PipelineConfig | None = None,
) -> LossReport:
    """Weighted total of the three losses; see :func:`evaluate_pipeline`."""
    report, _ = evaluate_pipeline(bundle, params, weights, cfg)
    return report


def loss_gradients(
    bundle: AttentionBundle,
    params: "NoiseParams | None",
    weights: LossWeights,
    cfg: PipelineConfig | None = None,
    ctx: EvalContext | None = None,
) -> LossGradients:
    """Analytic cotangents of the evaluation, with discrete decisions held fixed.

    Gradients flow through attention values only: segment masks, the Otsu
    threshold, the principal direction (and its normalization constants), the
    assignment and the worst-coverage row are treated as constants of the
    evaluation. Pass the context returned by :func:`evaluate_pipeline` to
    reuse it; otherwise the pipeline is re-run here.
    """
    cfg = cfg if cfg is not None else PipelineConfig()
    if ctx is None:
        _, ctx = evaluate_pipeline(bundle, params, weights, cfg)
    n = ctx.n
    r = ctx.resolution
    C = ctx.cost.values
    masses = ctx.segments.masses
    V = ctx.segments.values
    X = ctx.smoothed
    w1, w2 = weights.lambda1, weights.lambda2

    d_smoothed = np.zeros((r, r, n))
    d_values = np.zeros((n, r, r))
    for token, segment in enumerate(ctx.assignment.perm):
        mass = masses[segment]
        if mass <= 0.0:
            continue
        for j in range(n):
            if j == token:
                continue
            d_smoothed[:, :, j] += w1 * V[segment] / mass
            d_values[segment] += w1 * (X[:, :, j] * mass - C[segment, j]) / mass**2

    star = ctx.argmin_token
    seg_star = ctx.assignment.perm[star]
    mass_star = masses[seg_star]
    if mass_star > 0.0:
        d_smoothed[:, :, star] -= w2 * V[seg_star] / mass_star
        d_values[seg_star] -= w2 * (X[:, :, star] * mass_star - C[seg_star, star]) / mass_star**2

    d_softened = (d_values * ctx.segments.masks).sum(axis=0)

    if cfg.smoothing is not None:
        d_cross = np.empty((r, r, n))
        for j in range(n):
            d_cross[:, :, j] = smooth_map_adjoint(
                d_smoothed[:, :, j] / ctx.smooth_scales[j], cfg.smoothing
            )
    else:
        d_cross = d_smoothed

    if params is not None:
        kl_mu, kl_sigma = kl_gradients(params)
    else:
        kl_mu = kl_sigma = np.zeros(0)
    return LossGradients(cross=d_cross, softened=d_softened, kl_mu=kl_mu, kl_sigma=kl_sigma)


def softened_to_self_cotangent(ctx: EvalContext, d_softened: np.ndarray) -> np.ndarray:
    """Pull a softened-map cotangent back to the raw self-attention tensor.

    Chains through the sigmoid, the frozen min-max normalization and the
    frozen principal projection; column mean-centering makes the result
    ``outer(g - mean(g), direction)``.
    """
    A = ctx.softened
    span = ctx.score_hi - ctx.score_lo
    sign = -1.0 if ctx.inverted else 1.0
    g = sign * (np.asarray(d_softened) * ctx.cfg.alpha * A * (1.0 - A)).ravel() / span
    return np.outer(g - g.mean(), ctx.direction)


def frozen_attention_loss(
    ctx: EvalContext, bundle: AttentionBundle, weights: LossWeights
) -> float:
    """Weighted attention loss of a bundle under the context's frozen decisions.

    This is the smooth branch that :func:`loss_gradients` differentiates:
    masks, threshold, direction, normalization constants, assignment and the
    worst row come from ``ctx`` while all attention values come from
    ``bundle``. Finite differences of this function validate the analytic
    gradients.
    """
    cfg = ctx.cfg
    n = ctx.n
    r = ctx.resolution
    cross = np.asarray(bundle.cross.values)
    if cfg.smoothing is not None:
        X = np.empty_like(cross)
        for j in range(n):
            X[:, :, j] = smooth_map(cross[:, :, j], cfg.smoothing) / ctx.smooth_scales[j]
    else:
        X = cross

    S = np.asarray(bundle.self_attn.values)
    scores = (S - S.mean(axis=0)) @ ctx.direction
    base = (scores - ctx.score_lo) / (ctx.score_hi - ctx.score_lo)
    projected = 1.0 - base if ctx.inverted else base
    A = _sigmoid(cfg.alpha * (projected - cfg.beta)).reshape(r, r)

    V = A[None, :, :] * ctx.segments.masks
    masses = V.sum(axis=(1, 2))
    C = np.einsum("ikl,klj->ij", V, X)

    l_contrast = 0.0
    for token, segment in enumerate(ctx.assignment.perm):
        if masses[segment] > 0.0:
            row = C[segment]
            l_contrast += (row.sum() - row[token]) / masses[segment]

    star = ctx.argmin_token
    seg_star = ctx.assignment.perm[star]
    ratio = C[seg_star, star] / masses[seg_star] if masses[seg_star] > 0.0 else 0.0
    l_complete = 1.0 - ratio
    return float(weights.lambda1 * l_contrast + weights.lambda2 * l_complete)
