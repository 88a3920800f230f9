"""Attention-map processing: aggregation, smoothing, saliency extraction, segmentation.

Turns raw cross-/self-attention tensors into the aggregated, softened and
segmented maps that the alignment losses consume. Everything here is a pure
function; returned arrays are marked read-only so values can be shared freely
across threads.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateMapError",
    "CrossAttentionStack",
    "SelfAttentionTensor",
    "SaliencyMap",
    "SegmentSet",
    "SmoothingConfig",
    "AttentionBundle",
    "aggregate_cross_attention",
    "smooth_cross_attention",
    "gaussian_kernel1d",
    "smooth_map",
    "smooth_map_adjoint",
    "principal_projection",
    "principal_self_map",
    "soften",
    "otsu_threshold",
    "extract_segments",
]

OTSU_BINS = 256

SALIENCY_KINDS = ("principal", "principal-inverted", "softened")


class DegenerateMapError(ValueError):
    """Input too degenerate to process (constant map, collapsed spectrum)."""


def _readonly(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CrossAttentionStack:
    """Aggregated per-token cross-attention maps, shape (r, r, n), entries in [0, 1]."""

    values: np.ndarray
    token_labels: tuple[str, ...]

    def __post_init__(self):
        arr = _readonly(self.values)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"cross-attention stack must have shape (r, r, n), got {arr.shape}")
        r, n = arr.shape[0], arr.shape[2]
        if r < 2 or n < 1:
            raise ValueError(f"need resolution >= 2 and at least one token map, got r={r}, n={n}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cross-attention stack contains non-finite entries")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("cross-attention entries must lie in [0, 1]")
        labels = tuple(str(label) for label in self.token_labels)
        if len(labels) != n:
            raise ValueError(f"stack holds {n} maps but {len(labels)} labels")
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "token_labels", labels)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class SelfAttentionTensor:
    """Pairwise spatial attention among latent cells, stored flattened as (r*r, r*r)."""

    values: np.ndarray

    def __post_init__(self):
        arr = _readonly(self.values)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"self-attention tensor must be square, got {arr.shape}")
        r = math.isqrt(arr.shape[0])
        if r * r != arr.shape[0] or r < 2:
            raise ValueError(f"side {arr.shape[0]} is not the square of a resolution >= 2")
        if not np.all(np.isfinite(arr)):
            raise ValueError("self-attention tensor contains non-finite entries")
        if arr.min() < 0.0:
            raise ValueError("self-attention entries must be nonnegative")
        object.__setattr__(self, "values", arr)

    @property
    def resolution(self) -> int:
        return math.isqrt(self.values.shape[0])


@dataclass(frozen=True)
class SaliencyMap:
    """A single (r, r) map with entries in [0, 1]."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        arr = _readonly(self.values)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise ValueError(f"saliency map must be square with r >= 2, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("saliency map contains non-finite entries")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("saliency entries must lie in [0, 1]")
        if self.kind not in SALIENCY_KINDS:
            raise ValueError(f"unknown saliency kind {self.kind!r}")
        object.__setattr__(self, "values", arr)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SegmentSet:
    """Exactly n disjoint segments: binary masks, masked softened values, masses.

    Missing segments are represented by all-zero masks with zero mass, so the
    segment axis always lines up with the subject-token axis.
    """

    masks: np.ndarray
    values: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        masks = _readonly(self.masks)
        values = _readonly(self.values)
        masses = _readonly(self.masses)
        if masks.ndim != 3 or masks.shape[1] != masks.shape[2]:
            raise ValueError(f"segment masks must have shape (n, r, r), got {masks.shape}")
        if masks.shape != values.shape or masses.shape != (masks.shape[0],):
            raise ValueError("masks, values and masses disagree on the segment count")
        if not np.isin(masks, (0.0, 1.0)).all():
            raise ValueError("segment masks must be binary")
        if (masks.sum(axis=0) > 1.0).any():
            raise ValueError("segment masks overlap")
        if np.any(values * (1.0 - masks) != 0.0):
            raise ValueError("segment values leak outside their masks")
        if not np.allclose(masses, values.sum(axis=(1, 2))):
            raise ValueError("segment masses do not match their values")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "masses", masses)

    @property
    def n_segments(self) -> int:
        return self.masks.shape[0]

    @property
    def resolution(self) -> int:
        return self.masks.shape[1]


@dataclass(frozen=True)
class SmoothingConfig:
    """Gaussian kernel parameters, in grid cells."""

    kernel_size: int = 3
    sigma: float = 0.5

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class AttentionBundle:
    """One evaluation's worth of attention: the cross stack plus the raw self tensor."""

    cross: CrossAttentionStack
    self_attn: SelfAttentionTensor

    def __post_init__(self):
        if self.cross.resolution != self.self_attn.resolution:
            raise ValueError(
                f"cross maps are {self.cross.resolution}x{self.cross.resolution} but the "
                f"self tensor implies resolution {self.self_attn.resolution}"
            )

    @property
    def resolution(self) -> int:
        return self.cross.resolution

    @property
    def n_tokens(self) -> int:
        return self.cross.n_tokens


def aggregate_cross_attention(raw_layers, subject_token_indices) -> CrossAttentionStack:
    """Average token maps over layers and heads and normalize each to max 1.

    ``raw_layers`` is a sequence of (heads, r*r, n_tokens) arrays, one per
    layer. Index 0 is the start token and may not be selected; its map is
    excluded from the output. An all-zero token map stays zero instead of
    dividing by zero.
    """
    layers = [np.asarray(layer, dtype=np.float64) for layer in raw_layers]
    if not layers:
        raise ValueError("no attention layers given")
    shape = layers[0].shape
    if len(shape) != 3:
        raise ValueError(f"each layer must be (heads, cells, tokens), got {shape}")
    for layer in layers:
        if layer.shape != shape:
            raise ValueError(f"layer shapes differ: {layer.shape} vs {shape}")
        if not np.all(np.isfinite(layer)) or layer.min() < 0.0:
            raise ValueError("attention maps must be finite and nonnegative")
    cells, n_tokens = shape[1], shape[2]
    r = math.isqrt(cells)
    if r * r != cells:
        raise ValueError(f"cell count {cells} is not a square grid")

    indices = [int(i) for i in subject_token_indices]
    if not indices:
        raise ValueError("need at least one subject token index")
    for idx in indices:
        if idx == 0:
            raise ValueError("index 0 is the start token and is always excluded")
        if not 0 < idx < n_tokens:
            raise ValueError(f"token index {idx} out of range for {n_tokens} tokens")

    mean = np.mean(np.stack(layers), axis=(0, 1))  # (cells, tokens)
    selected = mean[:, indices]
    peaks = selected.max(axis=0)
    scale = np.where(peaks > 0.0, peaks, 1.0)
    maps = (selected / scale).reshape(r, r, len(indices))
    labels = tuple(f"token{idx}" for idx in indices)
    return CrossAttentionStack(values=maps, token_labels=labels)


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps centered on the middle element."""
    offsets = np.arange(kernel_size, dtype=np.float64) - (kernel_size - 1) / 2.0
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def smooth_map(map2d: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    """Convolve one (r, r) map with a normalized Gaussian under reflect padding."""
    a = np.asarray(map2d, dtype=np.float64)
    r = a.shape[0]
    if cfg.kernel_size > 2 * r - 1:
        raise ValueError(f"kernel_size {cfg.kernel_size} exceeds 2r-1 = {2 * r - 1}")
    pad = cfg.kernel_size // 2
    if pad == 0:
        return a.copy()
    kernel = gaussian_kernel1d(cfg.kernel_size, cfg.sigma)
    padded = np.pad(a, pad, mode="reflect")
    cols = sum(kernel[i] * padded[:, i : i + r] for i in range(len(kernel)))
    return sum(kernel[i] * cols[i : i + r, :] for i in range(len(kernel)))


def smooth_map_adjoint(cotangent: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    """Transpose of :func:`smooth_map` as a linear operator.

    Needed to pull loss gradients back through the smoothing step; reflect
    padding makes the operator's adjoint fold border contributions onto their
    source cells rather than being plain correlation.
    """
    g = np.asarray(cotangent, dtype=np.float64)
    r = g.shape[0]
    pad = cfg.kernel_size // 2
    if pad == 0:
        return g.copy()
    kernel = gaussian_kernel1d(cfg.kernel_size, cfg.sigma)
    cols_bar = np.zeros((r + 2 * pad, r))
    for i in range(len(kernel)):
        cols_bar[i : i + r, :] += kernel[i] * g
    padded_bar = np.zeros((r + 2 * pad, r + 2 * pad))
    for i in range(len(kernel)):
        padded_bar[:, i : i + r] += kernel[i] * cols_bar
    source = np.arange(r + 2 * pad) - pad
    source = np.where(source < 0, -source, source)
    source = np.where(source >= r, 2 * (r - 1) - source, source)
    out = np.zeros((r, r))
    np.add.at(out, (source[:, None], source[None, :]), padded_bar)
    return out


def smooth_cross_attention(stack: CrossAttentionStack, cfg: SmoothingConfig) -> CrossAttentionStack:
    """Gaussian-smooth every token map, then re-normalize each to max 1."""
    smoothed = np.empty_like(np.asarray(stack.values))
    for j in range(stack.n_tokens):
        blurred = smooth_map(stack.values[:, :, j], cfg)
        peak = blurred.max()
        smoothed[:, :, j] = blurred / peak if peak > 0.0 else blurred
    return CrossAttentionStack(values=smoothed, token_labels=stack.token_labels)


def principal_projection(values: np.ndarray, tol: float = 1e-9, max_iter: int = 1000):
    """First principal direction and scores of the row cloud of a square matrix.

    Columns are mean-centered, the leading covariance eigenvector is found by
    power iteration, and every row is projected onto it. Returns
    ``(direction, scores, score_min, score_max)``; the direction's sign is
    fixed so the largest-magnitude score is positive.
    """
    X = np.asarray(values, dtype=np.float64)
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered
    n = cov.shape[0]
    # deterministic start; the ramp breaks ties on symmetric inputs
    v = np.ones(n) + np.linspace(0.0, 1e-3, n)
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise DegenerateMapError("collapsed spectrum: covariance annihilated the iterate")
        w /= norm
        if w @ v < 0.0:
            w = -w
        delta = float(np.linalg.norm(w - v))
        v = w
        if delta < tol:
            converged = True
            break
    if not converged:
        raise DegenerateMapError(f"power iteration did not converge within {max_iter} iterations")
    scores = centered @ v
    peak = int(np.argmax(np.abs(scores)))
    if scores[peak] < 0.0:
        scores, v = -scores, -v
    lo, hi = float(scores.min()), float(scores.max())
    if not hi > lo:
        raise DegenerateMapError("principal scores are constant")
    return v, scores, lo, hi


def principal_self_map(
    self_attn: SelfAttentionTensor, tol: float = 1e-9, max_iter: int = 1000
) -> tuple[SaliencyMap, SaliencyMap]:
    """Principal-component saliency of the self-attention tensor, both signs.

    PCA recovers the component only up to sign, so the min-max-normalized map
    and its inversion are both returned; downstream code evaluates losses on
    each and keeps the cheaper one.
    """
    r = self_attn.resolution
    _, scores, lo, hi = principal_projection(self_attn.values, tol=tol, max_iter=max_iter)
    normed = ((scores - lo) / (hi - lo)).reshape(r, r)
    return (
        SaliencyMap(values=normed, kind="principal"),
        SaliencyMap(values=1.0 - normed, kind="principal-inverted"),
    )


def soften(saliency: SaliencyMap, alpha: float = 16.0, beta: float = 0.5) -> SaliencyMap:
    """Elementwise logistic transform 1 / (1 + exp(-alpha * (x - beta)))."""
    softened = 1.0 / (1.0 + np.exp(-alpha * (np.asarray(saliency.values) - beta)))
    return SaliencyMap(values=softened, kind="softened")


def otsu_threshold(saliency) -> float:
    """Threshold over a 256-bin histogram of [0, 1] maximizing between-class variance.

    Ties are broken toward the lower threshold. The returned value is the bin
    edge ``(k + 1) / 256``, so ``x >= threshold`` reproduces the chosen class
    split exactly.
    """
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    flat = np.asarray(values, dtype=np.float64).ravel()
    bins = np.minimum((flat * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)
    counts = np.bincount(bins, minlength=OTSU_BINS)
    levels = np.arange(OTSU_BINS, dtype=np.int64)
    n0 = np.cumsum(counts)
    s0 = np.cumsum(counts * levels)
    n1 = n0[-1] - n0
    s1 = s0[-1] - s0
    valid = (n0 > 0) & (n1 > 0)
    if not valid.any():
        raise DegenerateMapError("constant map: every value falls in one histogram bin")
    n0f, n1f = n0.astype(np.float64), n1.astype(np.float64)
    s0f, s1f = s0.astype(np.float64), s1.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = n0f * n1f * (s1f / n1f - s0f / n0f) ** 2
    scores[~valid] = -1.0
    best = int(np.argmax(scores))
    return (best + 1) / OTSU_BINS


def extract_segments(softened, threshold: float, n: int) -> SegmentSet:
    """Top-n 4-connected components of the thresholded map, zero-padded to n.

    Components are ranked by total softened mass (ties by discovery order);
    surplus components are discarded and missing ones are filled with all-zero
    segments so the output always holds exactly n entries.
    """
    if n < 1:
        raise ValueError(f"need at least one segment slot, got n={n}")
    values = softened.values if isinstance(softened, SaliencyMap) else np.asarray(softened)
    a = np.asarray(values, dtype=np.float64)
    r = a.shape[0]
    foreground = a >= threshold

    labels = np.full((r, r), -1, dtype=np.int64)
    components: list[list[tuple[int, int]]] = []
    for sy in range(r):
        for sx in range(r):
            if not foreground[sy, sx] or labels[sy, sx] >= 0:
                continue
            comp_id = len(components)
            cells = []
            queue = deque([(sy, sx)])
            labels[sy, sx] = comp_id
            while queue:
                y, x = queue.popleft()
                cells.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < r and 0 <= nx < r and foreground[ny, nx] and labels[ny, nx] < 0:
                        labels[ny, nx] = comp_id
                        queue.append((ny, nx))
            components.append(cells)

    masses = [sum(a[y, x] for y, x in cells) for cells in components]
    order = sorted(range(len(components)), key=lambda i: -masses[i])[:n]

    masks = np.zeros((n, r, r))
    seg_values = np.zeros((n, r, r))
    for slot, comp_id in enumerate(order):
        for y, x in components[comp_id]:
            masks[slot, y, x] = 1.0
            seg_values[slot, y, x] = a[y, x]
    return SegmentSet(masks=masks, values=seg_values, masses=seg_values.sum(axis=(1, 2)))
