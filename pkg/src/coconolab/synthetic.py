"""Differentiable toy attention producers for desk-scale end-to-end runs.

Each producer turns a latent vector into an attention bundle built from
parametric blobs: subject j's blob center follows latent coordinates
(2j, 2j+1), cross-attention maps are plateaued radial profiles around the
(possibly offset) blob centers, and the self-attention tensor is a sum of
rank-one outer products of blob score vectors plus a background score vector.
The background component is what makes the principal-component saliency
separate objects from background the way real self-attention maps do.

Built-in scenarios reproduce the two failure modes the losses target:
``neglect`` starts with coincident blobs (one merged self-attention segment),
``interference`` starts with one subject's cross map straddling another
subject's blob, and ``aligned`` starts healthy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from coconolab.attention import AttentionBundle, CrossAttentionStack, SelfAttentionTensor

__all__ = ["ScenarioSpec", "SyntheticProducer", "scenario", "make_producer", "BUILTIN_KINDS"]

BUILTIN_KINDS = ("neglect", "interference", "aligned")


@dataclass(frozen=True)
class ScenarioSpec:
    """Geometry and coupling of a synthetic attention scene.

    ``center_gain`` converts latent units into cell displacement of blob
    centers; ``amp_gain`` optionally gates blob amplitude by the same latent
    pair; ``offset_decay`` shrinks cross-map offsets as the latent pair moves
    away from the origin, letting optimization dissolve an interference.
    """

    kind: str
    n_subjects: int
    r: int
    latent_dim: int
    self_centers: tuple[tuple[float, float], ...]
    self_widths: tuple[float, ...]
    amplitudes: tuple[float, ...]
    cross_offsets: tuple[tuple[float, float], ...]
    cross_width: float
    cross_exponent: float = 3.0
    center_gain: float = 2.0
    center_span: float | None = None
    amp_gain: float = 0.0
    offset_decay: float = 0.0
    bg_amplitude: float = 0.55
    bg_suppression: float = 4.0

    def __post_init__(self):
        n = self.n_subjects
        if n < 1:
            raise ValueError("need at least one subject")
        if self.r < 4:
            raise ValueError(f"resolution must be >= 4, got {self.r}")
        if self.latent_dim < 2 * n:
            raise ValueError(f"latent_dim must be >= 2 * n_subjects = {2 * n}, got {self.latent_dim}")
        for name in ("self_centers", "self_widths", "amplitudes", "cross_offsets"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must list one entry per subject")
        if any(w <= 0 for w in self.self_widths) or self.cross_width <= 0:
            raise ValueError("blob widths must be positive")
        if self.center_span is not None and self.center_span <= 0:
            raise ValueError("center_span must be positive when set")
        if self.cross_exponent < 1.0:
            raise ValueError("cross_exponent must be >= 1")
        if self.bg_amplitude < 0 or self.bg_suppression < 0 or self.offset_decay < 0:
            raise ValueError("background and decay parameters must be nonnegative")


def scenario(kind: str, n_subjects: int = 2, r: int = 8, latent_dim: int | None = None) -> ScenarioSpec:
    """Build one of the built-in scenario specs at the requested scale."""
    if kind not in BUILTIN_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; choose from {BUILTIN_KINDS}")
    n = int(n_subjects)
    latent_dim = 2 * n if latent_dim is None else int(latent_dim)
    mid = (r - 1) / 2.0
    angles = [2.0 * math.pi * j / n + math.pi / 4.0 for j in range(n)]
    ring = 0.37 * r
    spread = [(mid + ring * math.sin(a), mid + ring * math.cos(a)) for a in angles]

    scale = r / 8.0  # couplings are in cells, so they track the grid size
    if kind == "neglect":
        centers = tuple(
            (mid + 0.2 * j * math.sin(a), mid + 0.2 * j * math.cos(a))
            for j, a in enumerate(angles)
        )
        offsets = tuple((0.0, 0.0) for _ in range(n))
        offset_decay = 0.0
        # merged blobs need strong coupling so a unit latent displacement separates them
        center_gain = 3.0 * scale
    elif kind == "aligned":
        centers = tuple(spread)
        offsets = tuple((0.0, 0.0) for _ in range(n))
        offset_decay = 0.0
        center_gain = 2.0 * scale
    else:  # interference: every subject after the first leans onto its predecessor's blob
        centers = tuple(spread)
        offsets = [(0.0, 0.0)]
        for j in range(1, n):
            dy = spread[j - 1][0] - spread[j][0]
            dx = spread[j - 1][1] - spread[j][1]
            offsets.append((0.4 * dy, 0.4 * dx))
        offsets = tuple(offsets)
        offset_decay = 0.35
        center_gain = 2.0 * scale

    return ScenarioSpec(
        kind=kind,
        n_subjects=n,
        r=int(r),
        latent_dim=latent_dim,
        self_centers=centers,
        self_widths=tuple(r / 8.0 for _ in range(n)),
        amplitudes=tuple(1.0 for _ in range(n)),
        cross_offsets=offsets,
        cross_width=r / 4.0,
        center_gain=center_gain,
        center_span=0.55 * r,
        offset_decay=offset_decay,
    )


class SyntheticProducer:
    """Attention producer over parametric blobs; deterministic and smooth in z.

    Implements the producer contract: ``evaluate`` maps a latent to an
    :class:`AttentionBundle`, ``vjp`` pulls bundle cotangents back to the
    latent exactly, and ``dimension`` reports the latent size.
    """

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        r = spec.r
        grid = np.arange(r, dtype=np.float64)
        yy, xx = np.meshgrid(grid, grid, indexing="ij")
        self._yy = yy.ravel()
        self._xx = xx.ravel()
        self._labels = tuple(f"subject{j}" for j in range(spec.n_subjects))

    def dimension(self) -> int:
        return self.spec.latent_dim

    def _forward(self, z: np.ndarray) -> dict:
        spec = self.spec
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (spec.latent_dim,):
            raise ValueError(f"latent must have shape ({spec.latent_dim},), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite entries")

        n = spec.n_subjects
        state: dict = {
            "z": z,
            "centers": [],
            "amps": [],
            "e": [],
            "cross": [],
            "cross_u": [],
            "decays": [],
            "jacobians": [],
        }
        for j in range(n):
            zy, zx = z[2 * j], z[2 * j + 1]
            if spec.center_span is None:
                disp_y, disp_x = spec.center_gain * zy, spec.center_gain * zx
                jac_y = jac_x = spec.center_gain
            else:
                # tanh soft clamp keeps blobs on-grid for any latent draw
                span = spec.center_span
                disp_y = span * math.tanh(spec.center_gain * zy / span)
                disp_x = span * math.tanh(spec.center_gain * zx / span)
                jac_y = spec.center_gain * (1.0 - (disp_y / span) ** 2)
                jac_x = spec.center_gain * (1.0 - (disp_x / span) ** 2)
            cy = spec.self_centers[j][0] + disp_y
            cx = spec.self_centers[j][1] + disp_x
            amp = spec.amplitudes[j] * math.exp(spec.amp_gain * (zy + zx) / 2.0)
            w2 = spec.self_widths[j] ** 2
            q = ((self._yy - cy) ** 2 + (self._xx - cx) ** 2) / (2.0 * w2)
            e = np.exp(-q)

            decay = math.exp(-spec.offset_decay * (zy**2 + zx**2))
            ccy = cy + spec.cross_offsets[j][0] * decay
            ccx = cx + spec.cross_offsets[j][1] * decay
            u = ((self._yy - ccy) ** 2 + (self._xx - ccx) ** 2) / (2.0 * spec.cross_width**2)
            cross = np.exp(-(u**spec.cross_exponent))

            state["centers"].append((cy, cx))
            state["amps"].append(amp)
            state["e"].append(e)
            state["decays"].append(decay)
            state["cross_u"].append(u)
            state["cross"].append(cross)
            state["jacobians"].append((jac_y, jac_x))

        scores = [state["amps"][j] * state["e"][j] for j in range(n)]
        bg = spec.bg_amplitude * np.exp(-spec.bg_suppression * np.sum(state["e"], axis=0))
        state["scores"] = scores
        state["bg"] = bg
        return state

    def evaluate(self, z: np.ndarray) -> AttentionBundle:
        spec = self.spec
        state = self._forward(z)
        r, n = spec.r, spec.n_subjects
        cross = np.stack([state["cross"][j].reshape(r, r) for j in range(n)], axis=-1)
        tensor = state["bg"][:, None] * state["bg"][None, :]
        for s in state["scores"]:
            tensor = tensor + s[:, None] * s[None, :]
        return AttentionBundle(
            cross=CrossAttentionStack(values=cross, token_labels=self._labels),
            self_attn=SelfAttentionTensor(values=tensor),
        )

    def vjp(self, z: np.ndarray, cross_cotangent: np.ndarray, self_cotangent: np.ndarray) -> np.ndarray:
        """Exact gradient of <cotangents, outputs> with respect to the latent."""
        spec = self.spec
        state = self._forward(z)
        n, r = spec.n_subjects, spec.r
        d_cross = np.asarray(cross_cotangent, dtype=np.float64)
        d_self = np.asarray(self_cotangent, dtype=np.float64)
        if d_cross.shape != (r, r, n):
            raise ValueError(f"cross cotangent must have shape ({r}, {r}, {n}), got {d_cross.shape}")
        if d_self.shape != (r * r, r * r):
            raise ValueError(f"self cotangent must have shape ({r * r}, {r * r}), got {d_self.shape}")

        U = d_self + d_self.T
        cot_bg = U @ state["bg"]
        g = np.zeros(spec.latent_dim)
        for j in range(n):
            zy, zx = state["z"][2 * j], state["z"][2 * j + 1]
            cy, cx = state["centers"][j]
            amp, e = state["amps"][j], state["e"][j]
            w2 = spec.self_widths[j] ** 2

            cot_s = U @ state["scores"][j]
            cot_e = amp * cot_s - spec.bg_suppression * state["bg"] * cot_bg
            # e = exp(-q): d e / d center = e * (cell - center) / w^2
            g_cy = float(np.sum(cot_e * e * (self._yy - cy) / w2))
            g_cx = float(np.sum(cot_e * e * (self._xx - cx) / w2))
            g_amp = float(np.sum(cot_s * e))

            u = state["cross_u"][j]
            cross = state["cross"][j]
            cot_x = d_cross[:, :, j].ravel()
            p = spec.cross_exponent
            shape_factor = p * np.power(u, p - 1.0) * cross
            decay = state["decays"][j]
            ccy = cy + spec.cross_offsets[j][0] * decay
            ccx = cx + spec.cross_offsets[j][1] * decay
            w2c = spec.cross_width**2
            g_ccy = float(np.sum(cot_x * shape_factor * (self._yy - ccy) / w2c))
            g_ccx = float(np.sum(cot_x * shape_factor * (self._xx - ccx) / w2c))

            # chain cross centers back through the offset decay and the shared blob center
            jac_y, jac_x = state["jacobians"][j]
            d_decay_dy = -2.0 * spec.offset_decay * zy * decay
            d_decay_dx = -2.0 * spec.offset_decay * zx * decay
            off_y, off_x = spec.cross_offsets[j]
            g[2 * j] += jac_y * (g_cy + g_ccy)
            g[2 * j] += (g_ccy * off_y + g_ccx * off_x) * d_decay_dy
            g[2 * j + 1] += jac_x * (g_cx + g_ccx)
            g[2 * j + 1] += (g_ccy * off_y + g_ccx * off_x) * d_decay_dx
            if spec.amp_gain != 0.0:
                g[2 * j] += g_amp * amp * spec.amp_gain / 2.0
                g[2 * j + 1] += g_amp * amp * spec.amp_gain / 2.0
        return g


def make_producer(spec: ScenarioSpec) -> SyntheticProducer:
    """Producer for a scenario spec (validation happens in the spec itself)."""
    return SyntheticProducer(spec)
