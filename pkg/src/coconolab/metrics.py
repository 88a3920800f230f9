"""Subject-separation metrics over binary masks.

Desk-scale analogs of mask-based mixing/neglect diagnostics: how many
genuinely distinct segments exist, and how much they overlap pairwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coconolab.attention import SegmentSet

__all__ = [
    "MaskSet",
    "count_distinct_segments",
    "pairwise_overlap",
    "masks_from_segments",
    "support_masks",
]

DEDUP_OVERLAP = 0.5
DEFAULT_MIN_AREA = 4


@dataclass(frozen=True)
class MaskSet:
    """Labeled binary masks, shape (m, r, r), entries in {0, 1}."""

    masks: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.array(self.masks, dtype=np.float64)
        arr.setflags(write=False)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError(f"masks must have shape (m, r, r), got {arr.shape}")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError("masks must be binary")
        labels = tuple(str(l) for l in self.labels) or tuple(f"mask{i}" for i in range(arr.shape[0]))
        if len(labels) != arr.shape[0]:
            raise ValueError(f"{arr.shape[0]} masks but {len(labels)} labels")
        object.__setattr__(self, "masks", arr)
        object.__setattr__(self, "labels", labels)

    @property
    def n_masks(self) -> int:
        return self.masks.shape[0]


def masks_from_segments(segments: SegmentSet) -> MaskSet:
    return MaskSet(masks=segments.masks)


def _overlap_ratio(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection normalized by the smaller area; containment scores 1."""
    area_a, area_b = a.sum(), b.sum()
    if area_a == 0 or area_b == 0:
        return 0.0
    return float((a * b).sum() / min(area_a, area_b))


def count_distinct_segments(masks: MaskSet, min_area: int = DEFAULT_MIN_AREA) -> int:
    """Masks large enough and not mostly duplicating an already-counted mask.

    A mask counts when its area is at least ``min_area`` and its overlap ratio
    with every previously counted mask stays below 0.5.
    """
    counted: list[np.ndarray] = []
    for mask in masks.masks:
        if mask.sum() < min_area:
            continue
        if any(_overlap_ratio(mask, seen) >= DEDUP_OVERLAP for seen in counted):
            continue
        counted.append(mask)
    return len(counted)


def support_masks(segments: SegmentSet, cross_values: np.ndarray, perm, level: float = 0.5) -> MaskSet:
    """Per-subject footprint: assigned segment mask joined with the cross-map support.

    ``perm[token]`` names the segment assigned to each token; the cross map is
    binarized at ``level``. Overlap between these footprints across subjects
    is the mixing signal the contrast loss drives down.
    """
    cross = np.asarray(cross_values, dtype=np.float64)
    out = []
    for token, segment in enumerate(perm):
        footprint = np.maximum(segments.masks[segment], (cross[:, :, token] >= level).astype(np.float64))
        out.append(footprint)
    return MaskSet(masks=np.stack(out), labels=tuple(f"subject{t}" for t in range(len(perm))))


def pairwise_overlap(masks: MaskSet) -> float:
    """Mean over unordered pairs of |A ∩ B| / min(|A|, |B|); empty pairs score 0."""
    m = masks.n_masks
    if m < 2:
        raise ValueError(f"need at least two masks, got {m}")
    ratios = [
        _overlap_ratio(masks.masks[i], masks.masks[j])
        for i in range(m)
        for j in range(i + 1, m)
    ]
    return float(np.mean(ratios))
