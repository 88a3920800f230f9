"""Segment-to-token assignment: intersection cost matrix and optimal permutation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from coconolab.attention import CrossAttentionStack, SegmentSet

__all__ = ["CostMatrix", "AssignmentMatrix", "cost_matrix", "optimal_assignment"]


@dataclass(frozen=True)
class CostMatrix:
    """Entry (i, j) is the overlap of self-attention segment i with token map j."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        arr.setflags(write=False)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"cost matrix must be square, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cost matrix contains non-finite entries")
        if arr.min() < 0.0:
            raise ValueError("cost matrix entries must be nonnegative")
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class AssignmentMatrix:
    """Permutation pairing tokens with segments: ``perm[token] = segment``."""

    perm: tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"{perm} is not a permutation of 0..{len(perm) - 1}")
        object.__setattr__(self, "perm", perm)

    @property
    def n(self) -> int:
        return len(self.perm)

    def matrix(self) -> np.ndarray:
        """Matrix form: row = token, the 1 in row t sits at column perm[t]."""
        P = np.zeros((self.n, self.n))
        for token, segment in enumerate(self.perm):
            P[token, segment] = 1.0
        return P

    def segment_for_token(self, token: int) -> int:
        return self.perm[token]

    def token_for_segment(self, segment: int) -> int:
        return self.perm.index(segment)


def cost_matrix(segments: SegmentSet, cross: CrossAttentionStack) -> CostMatrix:
    """Pairwise intersections: C(i, j) = sum over cells of segment_i * cross_j."""
    if segments.resolution != cross.resolution:
        raise ValueError(
            f"segments are {segments.resolution}x{segments.resolution} but cross maps are "
            f"{cross.resolution}x{cross.resolution}"
        )
    if segments.n_segments != cross.n_tokens:
        raise ValueError(f"{segments.n_segments} segments vs {cross.n_tokens} token maps")
    values = np.einsum("ikl,klj->ij", segments.values, cross.values)
    return CostMatrix(values=values)


def _completion_entries(C: np.ndarray, rows: list[int], cols: list[int]) -> list[float]:
    """Entries of a trace-maximizing matching of the given rows onto the given columns."""
    if not cols:
        return []
    sub = C[np.ix_(rows, cols)]
    row_ind, col_ind = linear_sum_assignment(sub, maximize=True)
    return [float(sub[i, j]) for i, j in zip(row_ind, col_ind)]


def optimal_assignment(cost) -> AssignmentMatrix:
    """Permutation maximizing Tr(P C), lexicographically smallest among maximizers.

    Solved with the Hungarian method (via scipy's linear sum assignment); the
    deterministic tie-break matters when zero-padded segments make rows of C
    identical. Totals are compared with exact compensated sums so equal-trace
    permutations are recognized as ties regardless of summation order.
    """
    if isinstance(cost, CostMatrix):
        C = cost.values
    else:
        C = np.asarray(cost, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"cost matrix must be square, got {C.shape}")
        if not np.all(np.isfinite(C)):
            raise ValueError("cost matrix contains non-finite entries")
    n = C.shape[0]

    perm: list[int] = []
    prefix: list[float] = []
    available = list(range(n))
    for token in range(n):
        remaining_tokens = list(range(token + 1, n))
        best_total = -math.inf
        best_segment = available[0]
        for segment in available:
            rest = [s for s in available if s != segment]
            entries = prefix + [float(C[segment, token])]
            entries += _completion_entries(C, rest, remaining_tokens)
            total = math.fsum(entries)
            if total > best_total:
                best_total = total
                best_segment = segment
        perm.append(best_segment)
        prefix.append(float(C[best_segment, token]))
        available.remove(best_segment)
    return AssignmentMatrix(perm=tuple(perm))
