"""Shared test helpers: independent oracles and random-instance builders."""

from __future__ import annotations

import numpy as np
import pytest

from coconolab.attention import AttentionBundle, CrossAttentionStack, SelfAttentionTensor


def flood_fill_components(foreground: np.ndarray) -> list[list[tuple[int, int]]]:
    """Independent 4-connected component oracle (recursive stack fill)."""
    r = foreground.shape[0]
    seen = np.zeros_like(foreground, dtype=bool)
    components = []
    for sy in range(r):
        for sx in range(r):
            if not foreground[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            cells = []
            while stack:
                y, x = stack.pop()
                cells.append((y, x))
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < r and 0 <= nx < r and foreground[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            components.append(cells)
    return components


def otsu_exhaustive(values: np.ndarray) -> float:
    """Independent Otsu oracle: plain loop over all 256 candidate splits."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    bins = np.minimum((flat * 256).astype(np.int64), 255)
    counts = [int((bins == k).sum()) for k in range(256)]
    best_score, best_k = -1.0, None
    for k in range(256):
        n0 = sum(counts[: k + 1])
        n1 = sum(counts[k + 1 :])
        if n0 == 0 or n1 == 0:
            continue
        s0 = sum(level * counts[level] for level in range(k + 1))
        s1 = sum(level * counts[level] for level in range(k + 1, 256))
        score = float(n0) * float(n1) * (float(s1) / float(n1) - float(s0) / float(n0)) ** 2
        if score > best_score:
            best_score, best_k = score, k
    if best_k is None:
        raise ValueError("constant map")
    return (best_k + 1) / 256


def random_bundle(rng: np.random.Generator, r: int = 8, n: int = 2) -> AttentionBundle:
    """A valid random bundle: cross maps in [0, 1], nonnegative PSD self tensor."""
    cross = rng.random((r, r, n))
    factors = np.abs(rng.standard_normal((r * r, 6)))
    self_attn = factors @ factors.T
    return AttentionBundle(
        cross=CrossAttentionStack(values=cross, token_labels=tuple(f"t{i}" for i in range(n))),
        self_attn=SelfAttentionTensor(values=self_attn),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240814)
