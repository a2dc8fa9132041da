"""Splat lifecycle: importance-ranked pruning, importance folding, and
randomized injection of fresh splats into predicted frames.

The cardinality schedule conserves frame size: predicted frames inherit
the reduced set from the previous frame, gain n_inject fresh splats, and
are pruned back by the same amount after fitting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splats import EPS_CHOL, INJECTED, SplatFrame

# Importance assigned to freshly injected splats: near zero so they are
# invisible at birth, but nonzero so their gradients are alive.
EPS_W = 1e-4


@dataclass
class LifecyclePlan:
    """Per-frame cardinality schedule derived from the rate-control N."""

    n_total: int
    n_prune: int
    n_inject: int

    def __post_init__(self):
        if self.n_prune != self.n_inject:
            raise ValueError("prune and inject counts must match")
        if self.n_total <= self.n_prune:
            raise ValueError("n_total must exceed n_prune")

    @classmethod
    def from_config(cls, n_total: int, prune_fraction: float,
                    augment_fraction: float) -> "LifecyclePlan":
        return cls(n_total, int(prune_fraction * n_total),
                   int(augment_fraction * n_total))


def prune(frame: SplatFrame, n_prune: int) -> SplatFrame:
    """Drop the n_prune splats with smallest |importance|.

    Ties break toward removing the lower splat index.  Survivors keep
    their relative order and slot provenance.
    """
    n = len(frame)
    if n_prune >= n:
        raise ValueError(f"cannot prune {n_prune} of {n} splats")
    if n_prune == 0:
        return frame.copy()
    order = np.argsort(np.abs(frame.importance), kind="stable")
    keep = np.ones(n, dtype=bool)
    keep[order[:n_prune]] = False
    return SplatFrame(frame.positions[keep], frame.cholesky[keep],
                      frame.colors[keep], frame.importance[keep],
                      frame.kind, frame.prev_slots[keep])


def fold_importance(frame: SplatFrame) -> SplatFrame:
    """Fold importance into weighted color: c' <- w * c', w <- 1.

    Rendering with the importance flag off afterwards is bit-exactly the
    weighted rendering before folding, because the renderer forms the
    product w * c' per splat before any per-pixel work.
    """
    out = frame.copy()
    out.colors = out.importance[:, None] * out.colors
    out.importance = np.ones(len(out))
    return out


def inject(frame: SplatFrame, n_inject: int, image_dims: tuple[int, int],
           seed, target: np.ndarray | None = None) -> SplatFrame:
    """Reset importance to 1 and append n_inject near-invisible splats.

    New splats are placed uniformly at random over the image rectangle
    with importance EPS_W, coarse isotropic shape d/sqrt(n), and color
    seeded from the target image (scaled by 0.5) when one is given.
    """
    width, height = image_dims
    out = frame.copy()
    out.importance = np.ones(len(out))
    if n_inject == 0:
        return out
    rng = np.random.default_rng(seed)
    positions = rng.uniform((0.0, 0.0), (width, height), size=(n_inject, 2))
    n_after = len(frame) + n_inject
    scale = np.hypot(width, height) / np.sqrt(n_after)
    scale = max(scale, EPS_CHOL)
    cholesky = np.tile([scale, 0.0, scale], (n_inject, 1))
    if target is not None:
        px = np.clip(positions[:, 0].astype(np.int64), 0, width - 1)
        py = np.clip(positions[:, 1].astype(np.int64), 0, height - 1)
        colors = 0.5 * np.asarray(target, dtype=np.float64)[py, px, :]
    else:
        colors = np.zeros((n_inject, 3))
    return SplatFrame(
        np.concatenate([out.positions, positions]),
        np.concatenate([out.cholesky, cholesky]),
        np.concatenate([out.colors, colors]),
        np.concatenate([out.importance, np.full(n_inject, EPS_W)]),
        frame.kind,
        np.concatenate([out.prev_slots,
                        np.full(n_inject, INJECTED, dtype=np.int32)]))
