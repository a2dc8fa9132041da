"""2D Gaussian splat primitives and their closed-form per-splat math.

A splat is an anisotropic 2D Gaussian contributing additively to pixels:
its covariance is parameterized by the three lower-triangular entries
(l1, l2, l3) of a Cholesky factor L with Sigma = L @ L.T, which keeps the
covariance positive definite under unconstrained optimization.  Color is a
signed "weighted color" (opacity folded in), and a transient per-splat
importance weight scales the whole contribution during training.

Pixel coordinates are continuous with origin at the top-left corner and
pixel centers at integer + 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Cholesky diagonal floor, in pixel units.  Keeps Sigma^-1 bounded during
# optimization; enforced by clamping after every optimizer step.
EPS_CHOL = 1e-3

# Support radius of a splat in units of marginal standard deviations.
# Part of the codec definition: encoder and decoder must agree on it.
CUTOFF_SIGMA = 3.0

FRAME_I = "I"
FRAME_P = "P"

# prev_slots value marking a splat with no back-reference.
INJECTED = -1


class SplatError(ValueError):
    """Contract violation on splat parameters."""


@dataclass
class Splat:
    """Single-splat view used by the scalar API and tests.

    position: (2,) pixel coordinates (x, y), continuous.
    cholesky: (3,) factors (l1, l2, l3); l1, l3 >= EPS_CHOL.
    weighted_color: (3,) signed linear-RGB contribution (unclamped).
    importance: training-time contribution weight, 1.0 when inactive.
    """

    position: np.ndarray
    cholesky: np.ndarray
    weighted_color: np.ndarray
    importance: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.cholesky = np.asarray(self.cholesky, dtype=np.float64)
        self.weighted_color = np.asarray(self.weighted_color, dtype=np.float64)
        if self.position.shape != (2,) or self.cholesky.shape != (3,) \
                or self.weighted_color.shape != (3,):
            raise SplatError("splat fields must be 2-, 3- and 3-vectors")
        if not (np.all(np.isfinite(self.position))
                and np.all(np.isfinite(self.cholesky))
                and np.all(np.isfinite(self.weighted_color))
                and np.isfinite(self.importance)):
            raise SplatError("splat parameters must be finite")


@dataclass
class SplatFrame:
    """Fixed-cardinality set of splats representing one frame.

    Stored as parallel arrays (struct of arrays).  ``prev_slots[i]`` is the
    slot index of splat i in the previous finalized frame, or INJECTED (-1)
    for splats with no back-reference.
    """

    positions: np.ndarray   # (n, 2) float64
    cholesky: np.ndarray    # (n, 3) float64
    colors: np.ndarray      # (n, 3) float64, weighted color
    importance: np.ndarray  # (n,)   float64
    kind: str = FRAME_I
    prev_slots: np.ndarray = field(default=None)  # (n,) int32

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.cholesky = np.ascontiguousarray(self.cholesky, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.importance = np.ascontiguousarray(self.importance, dtype=np.float64)
        if self.prev_slots is None:
            self.prev_slots = np.full(len(self.positions), INJECTED, dtype=np.int32)
        self.prev_slots = np.ascontiguousarray(self.prev_slots, dtype=np.int32)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "SplatFrame":
        return SplatFrame(self.positions.copy(), self.cholesky.copy(),
                          self.colors.copy(), self.importance.copy(),
                          self.kind, self.prev_slots.copy())

    def splat(self, i: int) -> Splat:
        return Splat(self.positions[i], self.cholesky[i], self.colors[i],
                     float(self.importance[i]))

    def validate(self, prev_len: int | None = None) -> None:
        n = len(self)
        shapes = (self.positions.shape == (n, 2) and self.cholesky.shape == (n, 3)
                  and self.colors.shape == (n, 3) and self.importance.shape == (n,)
                  and self.prev_slots.shape == (n,))
        if not shapes:
            raise SplatError("inconsistent frame array shapes")
        if self.kind not in (FRAME_I, FRAME_P):
            raise SplatError(f"unknown frame kind {self.kind!r}")
        for arr in (self.positions, self.cholesky, self.colors, self.importance):
            if not np.all(np.isfinite(arr)):
                raise SplatError("non-finite splat parameters")
        if n and (np.any(self.cholesky[:, 0] < EPS_CHOL)
                  or np.any(self.cholesky[:, 2] < EPS_CHOL)):
            raise SplatError("cholesky diagonal below EPS_CHOL")
        if prev_len is not None:
            inherited = self.prev_slots[self.prev_slots != INJECTED]
            if inherited.size and (inherited.min() < 0 or inherited.max() >= prev_len):
                raise SplatError("inherited slot index out of range")


def clamp_cholesky(cholesky: np.ndarray) -> np.ndarray:
    """Clamp the diagonal factors up to EPS_CHOL, in place."""
    np.maximum(cholesky[..., 0], EPS_CHOL, out=cholesky[..., 0])
    np.maximum(cholesky[..., 2], EPS_CHOL, out=cholesky[..., 2])
    return cholesky


def covariance_from_cholesky(cholesky) -> np.ndarray:
    """Covariance Sigma = L @ L.T from the factors (l1, l2, l3).

    L = [[l1, 0], [l2, l3]].  Rejects degenerate input (diagonal below
    EPS_CHOL) instead of clamping: clamping is the optimizer's job.
    """
    l1, l2, l3 = np.asarray(cholesky, dtype=np.float64)
    if l1 < EPS_CHOL or l3 < EPS_CHOL:
        raise SplatError(f"degenerate cholesky factors ({l1}, {l2}, {l3})")
    return np.array([[l1 * l1, l1 * l2],
                     [l1 * l2, l2 * l2 + l3 * l3]], dtype=np.float64)


def mahalanobis_exponent(dx, dy, l1, l2, l3):
    """Exponent 0.5 * d^T Sigma^-1 d via forward substitution u = L^-1 d.

    Broadcasts over arrays.  This is the canonical expression shared by the
    scalar API, the rasterizer and test oracles, so all paths produce
    bit-identical values for identical inputs.
    """
    u1 = dx / l1
    u2 = (dy - l2 * u1) / l3
    return 0.5 * (u1 * u1 + u2 * u2)


def exponent(splat: Splat, pixel_center) -> float:
    """Mahalanobis exponent of a pixel center under one splat."""
    px, py = np.asarray(pixel_center, dtype=np.float64)
    dx = px - splat.position[0]
    dy = py - splat.position[1]
    l1, l2, l3 = splat.cholesky
    if l1 < EPS_CHOL or l3 < EPS_CHOL:
        raise SplatError("degenerate cholesky factors")
    return float(mahalanobis_exponent(dx, dy, l1, l2, l3))


def contribution(splat: Splat, pixel_center, use_importance: bool = False) -> np.ndarray:
    """Color this splat adds to the pixel: (w *) c' * exp(-sigma).

    The importance factor multiplies the color before the exponential so
    that folding w into c' leaves rendering bit-exact.
    """
    sigma = exponent(splat, pixel_center)
    color = splat.weighted_color
    if use_importance:
        color = splat.importance * color
    return color * np.exp(-sigma)


def splat_extents(cholesky: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Marginal CUTOFF_SIGMA extents (ex, ey) per splat.

    The x marginal std of Sigma = L L^T is l1, the y marginal std is
    sqrt(l2^2 + l3^2).
    """
    ex = CUTOFF_SIGMA * cholesky[:, 0]
    ey = CUTOFF_SIGMA * np.hypot(cholesky[:, 1], cholesky[:, 2])
    return ex, ey


def pixel_bounds(positions: np.ndarray, cholesky: np.ndarray,
                 width: int, height: int):
    """Inclusive pixel-index bounds (x0, x1, y0, y1) of each splat's support.

    A pixel is covered when its center (j + 0.5, i + 0.5) lies inside the
    axis-aligned CUTOFF_SIGMA box around the splat position.  Empty boxes
    come out with x0 > x1 (or y0 > y1).
    """
    ex, ey = splat_extents(cholesky)
    mx, my = positions[:, 0], positions[:, 1]
    x0 = np.ceil(mx - ex - 0.5).astype(np.int64)
    x1 = np.floor(mx + ex - 0.5).astype(np.int64)
    y0 = np.ceil(my - ey - 0.5).astype(np.int64)
    y1 = np.floor(my + ey - 0.5).astype(np.int64)
    np.clip(x0, 0, width, out=x0)
    np.clip(x1, -1, width - 1, out=x1)
    np.clip(y0, 0, height, out=y0)
    np.clip(y1, -1, height - 1, out=y1)
    return x0, x1, y0, y1
