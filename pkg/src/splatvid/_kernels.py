"""Fused splat fitting kernels.

The fitting loop is the hot path of the encoder: one forward render and
one backward pass per iteration over every (splat, covered-pixel) pair.
When numba is importable these run as JIT-compiled loops that keep the
per-pair gaussian values from the forward pass for the backward pass;
otherwise a pure-numpy fallback (the rasterizer's pair machinery) is used.
Results are deterministic either way: the backward parallelizes over
splats only, and each splat's accumulation is a private sequential loop,
so thread count cannot change any output value.
"""

from __future__ import annotations

import numpy as np

from .raster import FrameGradients, _backward_pairs, _forward_pairs
from .splats import SplatFrame, pixel_bounds

try:
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def _fwd_jit(pos, chol, eff, x0, x1, y0, y1, offsets, img, gflat):
        n = pos.shape[0]
        for i in range(n):
            l1 = chol[i, 0]
            l2 = chol[i, 1]
            l3 = chol[i, 2]
            c0 = eff[i, 0]
            c1 = eff[i, 1]
            c2 = eff[i, 2]
            mx = pos[i, 0]
            my = pos[i, 1]
            k = offsets[i]
            for py in range(y0[i], y1[i] + 1):
                dy = py + 0.5 - my
                for px in range(x0[i], x1[i] + 1):
                    dx = px + 0.5 - mx
                    u1 = dx / l1
                    u2 = (dy - l2 * u1) / l3
                    g = np.exp(-0.5 * (u1 * u1 + u2 * u2))
                    gflat[k] = g
                    k += 1
                    img[py, px, 0] += c0 * g
                    img[py, px, 1] += c1 * g
                    img[py, px, 2] += c2 * g

    @njit(cache=True, parallel=True)
    def _bwd_jit(pos, chol, colors, imp, use_imp, grad, x0, x1, y0, y1,
                 offsets, gflat, gpos, gchol, gcol, gimp):
        n = pos.shape[0]
        for i in prange(n):
            l1 = chol[i, 0]
            l2 = chol[i, 1]
            l3 = chol[i, 2]
            w = imp[i] if use_imp else 1.0
            e0 = colors[i, 0] * w
            e1 = colors[i, 1] * w
            e2 = colors[i, 2] * w
            mx = pos[i, 0]
            my = pos[i, 1]
            ia = (l2 * l2 + l3 * l3) / (l1 * l1 * l3 * l3)
            ib = -l2 / (l1 * l3 * l3)
            ic = 1.0 / (l3 * l3)
            a_px = 0.0
            a_py = 0.0
            a_c0 = 0.0
            a_c1 = 0.0
            a_c2 = 0.0
            a_l1 = 0.0
            a_l2 = 0.0
            a_l3 = 0.0
            k = offsets[i]
            for py in range(y0[i], y1[i] + 1):
                dy = py + 0.5 - my
                for px in range(x0[i], x1[i] + 1):
                    dx = px + 0.5 - mx
                    u1 = dx / l1
                    u2 = (dy - l2 * u1) / l3
                    g = gflat[k]
                    k += 1
                    g0 = grad[py, px, 0]
                    g1 = grad[py, px, 1]
                    g2 = grad[py, px, 2]
                    a_c0 += g * g0
                    a_c1 += g * g1
                    a_c2 += g * g2
                    s = g * (e0 * g0 + e1 * g1 + e2 * g2)
                    a_px += s * (ia * dx + ib * dy)
                    a_py += s * (ib * dx + ic * dy)
                    a_l1 += s * (u1 - u2 * (l2 / l3)) * (u1 / l1)
                    a_l2 += s * (u1 * u2) / l3
                    a_l3 += s * (u2 * u2) / l3
            gimp[i] = colors[i, 0] * a_c0 + colors[i, 1] * a_c1 \
                + colors[i, 2] * a_c2
            gcol[i, 0] = a_c0 * w
            gcol[i, 1] = a_c1 * w
            gcol[i, 2] = a_c2 * w
            gpos[i, 0] = a_px
            gpos[i, 1] = a_py
            gchol[i, 0] = a_l1
            gchol[i, 1] = a_l2
            gchol[i, 2] = a_l3


class _FitContext:
    __slots__ = ("x0", "x1", "y0", "y1", "offsets", "gflat", "cache")


def fit_forward(frame: SplatFrame, width: int, height: int,
                use_importance: bool):
    """Forward render for the fitting loop: float64 image plus context."""
    ctx = _FitContext()
    if not HAVE_NUMBA:
        image, cache = _forward_pairs(frame, width, height, use_importance)
        ctx.cache = cache
        return image, ctx
    x0, x1, y0, y1 = pixel_bounds(frame.positions, frame.cholesky,
                                  width, height)
    counts = np.maximum(x1 - x0 + 1, 0) * np.maximum(y1 - y0 + 1, 0)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    if use_importance:
        eff = frame.colors * frame.importance[:, None]
    else:
        eff = frame.colors
    image = np.zeros((height, width, 3), dtype=np.float64)
    gflat = np.empty(int(offsets[-1]), dtype=np.float64)
    _fwd_jit(frame.positions, frame.cholesky, np.ascontiguousarray(eff),
             x0, x1, y0, y1, offsets, image, gflat)
    ctx.x0, ctx.x1, ctx.y0, ctx.y1 = x0, x1, y0, y1
    ctx.offsets, ctx.gflat, ctx.cache = offsets, gflat, None
    return image, ctx


def fit_backward(frame: SplatFrame, ctx: _FitContext, grad_image: np.ndarray,
                 use_importance: bool) -> FrameGradients:
    """Backward pass matching fit_forward's cutoff and cached gaussians."""
    if not HAVE_NUMBA:
        return _backward_pairs(frame, ctx.cache, grad_image)
    n = len(frame)
    gpos = np.empty((n, 2))
    gchol = np.empty((n, 3))
    gcol = np.empty((n, 3))
    gimp = np.empty(n)
    _bwd_jit(frame.positions, frame.cholesky, frame.colors, frame.importance,
             use_importance, np.ascontiguousarray(grad_image),
             ctx.x0, ctx.x1, ctx.y0, ctx.y1, ctx.offsets, ctx.gflat,
             gpos, gchol, gcol, gimp)
    return FrameGradients(gpos, gchol, gcol, gimp)
