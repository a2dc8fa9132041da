"""Tile-based forward rasterizer and hand-derived backward pass.

Rendering is an accumulated signed sum (no alpha compositing, no depth
sort): each pixel receives (w_n) c'_n exp(-sigma_n) from every splat whose
CUTOFF_SIGMA bounding box covers the pixel center.  Accumulation happens
in double precision, per pixel, in ascending splat-index order; the public
image is stored in single precision.  These choices are part of the codec
definition, so the decoder reproduces the encoder bit for bit.

The backward pass applies the identical bounding-box cutoff, making
analytic gradients exact derivatives of the forward pass.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .splats import SplatFrame, mahalanobis_exponent, pixel_bounds

TILE_SIZE = 16


@dataclass
class TileIndex:
    """Per-tile lists of splat indices whose support box intersects the tile."""

    width: int
    height: int
    tile_size: int
    tiles_x: int
    tiles_y: int
    lists: list  # list[np.ndarray of int64], length tiles_x * tiles_y

    def tile_rect(self, t: int) -> tuple[int, int, int, int]:
        ty, tx = divmod(t, self.tiles_x)
        x0 = tx * self.tile_size
        y0 = ty * self.tile_size
        return (x0, min(x0 + self.tile_size, self.width),
                y0, min(y0 + self.tile_size, self.height))


@dataclass
class FrameGradients:
    """Gradients of a scalar objective w.r.t. every splat parameter."""

    positions: np.ndarray   # (n, 2)
    cholesky: np.ndarray    # (n, 3)
    colors: np.ndarray      # (n, 3)
    importance: np.ndarray  # (n,)


def build_tile_index(frame: SplatFrame, width: int, height: int,
                     tile_size: int = TILE_SIZE) -> TileIndex:
    """Index splats into the tiles their support boxes intersect."""
    if width <= 0 or height <= 0:
        raise ValueError("zero-area image")
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    n_tiles = tiles_x * tiles_y
    x0, x1, y0, y1 = pixel_bounds(frame.positions, frame.cholesky, width, height)
    valid = (x0 <= x1) & (y0 <= y1)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return TileIndex(width, height, tile_size, tiles_x, tiles_y,
                         [np.empty(0, dtype=np.int64)] * n_tiles)
    tx0 = x0[idx] // tile_size
    tx1 = x1[idx] // tile_size
    ty0 = y0[idx] // tile_size
    ty1 = y1[idx] // tile_size
    spans_x = tx1 - tx0 + 1
    spans_y = ty1 - ty0 + 1
    counts = spans_x * spans_y
    total = int(counts.sum())
    owner = np.repeat(np.arange(idx.size), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    k = np.arange(total) - np.repeat(starts, counts)
    w = spans_x[owner]
    row = k // w
    col = k - row * w
    tile_of_pair = (ty0[owner] + row) * tiles_x + (tx0[owner] + col)
    splat_of_pair = idx[owner]
    # Stable sort by tile keeps ascending splat order within each tile.
    order = np.argsort(tile_of_pair, kind="stable")
    tile_sorted = tile_of_pair[order]
    splat_sorted = splat_of_pair[order]
    boundaries = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    lists = [splat_sorted[boundaries[t]:boundaries[t + 1]] for t in range(n_tiles)]
    return TileIndex(width, height, tile_size, tiles_x, tiles_y, lists)


def _enumerate_pairs(positions, cholesky, width, height, splat_ids=None,
                     rect=None):
    """Flat (splat, pixel) pairs for the given splats, splat-major order.

    Returns (splat_idx, pix_flat, dx, dy) where pix_flat indexes the full
    image row-major and (dx, dy) is pixel center minus splat position.
    ``rect`` restricts pixels to (x_lo, x_hi, y_lo, y_hi), exclusive his.
    """
    if splat_ids is None:
        splat_ids = np.arange(positions.shape[0])
    x0, x1, y0, y1 = pixel_bounds(positions[splat_ids], cholesky[splat_ids],
                                  width, height)
    if rect is not None:
        rx0, rx1, ry0, ry1 = rect
        np.maximum(x0, rx0, out=x0)
        np.minimum(x1, rx1 - 1, out=x1)
        np.maximum(y0, ry0, out=y0)
        np.minimum(y1, ry1 - 1, out=y1)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    valid = (bw > 0) & (bh > 0)
    bw = np.where(valid, bw, 0)
    bh = np.where(valid, bh, 0)
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e, np.empty(0), np.empty(0)
    owner = np.repeat(np.arange(splat_ids.size), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    k = np.arange(total) - np.repeat(starts, counts)
    w = bw[owner]
    row = k // w
    col = k - row * w
    px = x0[owner] + col
    py = y0[owner] + row
    splat_idx = splat_ids[owner]
    pix_flat = py * width + px
    dx = (px + 0.5) - positions[splat_idx, 0]
    dy = (py + 0.5) - positions[splat_idx, 1]
    return splat_idx, pix_flat, dx, dy


class _PairCache:
    """Forward-pass pair data reused by the fused backward pass."""

    __slots__ = ("splat_idx", "pix_flat", "dx", "dy", "u1", "u2", "g",
                 "eff_colors", "width", "height", "n", "use_importance")


def _forward_pairs(frame: SplatFrame, width: int, height: int,
                   use_importance: bool) -> tuple[np.ndarray, _PairCache]:
    """Render into a float64 accumulation image, keeping pair data."""
    n = len(frame)
    splat_idx, pix_flat, dx, dy = _enumerate_pairs(
        frame.positions, frame.cholesky, width, height)
    l1 = frame.cholesky[:, 0]
    l2 = frame.cholesky[:, 1]
    l3 = frame.cholesky[:, 2]
    u1 = dx / l1[splat_idx]
    u2 = (dy - l2[splat_idx] * u1) / l3[splat_idx]
    g = np.exp(-0.5 * (u1 * u1 + u2 * u2))
    if use_importance:
        eff_colors = frame.colors * frame.importance[:, None]
    else:
        eff_colors = frame.colors
    image = np.zeros((height * width, 3), dtype=np.float64)
    for ch in range(3):
        image[:, ch] = np.bincount(pix_flat, weights=g * eff_colors[splat_idx, ch],
                                   minlength=height * width)
    cache = _PairCache()
    cache.splat_idx, cache.pix_flat = splat_idx, pix_flat
    cache.dx, cache.dy, cache.u1, cache.u2, cache.g = dx, dy, u1, u2, g
    cache.eff_colors = eff_colors
    cache.width, cache.height, cache.n = width, height, n
    cache.use_importance = use_importance
    return image.reshape(height, width, 3), cache


def _backward_pairs(frame: SplatFrame, cache: _PairCache,
                    grad_image: np.ndarray) -> FrameGradients:
    """Gradients of sum(grad_image * rendered) from cached pair data."""
    n = cache.n
    si, g = cache.splat_idx, cache.g
    grad_flat = np.ascontiguousarray(grad_image, dtype=np.float64).reshape(-1, 3)
    grad_pairs = grad_flat[cache.pix_flat]

    color_grad = np.empty((n, 3), dtype=np.float64)
    for ch in range(3):
        color_grad[:, ch] = np.bincount(si, weights=g * grad_pairs[:, ch],
                                        minlength=n)
    # d/dw comes from the same per-channel sums: sum_p (c' . G) g.
    importance_grad = np.einsum("nc,nc->n", frame.colors, color_grad)
    if cache.use_importance:
        color_grad *= frame.importance[:, None]

    # s = (effective color . grad) * g, the pull each pair exerts on sigma.
    s = g * np.einsum("pc,pc->p", cache.eff_colors[si], grad_pairs)

    l1 = frame.cholesky[:, 0]
    l2 = frame.cholesky[:, 1]
    l3 = frame.cholesky[:, 2]
    # Sigma^-1 entries in closed form.
    inv_a = (l2 * l2 + l3 * l3) / (l1 * l1 * l3 * l3)
    inv_b = -l2 / (l1 * l3 * l3)
    inv_c = 1.0 / (l3 * l3)
    dx, dy, u1, u2 = cache.dx, cache.dy, cache.u1, cache.u2
    qx = inv_a[si] * dx + inv_b[si] * dy
    qy = inv_b[si] * dx + inv_c[si] * dy
    pos_grad = np.empty((n, 2), dtype=np.float64)
    pos_grad[:, 0] = np.bincount(si, weights=s * qx, minlength=n)
    pos_grad[:, 1] = np.bincount(si, weights=s * qy, minlength=n)

    # dsigma/dl via u = L^-1 d.
    l1p, l3p = l1[si], l3[si]
    ds_dl1 = (u1 / l1p) * (u2 * (l2[si] / l3p) - u1)
    ds_dl2 = -(u1 * u2) / l3p
    ds_dl3 = -(u2 * u2) / l3p
    chol_grad = np.empty((n, 3), dtype=np.float64)
    chol_grad[:, 0] = np.bincount(si, weights=-s * ds_dl1, minlength=n)
    chol_grad[:, 1] = np.bincount(si, weights=-s * ds_dl2, minlength=n)
    chol_grad[:, 2] = np.bincount(si, weights=-s * ds_dl3, minlength=n)
    return FrameGradients(pos_grad, chol_grad, color_grad, importance_grad)


def render_accum(frame: SplatFrame, width: int, height: int,
                 use_importance: bool = False) -> np.ndarray:
    """Float64 accumulation image (internal fitting / oracle entry point)."""
    if width <= 0 or height <= 0:
        raise ValueError("zero-area image")
    image, _ = _forward_pairs(frame, width, height, use_importance)
    return image


def _render_tile(frame, index, t, use_importance, eff_colors, out):
    ids = index.lists[t]
    x0, x1, y0, y1 = index.tile_rect(t)
    th, tw = y1 - y0, x1 - x0
    if ids.size == 0:
        out[y0:y1, x0:x1, :] = 0.0
        return
    splat_idx, pix_flat, dx, dy = _enumerate_pairs(
        frame.positions, frame.cholesky, index.width, index.height,
        splat_ids=ids, rect=(x0, x1, y0, y1))
    l1 = frame.cholesky[:, 0]
    l2 = frame.cholesky[:, 1]
    l3 = frame.cholesky[:, 2]
    g = np.exp(-mahalanobis_exponent(dx, dy, l1[splat_idx], l2[splat_idx],
                                     l3[splat_idx]))
    # Local flat index within the tile.
    py, px = divmod(pix_flat, index.width)
    local = (py - y0) * tw + (px - x0)
    tile = np.zeros((th * tw, 3), dtype=np.float64)
    for ch in range(3):
        tile[:, ch] = np.bincount(local, weights=g * eff_colors[splat_idx, ch],
                                  minlength=th * tw)
    out[y0:y1, x0:x1, :] = tile.reshape(th, tw, 3)


def render(frame: SplatFrame, width: int, height: int,
           use_importance: bool = False, workers: int = 1,
           tile_size: int = TILE_SIZE) -> np.ndarray:
    """Render a frame to an (H, W, 3) float32 image.

    Tiles partition the image, so worker count cannot change any pixel:
    each tile owns a disjoint output region and accumulates its splat list
    in ascending index order.
    """
    if width <= 0 or height <= 0:
        raise ValueError("zero-area image")
    index = build_tile_index(frame, width, height, tile_size)
    if use_importance:
        eff_colors = frame.colors * frame.importance[:, None]
    else:
        eff_colors = frame.colors
    out = np.empty((height, width, 3), dtype=np.float64)
    n_tiles = index.tiles_x * index.tiles_y
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(
                lambda t: _render_tile(frame, index, t, use_importance,
                                       eff_colors, out),
                range(n_tiles)))
    else:
        for t in range(n_tiles):
            _render_tile(frame, index, t, use_importance, eff_colors, out)
    return out.astype(np.float32)


def render_backward(frame: SplatFrame, grad_image: np.ndarray,
                    use_importance: bool = False) -> FrameGradients:
    """Analytic gradients of sum(grad_image * render(frame)).

    Recomputes pair data rather than caching the forward pass, keeping
    memory at O(pairs) for the call itself.  The support cutoff matches
    the forward pass exactly, so gradients outside it are zero.
    """
    grad_image = np.asarray(grad_image)
    if grad_image.ndim != 3 or grad_image.shape[2] != 3:
        raise ValueError("grad_image must be (H, W, 3)")
    height, width = grad_image.shape[:2]
    _, cache = _forward_pairs(frame, width, height, use_importance)
    return _backward_pairs(frame, cache, grad_image)
