"""Frame ingestion/emission, quality metrics, and synthetic test clips.

Clips are (T, H, W, 3) float32 arrays in [0, 1] linear RGB.  8-bit inputs
map linearly ([0, 255] -> [0, 1]) and round-trip losslessly.  Two on-disk
forms are supported: a packed raw RGB24 file with a 16-byte header, and a
directory of zero-padded numbered PNG frames.
"""

from __future__ import annotations

import math
import os
import re
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d

RAW_MAGIC = b"GSRW"

# Standard multi-scale structural-similarity weights and constants.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def to_float(frames_u8: np.ndarray) -> np.ndarray:
    return frames_u8.astype(np.float32) / 255.0


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over clamped [0, 1] RGB pixels.

    Identical images return math.inf rather than raising.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ac = np.clip(a.astype(np.float64), 0.0, 1.0)
    bc = np.clip(b.astype(np.float64), 0.0, 1.0)
    mse = float(np.mean((ac - bc) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = _SSIM_WIN, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, kernel: np.ndarray):
    """Mean SSIM and mean contrast-structure term, valid-window filtering."""
    mu_x = convolve2d(x, kernel, mode="valid")
    mu_y = convolve2d(y, kernel, mode="valid")
    xx = convolve2d(x * x, kernel, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, kernel, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, kernel, mode="valid") - mu_x * mu_y
    cs_map = (2.0 * xy + _SSIM_C2) / (xx + yy + _SSIM_C2)
    l_map = (2.0 * mu_x * mu_y + _SSIM_C1) / (mu_x * mu_x + mu_y * mu_y + _SSIM_C1)
    return float(np.mean(l_map * cs_map)), float(np.mean(cs_map))


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    x = x[:h - h % 2, :w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = 5) -> float:
    """Multi-scale structural similarity over [0, 1] RGB images.

    Uses the standard 5-scale weighting with an 11x11 Gaussian window
    (sigma 1.5).  Images too small for the requested scale count fall back
    to fewer scales (renormalized weights) with a warning.  Symmetric in
    its arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    min_dim = min(a.shape[0], a.shape[1])
    max_scales = 0
    d = min_dim
    while d >= _SSIM_WIN and max_scales < scales:
        max_scales += 1
        d //= 2
    if max_scales == 0:
        raise ValueError(f"image too small for an {_SSIM_WIN}x{_SSIM_WIN} window")
    if max_scales < scales:
        warnings.warn(f"reducing ms-ssim scales from {scales} to {max_scales} "
                      f"for {a.shape[1]}x{a.shape[0]} input", stacklevel=2)
        scales = max_scales
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    kernel = _gaussian_window()
    channels = a.shape[2]
    values = np.empty(channels)
    for ch in range(channels):
        x, y = a[:, :, ch], b[:, :, ch]
        mcs = []
        ssim_val = 1.0
        for s in range(scales):
            ssim_val, cs = _ssim_channel(x, y, kernel)
            mcs.append(max(cs, 0.0))
            if s < scales - 1:
                x, y = _downsample2(x), _downsample2(y)
        terms = [max(ssim_val, 0.0) if s == scales - 1 else mcs[s]
                 for s in range(scales)]
        values[ch] = np.prod(np.asarray(terms) ** weights)
    return float(values.mean())


# ---------------------------------------------------------------------------
# Synthetic clips


@dataclass
class ClipSource:
    """A loaded or generated clip: uniform-size frames in [0, 1] RGB."""

    kind: str
    width: int
    height: int
    frame_count: int
    data: np.ndarray  # (T, H, W, 3) float32

    def frames(self) -> np.ndarray:
        return self.data


def _smooth_texture(width, height, rng, smoothness=6.0, low=0.1, high=0.9):
    tex = rng.uniform(0.0, 1.0, size=(height, width, 3))
    for ch in range(3):
        tex[:, :, ch] = gaussian_filter(tex[:, :, ch], smoothness, mode="reflect")
        lo, hi = tex[:, :, ch].min(), tex[:, :, ch].max()
        span = hi - lo if hi > lo else 1.0
        tex[:, :, ch] = low + (high - low) * (tex[:, :, ch] - lo) / span
    return tex.astype(np.float32)


def _disc(width, height, cx, cy, radius, color, background, edge=1.5):
    yy, xx = np.mgrid[0:height, 0:width]
    dist = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    # Smooth edge: 1 inside, 0 outside, linear ramp of width `edge`.
    mask = np.clip((radius + edge / 2 - dist) / edge, 0.0, 1.0)
    frame = np.empty((height, width, 3), dtype=np.float32)
    for ch in range(3):
        frame[:, :, ch] = background[ch] + (color[ch] - background[ch]) * mask
    return frame


def make_constant_clip(width=64, height=64, frames=5,
                       color=(0.3, 0.5, 0.7)) -> ClipSource:
    frame = np.empty((height, width, 3), dtype=np.float32)
    frame[:] = np.asarray(color, dtype=np.float32)
    data = np.repeat(frame[None], frames, axis=0)
    return ClipSource("constant", width, height, frames, data)


def make_translating_circle_clip(width=64, height=64, frames=10, radius=None,
                                 color=(0.9, 0.25, 0.2),
                                 background=(0.15, 0.18, 0.22)) -> ClipSource:
    """A soft-edged circle gliding linearly from left to right."""
    radius = radius or width / 6.0
    data = np.empty((frames, height, width, 3), dtype=np.float32)
    cy = height / 2.0
    lo, hi = radius + 2.0, width - radius - 2.0
    for t in range(frames):
        frac = t / max(frames - 1, 1)
        cx = lo + frac * (hi - lo)
        data[t] = _disc(width, height, cx, cy, radius, color, background)
    return ClipSource("translating-circle", width, height, frames, data)


def make_jumping_circle_clip(width=64, height=64, frames=2, radius=None,
                             color=(0.9, 0.25, 0.2),
                             background=(0.15, 0.18, 0.22)) -> ClipSource:
    """Circle on the left in frame 1, jumping to the right in frame 2."""
    radius = radius or width / 6.0
    cy = height / 2.0
    left = _disc(width, height, radius + 2.0, cy, radius, color, background)
    right = _disc(width, height, width - radius - 2.0, cy, radius, color, background)
    data = np.empty((frames, height, width, 3), dtype=np.float32)
    data[0] = left
    for t in range(1, frames):
        data[t] = right
    return ClipSource("jumping-circle", width, height, frames, data)


def make_concatenated_clip(width=64, height=64, frames=60, cut_at=30,
                           seed=0) -> ClipSource:
    """Two static textured scenes with a hard cut: frame cut_at starts scene B."""
    if not 1 < cut_at <= frames:
        raise ValueError("cut must land inside the clip")
    rng_a = np.random.default_rng([seed, 1])
    rng_b = np.random.default_rng([seed, 2])
    scene_a = _smooth_texture(width, height, rng_a, smoothness=5.0,
                              low=0.1, high=0.6)
    scene_b = _smooth_texture(width, height, rng_b, smoothness=3.0,
                              low=0.4, high=0.95)
    data = np.empty((frames, height, width, 3), dtype=np.float32)
    data[:cut_at - 1] = scene_a
    data[cut_at - 1:] = scene_b
    return ClipSource("concatenated", width, height, frames, data)


def make_textured_noise_clip(width=64, height=64, frames=5, seed=0,
                             smoothness=4.0) -> ClipSource:
    """A static smooth-noise texture repeated across frames."""
    rng = np.random.default_rng([seed, 3])
    tex = _smooth_texture(width, height, rng, smoothness)
    data = np.repeat(tex[None], frames, axis=0)
    return ClipSource("textured-noise", width, height, frames, data)


_GENERATORS = {
    "constant": make_constant_clip,
    "translating-circle": make_translating_circle_clip,
    "jumping-circle": make_jumping_circle_clip,
    "concatenated": make_concatenated_clip,
    "textured-noise": make_textured_noise_clip,
}


def synth_clip(kind: str, **params) -> ClipSource:
    """Build a deterministic synthetic clip by generator name."""
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic clip kind {kind!r}; "
                         f"choose from {sorted(_GENERATORS)}") from None
    return gen(**params)


# ---------------------------------------------------------------------------
# Clip files


def save_raw_clip(path: str, frames: np.ndarray) -> None:
    """Write a packed RGB24 clip: 16-byte header then tight frames."""
    frames_u8 = to_uint8(np.asarray(frames))
    t, h, w = frames_u8.shape[:3]
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(np.asarray([w, h, t], dtype="<u4").tobytes())
        fh.write(frames_u8.tobytes())


def load_raw_clip(path: str) -> ClipSource:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16 or header[:4] != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw clip file")
        w, h, t = np.frombuffer(header[4:], dtype="<u4")
        data = fh.read()
    expected = int(t) * int(h) * int(w) * 3
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, "
                         f"found {len(data)}")
    frames_u8 = np.frombuffer(data, dtype=np.uint8).reshape(int(t), int(h), int(w), 3)
    return ClipSource("raw-file", int(w), int(h), int(t), to_float(frames_u8))


_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")


def save_image_sequence(directory: str, frames: np.ndarray) -> None:
    """Write frames as zero-padded PNGs: frame_000001.png, ..."""
    os.makedirs(directory, exist_ok=True)
    frames_u8 = to_uint8(np.asarray(frames))
    for t in range(frames_u8.shape[0]):
        PILImage.fromarray(frames_u8[t]).save(
            os.path.join(directory, f"frame_{t + 1:06d}.png"))


def load_image_sequence(directory: str) -> ClipSource:
    entries = []
    for name in os.listdir(directory):
        m = _FRAME_RE.match(name)
        if m:
            entries.append((int(m.group(1)), name))
    if not entries:
        raise ValueError(f"{directory}: no frame_NNNNNN.png files")
    entries.sort()
    frames = []
    for _, name in entries:
        img = PILImage.open(os.path.join(directory, name)).convert("RGB")
        frames.append(np.asarray(img, dtype=np.uint8))
    data = np.stack(frames)
    if data.ndim != 4:
        raise ValueError(f"{directory}: frames have inconsistent sizes")
    t, h, w = data.shape[:3]
    return ClipSource("image-sequence", w, h, t, to_float(data))


def load_clip(path: str) -> ClipSource:
    """Load a clip from a raw file or an image-sequence directory."""
    if os.path.isdir(path):
        return load_image_sequence(path)
    return load_raw_clip(path)
