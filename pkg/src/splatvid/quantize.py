"""Scalar and vector quantizers for splat parameters.

Shape parameters use b-bit asymmetric quantization with a per-component
scale/offset pair; colors use residual vector quantization: M cascaded
stages, each encoding the residual left by the previous stages against a
B-entry codebook.  Codebooks are trained per frame with seeded k-means
followed by a short gradient fine-tune.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

# Scale floor for constant inputs.
_GAMMA_FLOOR = 1e-12
_KMEANS_ITERS = 25


@dataclass
class QuantConfig:
    """Bit allocation and codebook training knobs."""

    cholesky_bits: int = 6
    rvq_stages: int = 2
    rvq_codebook_size: int = 256
    commitment_weight: float = 0.25
    finetune_iterations: int = 2000

    def __post_init__(self):
        if not 1 <= self.cholesky_bits <= 16:
            raise ValueError("cholesky_bits must be in [1, 16]")
        if self.rvq_stages < 1:
            raise ValueError("need at least one RVQ stage")
        b = self.rvq_codebook_size
        if b < 1 or b > 65536 or b & (b - 1):
            raise ValueError("codebook size must be a power of two <= 65536")
        if self.finetune_iterations < 0:
            raise ValueError("finetune_iterations must be >= 0")


def quantize_asymmetric(values: np.ndarray, bits: int):
    """Quantize to b-bit codes with offset beta = min and scale gamma.

    codes = floor(clamp((v - beta) / gamma, 0, 2^b - 1)); dequantization
    is codes * gamma + beta, with per-element error at most gamma.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one value")
    if bits < 1:
        raise ValueError("bits must be >= 1")
    beta = float(values.min())
    top = float(2 ** bits - 1)
    gamma = (float(values.max()) - beta) / top
    if gamma < _GAMMA_FLOOR:
        gamma = _GAMMA_FLOOR
    codes = np.floor(np.clip((values - beta) / gamma, 0.0, top))
    return codes.astype(np.uint16), gamma, beta


def dequantize_asymmetric(codes: np.ndarray, gamma: float, beta: float) -> np.ndarray:
    return codes.astype(np.float64) * gamma + beta


def rvq_encode(colors: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Greedy stage-wise nearest-codeword indices, ties to the lower index."""
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    stages = codebooks.shape[0]
    indices = np.empty((colors.shape[0], stages), dtype=np.uint16)
    residual = colors.copy()
    for k in range(stages):
        book = codebooks[k]
        d2 = ((residual[:, None, :] - book[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
        indices[:, k] = idx
        residual -= book[idx]
    return indices


def rvq_decode(indices: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    indices = np.atleast_2d(indices)
    out = np.zeros((indices.shape[0], codebooks.shape[2]))
    for k in range(codebooks.shape[0]):
        out += codebooks[k][indices[:, k]]
    return out


def _kmeans_stage(points: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Seeded k-means++ centers, padded by cycling when points are scarce."""
    k = min(size, points.shape[0])
    km = KMeans(n_clusters=k, init="k-means++", n_init=1,
                max_iter=_KMEANS_ITERS, random_state=seed)
    km.fit(points)
    centers = km.cluster_centers_.astype(np.float64)
    if k < size:
        reps = -(-size // k)
        centers = np.tile(centers, (reps, 1))[:size]
    return centers


def train_codebooks(colors: np.ndarray, config: QuantConfig, seed) -> np.ndarray:
    """Train per-stage codebooks on residuals, then fine-tune jointly.

    Fine-tuning runs config.finetune_iterations Adam steps on the
    codewords against reconstruction error plus the commitment term
    (straight-through assignments, re-encoded every step).
    """
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    if colors.size == 0:
        raise ValueError("no colors to train on")
    rng = np.random.default_rng(seed)
    stage_seed = int(rng.integers(0, 2 ** 31 - 1))
    books = np.empty((config.rvq_stages, config.rvq_codebook_size,
                      colors.shape[1]))
    residual = colors.copy()
    for k in range(config.rvq_stages):
        books[k] = _kmeans_stage(residual, config.rvq_codebook_size,
                                 stage_seed + k)
        idx = rvq_encode(residual, books[None, k])[:, 0]
        residual = residual - books[k][idx]

    if config.finetune_iterations == 0:
        return books

    m = np.zeros_like(books)
    v = np.zeros_like(books)
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
    count = colors.shape[0]
    for it in range(1, config.finetune_iterations + 1):
        idx = rvq_encode(colors, books)
        recon = rvq_decode(idx, books)
        err = recon - colors
        # d(mean ||err||^2)/dC[k][j] accumulates 2*err over assigned colors.
        grad = np.zeros_like(books)
        for k in range(books.shape[0]):
            for ch in range(books.shape[2]):
                grad[k, :, ch] = np.bincount(
                    idx[:, k], weights=err[:, ch],
                    minlength=books.shape[1])
        grad *= 2.0 / count
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        books -= lr * (m / (1 - beta1 ** it)) / (np.sqrt(v / (1 - beta2 ** it)) + eps)
    return books


def commitment_loss(colors: np.ndarray, codebooks: np.ndarray,
                    weight: float) -> float:
    """weight * mean squared distance of colors to their reconstructions."""
    idx = rvq_encode(colors, codebooks)
    recon = rvq_decode(idx, codebooks)
    return weight * float(np.mean(np.sum((colors - recon) ** 2, axis=1)))
