"""Fits a splat frame to a target image by L2 gradient descent.

The optimizer is Adam (bias-corrected first/second moments) with one
global learning rate halved on a fixed interval.  Position gradients are
scaled by the image diagonal so a single rate works across resolutions.
The fit is a pure function of its inputs: same frame, target, config and
budget give a bit-identical result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import fit_backward, fit_forward
from .splats import SplatFrame, clamp_cholesky


class FitDivergedError(RuntimeError):
    """Loss became non-finite during fitting."""

    def __init__(self, iteration: int, splat_indices):
        self.iteration = iteration
        self.splat_indices = list(splat_indices)
        super().__init__(
            f"non-finite loss at iteration {iteration}; "
            f"suspect splats {self.splat_indices[:16]}")


@dataclass
class TrainConfig:
    """Optimizer hyperparameters and schedule/lifecycle knobs."""

    learning_rate: float = 1e-3
    lr_halving_interval: int = 20000
    max_iterations: int = 50000
    pretrain_iterations: int = 500
    convergence_window: int = 100
    convergence_delta: float = 1e-7
    prune_fraction: float = 0.10
    augment_fraction: float = 0.10
    seed: int = 0
    # Adam moment decays and epsilon; fixed published defaults.
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        positive = (self.learning_rate, self.lr_halving_interval,
                    self.max_iterations, self.pretrain_iterations,
                    self.convergence_window, self.convergence_delta)
        if any(v <= 0 for v in positive):
            raise ValueError("config values must be positive")
        for f in (self.prune_fraction, self.augment_fraction):
            if not 0.0 < f <= 0.5:
                raise ValueError("fractions must lie in (0, 0.5]")


@dataclass
class TrainReport:
    """Outcome of one fit call.

    loss_trace holds (iteration, loss) per step; its last entry is the
    loss of the returned (best) iterate, which final_loss duplicates.
    """

    final_loss: float
    iterations_used: int
    converged: bool
    loss_trace: list = field(default_factory=list)


def schedule_lr(config: TrainConfig, iteration: int) -> float:
    """Effective learning rate at a 0-based iteration."""
    return config.learning_rate * 2.0 ** (-(iteration // config.lr_halving_interval))


def l2_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean over pixels of the squared-norm pixel difference."""
    rendered = np.asarray(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    h, w = rendered.shape[:2]
    diff = rendered.astype(np.float64) - target.astype(np.float64)
    return float(np.einsum("ijk,ijk->", diff, diff) / (h * w))


class _Adam:
    def __init__(self, shape, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr, t):
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit(frame: SplatFrame, target: np.ndarray, config: TrainConfig,
        budget: int, optimize_importance: bool = False
        ) -> tuple[SplatFrame, TrainReport]:
    """Optimize a copy of ``frame`` against ``target`` for up to ``budget`` steps.

    Stops early once convergence_window consecutive iterations each change
    the loss by at most convergence_delta.  Returns the lowest-loss iterate
    seen, not necessarily the last one.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    target = np.ascontiguousarray(target, dtype=np.float64)
    height, width = target.shape[:2]
    diagonal = float(np.hypot(width, height))
    cur = frame.copy()

    opt_pos = _Adam((len(cur), 2), config.beta1, config.beta2, config.epsilon)
    opt_chol = _Adam((len(cur), 3), config.beta1, config.beta2, config.epsilon)
    opt_col = _Adam((len(cur), 3), config.beta1, config.beta2, config.epsilon)
    opt_imp = _Adam((len(cur),), config.beta1, config.beta2, config.epsilon)

    trace: list[tuple[int, float]] = []
    best_loss = np.inf
    best_state = None
    prev_loss = None
    streak = 0
    converged = False
    iterations = 0
    grad_scale = 2.0 / (height * width)

    for t in range(budget):
        image, ctx = fit_forward(cur, width, height, optimize_importance)
        diff = image - target
        loss = float(np.einsum("ijk,ijk->", diff, diff) / (height * width))
        iterations = t + 1
        trace.append((t, loss))
        if not np.isfinite(loss):
            bad = np.nonzero(~(
                np.isfinite(cur.positions).all(axis=1)
                & np.isfinite(cur.cholesky).all(axis=1)
                & np.isfinite(cur.colors).all(axis=1)
                & np.isfinite(cur.importance)))[0]
            suspects = bad if bad.size else np.argsort(
                -np.abs(cur.colors).max(axis=1))[:8]
            raise FitDivergedError(t, suspects.tolist())
        if loss < best_loss:
            best_loss = loss
            best_state = (cur.positions.copy(), cur.cholesky.copy(),
                          cur.colors.copy(), cur.importance.copy())
        if prev_loss is not None and abs(loss - prev_loss) <= config.convergence_delta:
            streak += 1
            if streak >= config.convergence_window:
                converged = True
                break
        else:
            streak = 0
        prev_loss = loss

        grads = fit_backward(cur, ctx, diff * grad_scale, optimize_importance)
        lr = schedule_lr(config, t)
        opt_pos.step(cur.positions, grads.positions * diagonal, lr, t + 1)
        opt_chol.step(cur.cholesky, grads.cholesky, lr, t + 1)
        opt_col.step(cur.colors, grads.colors, lr, t + 1)
        if optimize_importance:
            opt_imp.step(cur.importance, grads.importance, lr, t + 1)
        clamp_cholesky(cur.cholesky)
        # Keep centers inside the image so stray splats stay recoverable.
        np.clip(cur.positions[:, 0], 0.0, float(width), out=cur.positions[:, 0])
        np.clip(cur.positions[:, 1], 0.0, float(height), out=cur.positions[:, 1])

    if best_state is not None:
        cur.positions, cur.cholesky, cur.colors, cur.importance = best_state
    if trace and trace[-1][1] != best_loss:
        trace.append((iterations, best_loss))
    report = TrainReport(final_loss=best_loss, iterations_used=iterations,
                         converged=converged, loss_trace=trace)
    return cur, report
