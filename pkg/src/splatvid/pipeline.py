"""End-to-end training pipeline: pre-train passes, key-frame selection,
per-frame initialization, inject -> fit -> prune -> fold.

Key-frames are fitted from random initialization at the full rate-control
count N and pruned to 0.9N.  Predicted frames inherit the previous
finalized set, gain 0.1N fresh splats, are fitted with importance weights
enabled, pruned back, and folded.  Pre-training of individual frames is
embarrassingly parallel; the main loop is sequential because each
predicted frame depends on its predecessor.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .keyframes import KeyframeSet, LossProfile, select_keyframes
from .lifecycle import LifecyclePlan, fold_importance, inject, prune
from .splats import FRAME_I, FRAME_P, INJECTED, SplatFrame
from .train import TrainConfig, TrainReport, fit

# Seed-derivation tags so every stochastic stage has its own stream.
_TAG_PRETRAIN_INIT = 0
_TAG_MAIN_INIT = 1
_TAG_INJECT = 2


@dataclass
class EncodeJob:
    """Everything needed to encode one clip."""

    frames: np.ndarray          # (T, H, W, 3) in [0, 1]
    config: TrainConfig
    rate_control_n: int
    quant: "QuantConfig | None" = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError("frames must be (T, H, W, 3)")
        if self.frames.shape[0] < 1:
            raise ValueError("need at least one frame")
        plan = self.plan()
        if self.rate_control_n < plan.n_prune + 1:
            raise ValueError("rate-control N too small for the prune fraction")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def plan(self) -> LifecyclePlan:
        return LifecyclePlan.from_config(
            self.rate_control_n, self.config.prune_fraction,
            self.config.augment_fraction)


@dataclass
class EncodedSequence:
    """Finalized splat frames plus training metadata."""

    frames: list            # list[SplatFrame], importance folded to 1
    keyframes: KeyframeSet
    reports: list           # list[TrainReport]
    width: int
    height: int
    rate_control_n: int

    def __post_init__(self):
        for t, frame in enumerate(self.frames, start=1):
            expected = FRAME_I if t in self.keyframes else FRAME_P
            if frame.kind != expected:
                raise ValueError(f"frame {t} kind {frame.kind} does not match "
                                 f"key-frame set")


def random_init_frame(n: int, target: np.ndarray, seed) -> SplatFrame:
    """Fresh frame of n splats: uniform positions, coarse isotropic shape.

    Colors are sampled from the target at each splat position, scaled so
    the overlapping initial render matches the target's mean level (the
    sum of neighbors at coverage 2*pi*d^2/(H*W) would otherwise overshoot
    by roughly that factor).
    """
    if n < 1:
        raise ValueError("need at least one splat")
    target = np.asarray(target)
    height, width = target.shape[:2]
    rng = np.random.default_rng(seed)
    positions = rng.uniform((0.0, 0.0), (width, height), size=(n, 2))
    diagonal = np.hypot(width, height)
    scale = diagonal / np.sqrt(n)
    cholesky = np.tile([scale, 0.0, scale], (n, 1))
    px = np.clip(positions[:, 0].astype(np.int64), 0, width - 1)
    py = np.clip(positions[:, 1].astype(np.int64), 0, height - 1)
    coverage = (width * height) / (2.0 * np.pi * diagonal * diagonal)
    colors = coverage * target[py, px, :].astype(np.float64)
    return SplatFrame(positions, cholesky, colors, np.ones(n), FRAME_I,
                      np.full(n, INJECTED, dtype=np.int32))


def _pretrain_one(job: EncodeJob, t: int) -> tuple[SplatFrame, float]:
    target = job.frames[t - 1]
    init = random_init_frame(job.rate_control_n, target,
                             [job.config.seed, t, _TAG_PRETRAIN_INIT])
    fitted, report = fit(init, target, job.config,
                         job.config.pretrain_iterations,
                         optimize_importance=False)
    return fitted, report.final_loss


def _pretrain_p_one(job: EncodeJob, t: int, prev_i: SplatFrame) -> float:
    target = job.frames[t - 1]
    _, report = fit(prev_i, target, job.config, job.config.pretrain_iterations,
                    optimize_importance=False)
    return report.final_loss


def pretrain_pass(job: EncodeJob, workers: int = 1) -> LossProfile:
    """Scratch-train and predict-train every frame briefly, returning losses.

    Each frame is first fitted from random initialization; each frame
    after the first is then fitted starting from the previous frame's
    scratch result.  Frame-level runs are independent and fan out across
    workers; results merge by frame index so the profile is deterministic.
    """
    t_count = job.frame_count
    frame_ids = list(range(1, t_count + 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            i_results = list(pool.map(lambda t: _pretrain_one(job, t), frame_ids))
    else:
        i_results = [_pretrain_one(job, t) for t in frame_ids]
    i_frames = [frame for frame, _ in i_results]
    i_losses = np.asarray([loss for _, loss in i_results])
    if t_count == 1:
        return LossProfile(i_losses, np.empty(0))
    p_ids = frame_ids[1:]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            p_losses = list(pool.map(
                lambda t: _pretrain_p_one(job, t, i_frames[t - 2]), p_ids))
    else:
        p_losses = [_pretrain_p_one(job, t, i_frames[t - 2]) for t in p_ids]
    return LossProfile(i_losses, np.asarray(p_losses))


def _inherit(prev_final: SplatFrame) -> SplatFrame:
    """Start a predicted frame from the previous finalized set."""
    out = prev_final.copy()
    out.kind = FRAME_P
    out.prev_slots = np.arange(len(out), dtype=np.int32)
    return out


def encode_sequence(job: EncodeJob, use_gsa: bool = True, use_gsp: bool = True,
                    use_dks: bool = True, max_keyframe_interval: int | None = None,
                    budget: int | None = None, workers: int = 1,
                    progress=None) -> EncodedSequence:
    """Run the full training pipeline over a clip.

    The ablation switches each disable exactly one mechanism: use_gsa
    controls splat injection into predicted frames, use_gsp controls
    importance optimization plus pruning/folding, use_dks controls
    loss-gap key-frame detection (off means only frame 1, plus any forced
    periodic key-frames from max_keyframe_interval).
    """
    t_count = job.frame_count
    plan = job.plan()
    budget = budget if budget is not None else job.config.max_iterations

    if use_dks and t_count > 1:
        profile = pretrain_pass(job, workers=workers)
        keyframes = set(select_keyframes(profile))
    else:
        keyframes = {1}
    if max_keyframe_interval is not None:
        if max_keyframe_interval < 1:
            raise ValueError("max_keyframe_interval must be >= 1")
        last = 1
        for t in range(2, t_count + 1):
            if t in keyframes:
                last = t
            elif t - last >= max_keyframe_interval:
                keyframes.add(t)
                last = t
    keyframe_set = KeyframeSet(tuple(sorted(keyframes)))

    finalized: list[SplatFrame] = []
    reports: list[TrainReport] = []
    prev: SplatFrame | None = None
    for t in range(1, t_count + 1):
        target = job.frames[t - 1]
        if t in keyframe_set or prev is None:
            frame = random_init_frame(job.rate_control_n, target,
                                      [job.config.seed, t, _TAG_MAIN_INIT])
            fitted, report = fit(frame, target, job.config, budget,
                                 optimize_importance=use_gsp)
            if use_gsp:
                fitted = fold_importance(prune(fitted, plan.n_prune))
            fitted.kind = FRAME_I
        else:
            frame = _inherit(prev)
            if use_gsa:
                frame = inject(frame, plan.n_inject, (job.width, job.height),
                               [job.config.seed, t, _TAG_INJECT], target=target)
            else:
                frame.importance = np.ones(len(frame))
            fitted, report = fit(frame, target, job.config, budget,
                                 optimize_importance=use_gsp)
            if use_gsp and use_gsa:
                # Prune back exactly what injection added, conserving size.
                fitted = prune(fitted, plan.n_inject)
            if use_gsp:
                fitted = fold_importance(fitted)
            fitted.kind = FRAME_P
        finalized.append(fitted)
        reports.append(report)
        prev = fitted
        if progress is not None:
            progress(t, report.iterations_used, report.final_loss)
    return EncodedSequence(finalized, keyframe_set, reports,
                           job.width, job.height, job.rate_control_n)
