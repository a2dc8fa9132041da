"""Dynamic key-frame selection from pre-training loss gaps.

A frame is declared a key-frame when its predicted-vs-scratch pre-training
loss gap sticks out of its local sliding window by more than three local
standard deviations.  Frame indices are 1-based throughout, matching the
video's frame numbering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossProfile:
    """Per-frame pre-training losses and their gaps.

    i_losses[t-1] is the scratch loss of frame t (t = 1..T);
    p_losses[t-2] is the predicted loss of frame t (t = 2..T);
    deltas[t-2] = p_losses[t-2] - i_losses[t-1].
    """

    i_losses: np.ndarray
    p_losses: np.ndarray
    deltas: np.ndarray = field(init=False)

    def __post_init__(self):
        self.i_losses = np.asarray(self.i_losses, dtype=np.float64)
        self.p_losses = np.asarray(self.p_losses, dtype=np.float64)
        if self.i_losses.ndim != 1 or self.p_losses.ndim != 1:
            raise ValueError("losses must be 1-D")
        if len(self.p_losses) != max(len(self.i_losses) - 1, 0):
            raise ValueError("need one predicted loss per frame after the first")
        self.deltas = self.p_losses - self.i_losses[1:]

    @property
    def frame_count(self) -> int:
        return len(self.i_losses)


@dataclass(frozen=True)
class KeyframeSet:
    """Sorted, unique 1-based key-frame indices; always contains frame 1."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if not idx or idx[0] != 1:
            raise ValueError("key-frame set must start at frame 1")
        object.__setattr__(self, "indices", idx)

    def __contains__(self, t: int) -> bool:
        return t in self.indices

    def __iter__(self):
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


def select_keyframes(profile: LossProfile,
                     window_half_width: int = 10) -> KeyframeSet:
    """Pick frame 1 plus every frame whose loss gap is a local 3-sigma outlier.

    The window around frame t spans frames max(2, t - w) .. min(T, t + w)
    and includes the candidate itself; its mean and population standard
    deviation form the threshold.  Equal gaps everywhere select nothing
    beyond frame 1, since the inequality is strict.
    """
    if window_half_width < 1:
        raise ValueError("window_half_width must be >= 1")
    t_count = profile.frame_count
    if t_count < 2:
        return KeyframeSet((1,))
    deltas = profile.deltas
    selected = [1]
    for t in range(2, t_count + 1):
        lo = max(2, t - window_half_width)
        hi = min(t_count, t + window_half_width)
        window = deltas[lo - 2:hi - 1]
        mu = float(np.mean(window))
        sigma = float(np.std(window))
        if deltas[t - 2] > mu + 3.0 * sigma:
            selected.append(t)
    return KeyframeSet(tuple(selected))
