"""Training clip sampling with randomized strides, and inference partitions."""

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleClipError

DEFAULT_STRIDES = (5, 10, 15, 20, 30, 40)


@dataclass(frozen=True)
class ClipSpec:
    start: int
    stride: int
    length: int

    def __post_init__(self):
        if self.start < 0 or self.stride < 1 or self.length < 1:
            raise ValueError(f"invalid clip {self}")

    @property
    def indices(self):
        return list(range(self.start, self.start + self.length * self.stride, self.stride))

    @property
    def last(self):
        return self.start + (self.length - 1) * self.stride

    def to_dict(self):
        return {"start": self.start, "stride": self.stride, "length": self.length, "indices": self.indices}


def normalize_strides(strides):
    out = sorted(set(int(r) for r in strides))
    if not out or out[0] < 1:
        raise ValueError(f"stride set must be a non-empty set of positive integers, got {strides}")
    return tuple(out)


def sample_clip(video_len, length, strides, rng):
    """Draw a stride uniformly from the feasible ones, then a start uniformly.

    A stride r is feasible when ``1 + (length - 1) * r <= video_len``.
    """
    strides = normalize_strides(strides)
    if length < 1:
        raise ValueError("clip length must be positive")
    feasible = [r for r in strides if 1 + (length - 1) * r <= video_len]
    if not feasible:
        need = 1 + (length - 1) * strides[0]
        raise InfeasibleClipError(
            f"video of {video_len} frames is too short for {length}-frame clips; "
            f"stride {strides[0]} needs at least {need} frames"
        )
    r = feasible[int(rng.integers(len(feasible)))]
    u = int(rng.integers(video_len - (length - 1) * r))
    clip = ClipSpec(u, r, length)
    assert clip.last < video_len
    return clip


def partition_video(video_len, length):
    """Consecutive stride-1 clips covering the video; the last may be short."""
    if length < 1:
        raise ValueError("clip length must be positive")
    return [
        ClipSpec(u, 1, min(length, video_len - u)) for u in range(0, video_len, length)
    ]


def temporal_index(clip, t):
    """Embedding row for 1-based position ``t`` inside ``clip``."""
    if not 1 <= t <= clip.length:
        raise IndexError(f"position {t} outside clip of length {clip.length}")
    return t - 1


def make_rng(seed):
    return np.random.default_rng(seed)
