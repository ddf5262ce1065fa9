"""Foreground/background disentanglement from joint-attention maps.

Subject-prompt rows of the text->video quadrant and subject-prompt columns
of the video->text quadrant are summed per video token and averaged over
blocks, giving a saliency volume; the most salient tokens of each frame
form the foreground mask.
"""
import math
from dataclasses import dataclass

import numpy as np

from ._frac import ceil_fraction
from .errors import ConfigError, ShapeError
from .latent import TokenLayout


@dataclass(frozen=True)
class SaliencyVolume:
    layout: TokenLayout
    values: np.ndarray  # (n,)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.layout.n,):
            raise ShapeError(f"saliency has shape {v.shape}, layout needs ({self.layout.n},)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ShapeError("saliency must be finite and non-negative")
        object.__setattr__(self, "values", v)

    def volume(self):
        L = self.layout
        return self.values.reshape(L.frames, L.height, L.width)


@dataclass(frozen=True)
class ForegroundMask:
    layout: TokenLayout
    indices: np.ndarray  # sorted unique token indices

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx[0] < 0 or idx[-1] >= self.layout.n or np.any(np.diff(idx) <= 0)):
            raise ShapeError("mask indices must be strictly increasing and inside the layout")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def frame_members(self, f):
        sl = self.layout.frame_slice(f)
        return self.indices[(self.indices >= sl.start) & (self.indices < sl.stop)]

    @classmethod
    def empty(cls, layout):
        return cls(layout, np.zeros(0, dtype=np.int64))


@dataclass(frozen=True)
class TopFraction:
    q: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"top_fraction q must lie in (0, 1], got {self.q}")


@dataclass(frozen=True)
class Threshold:
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"threshold tau must lie in (0, 1], got {self.tau}")


def make_policy(name, value=None):
    if name == "top_fraction":
        return TopFraction(0.25 if value is None else float(value))
    if name == "threshold":
        return Threshold(0.5 if value is None else float(value))
    raise ConfigError(f"unknown selection policy {name!r}")


def aggregate_subject_saliency(traces, subject_indices, layout):
    if not traces:
        raise ShapeError("need at least one block trace")
    subjects = [int(s) for s in subject_indices]
    if not subjects:
        raise ShapeError("need at least one subject index")
    terms = []
    for trace in traces:
        a = getattr(trace, "attn", trace)  # BlockTrace or bare AttentionMap
        if a.n != layout.n:
            raise ShapeError(f"trace has {a.n} video tokens, layout has {layout.n}")
        if min(subjects) < 0 or max(subjects) >= a.m:
            raise ShapeError(f"subject indices {subjects} out of range for m={a.m}")
        for s in subjects:
            terms.append(a.tv[s])
            terms.append(a.vt[:, s])
    stacked = np.stack(terms, axis=1)  # (n, 2*S*B)
    # correctly rounded sums: independent of block and subject order
    sums = np.array([math.fsum(row) for row in stacked])
    return SaliencyVolume(layout, sums / len(traces))


def select_foreground(s, policy):
    layout = s.layout
    hw = layout.frame_size
    picked = []
    for f in range(layout.frames):
        sl = layout.frame_slice(f)
        vals = s.values[sl]
        if isinstance(policy, TopFraction):
            k = ceil_fraction(policy.q, hw)
            order = np.argsort(-vals, kind="stable")  # ties -> lower index first
            local = np.sort(order[:k])
        elif isinstance(policy, Threshold):
            local = np.flatnonzero(vals >= policy.tau * vals.max())
        else:
            raise ConfigError(f"unsupported policy {policy!r}")
        picked.append(local + sl.start)
    return ForegroundMask(layout, np.concatenate(picked))


def gather_reference_kv(trace, mask):
    """Cached video K/V rows at the mask's token indices, per head."""
    idx = mask.indices
    n = trace.k_video.shape[1]
    if idx.size and idx[-1] >= n:
        raise ShapeError(f"mask index {idx[-1]} out of range for {n} cached tokens")
    return trace.k_video[:, idx], trace.v_video[:, idx]
