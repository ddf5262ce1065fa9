"""Latent videos, prompt tokens and the token <-> grid position map.

One token per latent cell (1x1x1 patches). Storage is row-major in
``(frame, row, col, channel)`` order, so token ``i`` sits at
``i = f*h*w + y*w + x``.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class LatentVideo:
    data: np.ndarray  # (f, h, w, c)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ShapeError(f"latent video must be 4-D with positive dims, got {arr.shape}")
        _finite(arr, "latent video")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    @property
    def layout(self):
        f, h, w, _ = self.data.shape
        return TokenLayout(f, h, w)

    @property
    def channels(self):
        return self.data.shape[3]


@dataclass(frozen=True)
class TokenLayout:
    frames: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.frames, self.height, self.width) < 1:
            raise ShapeError(f"layout dims must be >= 1, got {self}")

    @property
    def n(self):
        return self.frames * self.height * self.width

    @property
    def frame_size(self):
        return self.height * self.width

    def index(self, f, y, x):
        if not (0 <= f < self.frames and 0 <= y < self.height and 0 <= x < self.width):
            raise ShapeError(f"position {(f, y, x)} outside layout {self}")
        return f * self.height * self.width + y * self.width + x

    def position(self, i):
        if not 0 <= i < self.n:
            raise ShapeError(f"token index {i} outside [0, {self.n})")
        f, rem = divmod(int(i), self.frame_size)
        y, x = divmod(rem, self.width)
        return f, y, x

    def frame_slice(self, f):
        return slice(f * self.frame_size, (f + 1) * self.frame_size)


@dataclass(frozen=True)
class PromptTokens:
    data: np.ndarray  # (m, d)
    subject_indices: tuple = field(default=())

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ShapeError(f"prompt tokens must be a non-empty (m, d) matrix, got {arr.shape}")
        _finite(arr, "prompt tokens")
        idx = tuple(int(i) for i in self.subject_indices)
        if not idx:
            raise ShapeError("subject_indices must be non-empty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ShapeError(f"subject_indices must be strictly increasing, got {idx}")
        if idx[0] < 0 or idx[-1] >= arr.shape[0]:
            raise ShapeError(f"subject_indices {idx} out of range for m={arr.shape[0]}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "subject_indices", idx)

    @property
    def m(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


def random_prompt(m, d, subject_indices, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9E37]))
    return PromptTokens(rng.standard_normal((m, d)), tuple(subject_indices))


def tokenize(v, embed):
    """Flatten ``v`` to tokens and apply the ``c x d`` input embedding."""
    embed = np.asarray(embed, dtype=np.float64)
    if embed.ndim != 2 or embed.shape[0] != v.channels:
        raise ShapeError(f"embed must be ({v.channels}, d), got {embed.shape}")
    layout = v.layout
    return v.data.reshape(layout.n, v.channels) @ embed, layout


def detokenize(tokens, layout, project):
    tokens = np.asarray(tokens, dtype=np.float64)
    project = np.asarray(project, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] != layout.n:
        raise ShapeError(f"expected {layout.n} tokens, got array of shape {tokens.shape}")
    if project.ndim != 2 or project.shape[0] != tokens.shape[1]:
        raise ShapeError(f"project must be ({tokens.shape[1]}, c), got {project.shape}")
    out = tokens @ project
    return LatentVideo(out.reshape(layout.frames, layout.height, layout.width, project.shape[1]))
