"""On-disk artifacts: attention dumps, saliency/mask files, PGM heatmaps."""
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .errors import FormatError
from .fbdm import ForegroundMask
from .latent import TokenLayout
from .mmdit import AttentionMap
from .pipeline import Recorder


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (height, width) in [0, 1]
    constant: bool = False

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @classmethod
    def normalize(cls, frame):
        frame = np.asarray(frame, dtype=np.float64)
        lo, hi = frame.min(), frame.max()
        if hi == lo:
            return cls(np.zeros_like(frame), constant=True)
        return cls((frame - lo) / (hi - lo))

    def to_bytes(self):
        """8-bit levels, rounding halves up."""
        return np.floor(self.values * 255.0 + 0.5).astype(np.uint8).tobytes()

    def to_pgm(self):
        return f"P5\n{self.width} {self.height}\n255\n".encode("ascii") + self.to_bytes()


def attn_dump_name(t, block, branch="tar"):
    prefix = "attn" if branch == "tar" else f"attn_{branch}"
    return f"{prefix}_t{t}_b{block}.lmpt"


def save_attention(path, amap, layout, **extra):
    """Map as LMPT plus a JSON sidecar (``.json``) carrying m, n, r and the layout."""
    meta = {"m": amap.m, "n": amap.n, "r": amap.r, "frames": layout.frames,
            "height": layout.height, "width": layout.width, **extra}
    tensorio.save(path, amap.data)
    tensorio.atomic_write_bytes(os.path.splitext(path)[0] + ".json",
                                (json.dumps(meta, sort_keys=True) + "\n").encode())


def load_attention(path, layout=None, m=None):
    data = tensorio.load(path).astype(np.float64)
    if data.ndim != 2:
        raise FormatError(f"{path}: attention dump must be rank 2, got rank {data.ndim}")
    side = os.path.splitext(path)[0] + ".json"
    if os.path.exists(side):
        try:
            with open(side, encoding="utf-8") as fh:
                meta = json.load(fh)
            layout = TokenLayout(int(meta["frames"]), int(meta["height"]), int(meta["width"]))
            m = int(meta["m"])
        except (ValueError, KeyError, TypeError) as err:
            raise FormatError(f"{side}: bad sidecar ({err})") from err
    if layout is None or m is None:
        raise FormatError(f"{path}: no sidecar metadata; layout and prompt length must be given")
    n = layout.n
    rows, cols = data.shape
    if rows != m + n or cols < rows:
        raise FormatError(f"{path}: shape {data.shape} inconsistent with m={m}, n={n}")
    return AttentionMap(data, m, n, cols - rows), layout


def save_mask(path, mask):
    tensorio.save(path, mask.indices.astype(np.float32))


def load_mask(path, layout):
    raw = tensorio.load(path)
    if raw.ndim != 1:
        raise FormatError(f"{path}: mask must be rank 1")
    idx = raw.astype(np.int64)
    if not np.array_equal(idx.astype(np.float32), raw):
        raise FormatError(f"{path}: mask entries are not integral")
    return ForegroundMask(layout, idx)


def write_heatmaps(out_dir, saliency, stem="saliency"):
    """One PGM per frame; returns the indices of frames that were constant."""
    os.makedirs(out_dir, exist_ok=True)
    constant = []
    for f, frame in enumerate(saliency.volume()):
        hm = Heatmap.normalize(frame)
        if hm.constant:
            constant.append(f)
        tensorio.atomic_write_bytes(os.path.join(out_dir, f"{stem}_f{f}.pgm"), hm.to_pgm())
    return constant


class DumpWriter(Recorder):
    """Persists attention maps, saliency volumes, masks and losses as a run proceeds."""

    def __init__(self, out_dir, layout, attn=False, saliency=False, steps=None):
        self.out_dir = out_dir
        self.layout = layout
        self.attn = attn
        self.saliency = saliency
        self.steps = None if steps is None else set(steps)
        if attn:
            os.makedirs(os.path.join(out_dir, "attn"), exist_ok=True)
        if saliency:
            os.makedirs(os.path.join(out_dir, "saliency"), exist_ok=True)

    def _wanted(self, t):
        return self.steps is None or t in self.steps

    def block(self, t, block, branch, h_in, trace):
        if self.attn and self._wanted(t):
            path = os.path.join(self.out_dir, "attn", attn_dump_name(t, block, branch))
            save_attention(path, trace.attn, self.layout, t=t, block=block, branch=branch)

    def step(self, t, saliency, mask):
        if self.saliency:
            d = os.path.join(self.out_dir, "saliency")
            tensorio.save(os.path.join(d, f"saliency_t{t}.lmpt"), saliency.volume())
            save_mask(os.path.join(d, f"mask_t{t}.lmpt"), mask)
