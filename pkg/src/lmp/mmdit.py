"""A small MM-DiT block stack with joint prompt+video attention.

Each block runs one multi-head softmax attention over the concatenation of
prompt and video tokens, adds the output-mapped result back onto the
input, then applies a residual ``tanh`` feedforward. Attention maps are
kept head-averaged in the returned trace; per-head maps ride along on the
``AttentionMap`` for checks that need them.
"""
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class BlockWeights:
    wq: np.ndarray  # (H, d, dk)
    wk: np.ndarray  # (H, d, dk)
    wv: np.ndarray  # (H, d, dk)
    wo: np.ndarray  # (H*dk, d)
    wff: np.ndarray  # (d, d)

    def __post_init__(self):
        H, d, dk = np.shape(self.wq)
        for name in ("wk", "wv"):
            if np.shape(getattr(self, name)) != (H, d, dk):
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {(H, d, dk)}")
        if np.shape(self.wo) != (H * dk, d):
            raise ShapeError(f"wo has shape {np.shape(self.wo)}, expected {(H * dk, d)}")
        if np.shape(self.wff) != (d, d):
            raise ShapeError(f"wff has shape {np.shape(self.wff)}, expected {(d, d)}")
        for name in ("wq", "wk", "wv", "wo", "wff"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def heads(self):
        return self.wq.shape[0]

    @property
    def width(self):
        return self.wq.shape[1]

    @property
    def head_width(self):
        return self.wq.shape[2]

    @classmethod
    def random(cls, seed, block, width=16, heads=2, head_width=8, scale=1.0):
        """Weights drawn from a stream keyed on ``(seed, block)`` only."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))
        d, H, dk = width, heads, head_width
        s_in = scale / np.sqrt(d)
        return cls(
            wq=rng.standard_normal((H, d, dk)) * s_in,
            wk=rng.standard_normal((H, d, dk)) * s_in,
            wv=rng.standard_normal((H, d, dk)) * s_in,
            wo=rng.standard_normal((H * dk, d)) * (scale / np.sqrt(H * dk)),
            wff=rng.standard_normal((d, d)) * s_in,
        )

    @classmethod
    def zeros(cls, width=16, heads=2, head_width=8):
        z = np.zeros
        return cls(z((heads, width, head_width)), z((heads, width, head_width)),
                   z((heads, width, head_width)), z((heads * head_width, width)), z((width, width)))


@dataclass(frozen=True)
class HiddenStates:
    prompt: np.ndarray  # (m, d)
    video: np.ndarray   # (n, d)

    def __post_init__(self):
        p = np.asarray(self.prompt, dtype=np.float64)
        v = np.asarray(self.video, dtype=np.float64)
        if p.ndim != 2 or v.ndim != 2 or p.shape[1] != v.shape[1]:
            raise ShapeError(f"prompt {p.shape} and video {v.shape} must be matrices of equal width")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v))):
            raise NumericError("hidden states contain non-finite values")
        object.__setattr__(self, "prompt", p)
        object.__setattr__(self, "video", v)

    @property
    def m(self):
        return self.prompt.shape[0]

    @property
    def n(self):
        return self.video.shape[0]

    @property
    def width(self):
        return self.prompt.shape[1]

    def joined(self):
        return np.concatenate([self.prompt, self.video], axis=0)

    def with_video(self, video):
        return HiddenStates(self.prompt, video)


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic map with ``m + n`` query rows and ``m + n + r`` key columns."""

    data: np.ndarray
    m: int
    n: int
    r: int = 0
    per_head: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rows, cols = np.shape(self.data)
        if rows != self.m + self.n or cols != self.m + self.n + self.r:
            raise ShapeError(f"map shape {(rows, cols)} inconsistent with m={self.m} n={self.n} r={self.r}")

    @property
    def tt(self):
        return self.data[: self.m, : self.m]

    @property
    def tv(self):
        return self.data[: self.m, self.m : self.m + self.n]

    @property
    def vt(self):
        return self.data[self.m :, : self.m]

    @property
    def vv(self):
        return self.data[self.m :, self.m : self.m + self.n]

    @property
    def ref(self):
        return self.data[:, self.m + self.n :]


def partition(a, m, n):
    """Split ``a`` into (tt, tv, vt, vv), ignoring any trailing reference columns."""
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != m + n or a.shape[1] < m + n:
        raise ShapeError(f"cannot partition map of shape {a.shape} with m={m}, n={n}")
    return a[:m, :m], a[:m, m : m + n], a[m:, :m], a[m:, m : m + n]


@dataclass(frozen=True)
class BlockTrace:
    attn: AttentionMap
    k_video: np.ndarray  # (H, n, dk), from the hidden states entering the block
    v_video: np.ndarray  # (H, n, dk)


def project_heads(x, w):
    """Per-head queries, keys and values for token matrix ``x`` -> three (H, L, dk) arrays."""
    return x @ w.wq, x @ w.wk, x @ w.wv


def softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attend(q, k, v, block=None):
    """``softmax(q k^T / sqrt(dk)) v`` per head; returns (output, per-head map)."""
    with np.errstate(over="ignore", invalid="ignore"):
        logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite attention logits", block=block)
    a = softmax_rows(logits)
    return a @ v, a


def joint_attention(h, w, extra=None, block=None):
    """Joint attention over ``[prompt; video]`` tokens.

    ``extra`` optionally holds ``(k, v)`` arrays of shape (H, r, dk) that are
    appended as additional key/value rows (reference injection). Returns the
    residual-updated hidden states, the head-averaged map and the video
    part's per-head K and V.
    """
    if h.width != w.width:
        raise ShapeError(f"hidden width {h.width} != block width {w.width}", block=block)
    x = h.joined()
    q, k, v = project_heads(x, w)
    r = 0
    if extra is not None:
        k_ext, v_ext = extra
        if k_ext.shape != v_ext.shape or k_ext.ndim != 3 or k_ext.shape[0] != w.heads \
                or k_ext.shape[2] != w.head_width:
            raise ShapeError(f"injected K/V shapes {k_ext.shape}, {v_ext.shape} do not match "
                             f"(H={w.heads}, r, dk={w.head_width})", block=block)
        r = k_ext.shape[1]
        if r:
            k_all = np.concatenate([k, k_ext], axis=1)
            v_all = np.concatenate([v, v_ext], axis=1)
    if r:
        out, a = attend(q, k_all, v_all, block)
    else:
        out, a = attend(q, k, v, block)
    H, L, dk = out.shape
    merged = np.transpose(out, (1, 0, 2)).reshape(L, H * dk)
    y = x + merged @ w.wo
    amap = AttentionMap(a.mean(axis=0), h.m, h.n, r, per_head=a)
    return HiddenStates(y[: h.m], y[h.m :]), amap, (k[:, h.m :], v[:, h.m :])


def feedforward(h, w):
    return HiddenStates(h.prompt + np.tanh(h.prompt @ w.wff), h.video + np.tanh(h.video @ w.wff))


def block_forward(h, w, hooks=(), block=None):
    """One block with optional interventions.

    Hooks with a ``before_attention(h, w, block)`` method run first, in list
    order, and may replace the hidden states. At most one hook may provide
    ``injection(w, block)`` returning ``(k, v)`` to append inside attention.
    """
    injection = None
    for hook in hooks:
        if hasattr(hook, "before_attention"):
            h = hook.before_attention(h, w, block)
    injectors = [hook for hook in hooks if hasattr(hook, "injection")]
    if len(injectors) > 1:
        raise ShapeError("at most one injection hook per block", block=block)
    if injectors:
        injection = injectors[0].injection(w, block)
    out, amap, (k_v, v_v) = joint_attention(h, w, extra=injection, block=block)
    return feedforward(out, w), BlockTrace(amap, k_v, v_v)


def model_forward(h, weights, hooks=None):
    """Run every block in order. ``hooks`` maps block index -> hook list."""
    hooks = hooks or {}
    traces = []
    for b, w in enumerate(weights):
        h, trace = block_forward(h, w, hooks.get(b, ()), block=b)
        traces.append(trace)
    return h, traces


@dataclass(frozen=True)
class ModelWeights:
    """Input embedding, output projection and the block stack."""

    embed: np.ndarray    # (c, d)
    project: np.ndarray  # (d, c)
    blocks: tuple

    @property
    def width(self):
        return self.embed.shape[1]

    @property
    def channels(self):
        return self.embed.shape[0]

    @classmethod
    def random(cls, seed, channels=4, blocks=4, width=16, heads=2, head_width=8):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE3BED]))
        embed = rng.standard_normal((channels, width)) / np.sqrt(channels)
        project = np.linalg.pinv(embed)
        stack = tuple(BlockWeights.random(seed, b, width, heads, head_width) for b in range(blocks))
        return cls(embed, project, stack)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        tensorio.save(os.path.join(directory, "embed.lmpt"), self.embed)
        tensorio.save(os.path.join(directory, "project.lmpt"), self.project)
        for b, w in enumerate(self.blocks):
            for name in ("wq", "wk", "wv", "wo", "wff"):
                tensorio.save(os.path.join(directory, f"block{b}_{name}.lmpt"), getattr(w, name))

    @classmethod
    def load(cls, directory):
        embed = tensorio.load(os.path.join(directory, "embed.lmpt")).astype(np.float64)
        project = tensorio.load(os.path.join(directory, "project.lmpt")).astype(np.float64)
        blocks = []
        b = 0
        while os.path.exists(os.path.join(directory, f"block{b}_wq.lmpt")):
            parts = {name: tensorio.load(os.path.join(directory, f"block{b}_{name}.lmpt")).astype(np.float64)
                     for name in ("wq", "wk", "wv", "wo", "wff")}
            blocks.append(BlockWeights(**parts))
            b += 1
        if not blocks:
            raise ShapeError(f"no block weights found in {directory}")
        return cls(embed, project, tuple(blocks))
