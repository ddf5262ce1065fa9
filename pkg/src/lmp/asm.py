"""Appearance suppression by gradient descent on target video hidden states.

The target's video tokens are attended jointly with the *reference* prompt
tokens. The loss is the mean of the largest attention values linking the
reference subject tokens to the target video (both directions, pooled,
head-averaged map). Only the target video hidden states move; all
projections and prompt states are held fixed.
"""
import math
from dataclasses import dataclass

import numpy as np

from ._frac import ceil_fraction
from .errors import ConfigError, NumericError, ShapeError
from .mmdit import AttentionMap, softmax_rows


@dataclass(frozen=True)
class AsmContext:
    q_prompt: np.ndarray  # (H, m_ref, dk) reference-prompt queries at this block
    k_prompt: np.ndarray  # (H, m_ref, dk)
    subject_indices: tuple
    beta: float = 100.0
    fraction: float = 0.2

    def __post_init__(self):
        if np.shape(self.q_prompt) != np.shape(self.k_prompt) or np.ndim(self.q_prompt) != 3:
            raise ShapeError("reference prompt Q and K must share shape (H, m_ref, dk)")
        idx = tuple(int(i) for i in self.subject_indices)
        m = self.q_prompt.shape[1]
        if not idx or min(idx) < 0 or max(idx) >= m:
            raise ConfigError(f"subject indices {idx} invalid for m_ref={m}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if not (self.beta >= 0 and np.isfinite(self.beta)):
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        object.__setattr__(self, "subject_indices", idx)

    @property
    def m(self):
        return self.q_prompt.shape[1]

    @classmethod
    def from_reference_prompt(cls, prompt_states, w, subject_indices, beta=100.0, fraction=0.2):
        """Build the context from the reference prompt hidden states entering block ``w``."""
        return cls(prompt_states @ w.wq, prompt_states @ w.wk, subject_indices, beta, fraction)


def top_fraction_mean(values, fraction=0.2):
    """Mean of the ``ceil(fraction * n)`` largest values."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ShapeError("top_fraction_mean of an empty list")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    k = ceil_fraction(fraction, vals.size)
    top = np.sort(vals)[::-1][:k]
    return math.fsum(top) / k


def _per_head_maps(ctx, h_video, w):
    if h_video.ndim != 2 or h_video.shape[1] != w.width:
        raise ShapeError(f"target video states {h_video.shape} do not match block width {w.width}")
    if ctx.q_prompt.shape[0] != w.heads or ctx.q_prompt.shape[2] != w.head_width:
        raise ShapeError("reference prompt projections do not match block heads")
    qv = h_video @ w.wq
    kv = h_video @ w.wk
    q = np.concatenate([ctx.q_prompt, qv], axis=1)
    k = np.concatenate([ctx.k_prompt, kv], axis=1)
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(w.head_width)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in cross-prompt attention")
    return q, k, softmax_rows(logits)


def cross_prompt_attention(ctx, h_video, w):
    """Joint map over reference-prompt tokens and target video tokens."""
    _, _, a = _per_head_maps(ctx, h_video, w)
    return AttentionMap(a.mean(axis=0), ctx.m, h_video.shape[0], 0, per_head=a)


def _pooled_positions(m, n, subjects):
    """(row, col) of every pooled value: subject rows first, then subject columns."""
    cols = np.arange(m, m + n)
    rows = [(np.full(n, s), cols) for s in subjects] + [(cols, np.full(n, s)) for s in subjects]
    return (np.concatenate([r for r, _ in rows]), np.concatenate([c for _, c in rows]))


def _selection(ctx, abar, n):
    rows, cols = _pooled_positions(ctx.m, n, ctx.subject_indices)
    vals = abar[rows, cols]
    k = ceil_fraction(ctx.fraction, vals.size)
    # stable sort: among equal values the earliest pooled entries win
    chosen = np.argsort(-vals, kind="stable")[:k]
    return rows[chosen], cols[chosen], vals[chosen], k


def asm_loss(ctx, h_video, w):
    _, _, a = _per_head_maps(ctx, np.asarray(h_video, dtype=np.float64), w)
    abar = a.mean(axis=0)
    _, _, vals, k = _selection(ctx, abar, h_video.shape[0])
    return math.fsum(vals) / k


def asm_loss_and_grad(ctx, h_video, w):
    """Loss and its analytic gradient with respect to the target video states."""
    h_video = np.asarray(h_video, dtype=np.float64)
    q, k, a = _per_head_maps(ctx, h_video, w)
    H = a.shape[0]
    n = h_video.shape[0]
    m = ctx.m
    rows, cols, vals, kk = _selection(ctx, a.mean(axis=0), n)
    loss = math.fsum(vals) / kk

    g = np.zeros(a.shape[1:])
    g[rows, cols] = 1.0 / (kk * H)  # dL/dA_h for every head
    d_logits = a * (g - (g * a).sum(axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(w.head_width)
    dq = d_logits @ k * scale
    dk = np.swapaxes(d_logits, -1, -2) @ q * scale
    grad = (dq[:, m:] @ np.swapaxes(w.wq, -1, -2) + dk[:, m:] @ np.swapaxes(w.wk, -1, -2)).sum(axis=0)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite appearance-suppression gradient")
    return loss, grad


def asm_step(ctx, h_video, w):
    """One gradient step ``h - beta * dL/dh``; the weights are only read."""
    _, grad = asm_loss_and_grad(ctx, h_video, w)
    if ctx.beta == 0:
        return np.array(h_video, dtype=np.float64)
    return h_video - ctx.beta * grad


class AsmHook:
    """Pre-attention hook running one suppression step on the target video states."""

    def __init__(self, reference_prompt, subject_indices, beta, fraction=0.2):
        self.reference_prompt = reference_prompt
        self.subject_indices = tuple(subject_indices)
        self.beta = beta
        self.fraction = fraction
        self.loss = None

    def before_attention(self, h, w, block=None):
        ctx = AsmContext.from_reference_prompt(self.reference_prompt, w, self.subject_indices,
                                               self.beta, self.fraction)
        try:
            self.loss, grad = asm_loss_and_grad(ctx, h.video, w)
        except NumericError as err:
            raise err.with_context(block=block)
        return h.with_video(h.video - self.beta * grad)
