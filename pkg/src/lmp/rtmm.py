"""Reference key/value injection with reweighted reference keys.

Target queries attend over ``[K_prompt, K_video, lam * K_ref]`` and the
matching values ``[V_prompt, V_video, V_ref]``. The target's own video keys
are always kept; reference queries never see the target.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .fbdm import gather_reference_kv
from .mmdit import joint_attention


@dataclass(frozen=True)
class InjectionSpec:
    k_ref: np.ndarray  # (H, r, dk)
    v_ref: np.ndarray  # (H, r, dk)
    lam: float = 0.98

    def __post_init__(self):
        if np.shape(self.k_ref) != np.shape(self.v_ref) or np.ndim(self.k_ref) != 3:
            raise ShapeError(f"K_ref {np.shape(self.k_ref)} and V_ref {np.shape(self.v_ref)} must match as (H, r, dk)")
        if not np.isfinite(self.lam):
            raise ShapeError("lambda must be finite")

    @property
    def r(self):
        return self.k_ref.shape[1]

    def scaled_keys(self):
        return self.lam * self.k_ref


def extended_attention(h_tar, w, inj, block=None):
    """Joint attention of the target with appended, key-reweighted reference tokens."""
    if inj.k_ref.shape[0] != w.heads or inj.k_ref.shape[2] != w.head_width:
        raise ShapeError(f"injection shape {inj.k_ref.shape} does not match H={w.heads}, dk={w.head_width}",
                         block=block)
    out, amap, _ = joint_attention(h_tar, w, extra=(inj.scaled_keys(), inj.v_ref), block=block)
    return out, amap


def reference_mass(a, r):
    """Mean attention mass that video queries put on the last ``r`` columns."""
    if r < 0 or r > a.data.shape[1]:
        raise ShapeError(f"r={r} exceeds {a.data.shape[1]} columns")
    if r == 0:
        return 0.0
    return float(a.data[a.m :, -r:].sum(axis=1).mean())


class RmtmHook:
    """Block hook that injects the reference foreground K/V into target attention.

    ``reference`` is the reference branch's trace for the same block; its
    cached K/V were computed from the reference hidden states entering it.
    """

    def __init__(self, mask, reference, lam):
        self.mask = mask
        self.reference = reference
        self.lam = float(lam)

    def injection(self, w, block=None):
        if self.reference is None:
            raise ShapeError("reference motion injection needs a reference trace", block=block)
        k, v = gather_reference_kv(self.reference, self.mask)
        return InjectionSpec(k, v, self.lam).scaled_keys(), v
