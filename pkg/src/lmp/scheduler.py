"""Noise schedules, gating config and the deterministic sampler update."""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, NumericError, ShapeError
from .latent import LatentVideo

GATE_INTERPRETATIONS = ("literal", "first_k")
BLEND_KINDS = ("linear", "sqrt_abar")


@dataclass(frozen=True)
class NoiseSchedule:
    a: np.ndarray     # a[t-1] is the per-step coefficient a_t, t = 1..T
    abar: np.ndarray  # abar[t], t = 0..T, abar[0] == 1

    @property
    def T(self):
        return len(self.a)

    @classmethod
    def from_coefficients(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 1 or len(a) < 1 or np.any(a <= 0) or np.any(a > 1):
            raise ConfigError("per-step coefficients must lie in (0, 1]")
        abar = np.concatenate([[1.0], np.cumprod(a)])
        return cls(a, abar)


def linear_schedule(T, beta_start=1e-4, beta_end=None, abar_final=0.01):
    """Linear ramp of ``1 - a_t`` from ``beta_start`` to ``beta_end``.

    With ``beta_end=None`` the end point is solved so that ``abar[T]``
    equals ``abar_final``.
    """
    if T < 1:
        raise ConfigError("T must be >= 1")

    def abar_T(end):
        return float(np.prod(1.0 - np.linspace(beta_start, end, T)))

    if beta_end is None:
        if not 0.0 < abar_final < 1.0:
            raise ConfigError("abar_final must lie in (0, 1)")
        if abar_T(beta_start) <= abar_final:
            beta_end = beta_start
        else:
            beta_end = brentq(lambda e: abar_T(e) - abar_final, beta_start, 1.0 - 1e-12, xtol=1e-15)
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule.from_coefficients(1.0 - betas)


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    T1: int = 40
    T2: int = 45
    T3: int = 35
    lam: float = 0.98
    beta: float = 100.0
    seed: int = 0
    gate_interpretation: str = "literal"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0 <= self.T3 < self.T2 <= self.T:
            raise ConfigError(f"need 0 <= T3 < T2 <= T, got T3={self.T3} T2={self.T2} T={self.T}")
        if not 0 <= self.T1 <= self.T:
            raise ConfigError(f"need 0 <= T1 <= T, got T1={self.T1}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not (self.beta >= 0.0 and np.isfinite(self.beta)):
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        if self.gate_interpretation not in GATE_INTERPRETATIONS:
            raise ConfigError(f"unknown gate interpretation {self.gate_interpretation!r}")

    def rtmm_active(self, t):
        if self.gate_interpretation == "literal":
            return t > self.T1
        # "the first T1 denoising steps" counted from t = T downwards
        return t > self.T - self.T1

    def asm_active(self, t):
        return self.T3 < t < self.T2


@dataclass(frozen=True)
class BlendSchedule:
    lam: np.ndarray  # lam[t], t = 0..T

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        if lam.ndim != 1 or len(lam) < 2:
            raise ConfigError("blend schedule needs at least two entries")
        if lam[0] != 1.0:
            raise ConfigError("blend schedule must start at 1")
        if np.any(lam < 0) or np.any(lam > 1) or np.any(np.diff(lam) > 0):
            raise ConfigError("blend schedule must be non-increasing within [0, 1]")
        object.__setattr__(self, "lam", lam)

    @property
    def T(self):
        return len(self.lam) - 1


def make_blend_schedule(T, kind="linear", noise=None):
    if T < 1:
        raise ConfigError("T must be >= 1")
    if kind == "linear":
        lam = 1.0 - np.arange(T + 1) / T
    elif kind == "sqrt_abar":
        if noise is None or noise.T != T:
            raise ConfigError("sqrt_abar blending needs a noise schedule with the same T")
        lam = np.sqrt(noise.abar)
    else:
        raise ConfigError(f"unknown blend policy {kind!r}; expected one of {BLEND_KINDS}")
    return BlendSchedule(lam)


def _check_pair(z0, eps, t, T):
    if z0.shape != eps.shape:
        raise ShapeError(f"shape mismatch {z0.shape} vs {eps.shape}")
    if not 0 <= t <= T:
        raise ShapeError(f"step {t} outside [0, {T}]")


def forward_noise(z0, t, eps, sched):
    _check_pair(z0, eps, t, sched.T)
    ab = sched.abar[t]
    return LatentVideo(np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps.data)


def proportional_noise(z0, t, eps, blend):
    _check_pair(z0, eps, t, blend.T)
    lam = blend.lam[t]
    if lam == 1.0:
        # bit-exact: 1*x + 0*e would turn -0.0 into +0.0
        return z0
    return LatentVideo(lam * z0.data + (1.0 - lam) * eps.data)


def predict_clean(z_t, eps_hat, t, sched):
    ab = sched.abar[t]
    if ab <= 0.0:
        raise NumericError(f"abar is zero at t={t}; cannot recover the clean latent", t=t)
    return (z_t.data - np.sqrt(1.0 - ab) * eps_hat.data) / np.sqrt(ab)


def denoise_update(z_t, eps_hat, t, sched):
    """One deterministic (eta = 0) step from ``t`` to ``t - 1``."""
    if not 1 <= t <= sched.T:
        raise ShapeError(f"denoise step needs 1 <= t <= {sched.T}, got {t}")
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch {z_t.shape} vs {eps_hat.shape}")
    z0_hat = predict_clean(z_t, eps_hat, t, sched)
    prev = sched.abar[t - 1]
    if prev == 1.0:
        return LatentVideo(z0_hat)
    return LatentVideo(np.sqrt(prev) * z0_hat + np.sqrt(1.0 - prev) * eps_hat.data)
