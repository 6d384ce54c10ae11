"""Noise schedules for the forward/reverse diffusion chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, check_in_range, check_rng

__all__ = ["NoiseSchedule", "build_schedule", "forward_diffuse"]

DEFAULT_N_STEPS = 100
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances ``betas`` and cumulative products ``alpha_bars``.

    ``alpha_bars[t] = prod_{s<=t} (1 - betas[s])``, strictly decreasing in t.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = as_float_array(self.betas, ndim=1, name="betas")
        abars = as_float_array(self.alpha_bars, ndim=1, name="alpha_bars")
        if betas.shape != abars.shape or betas.size == 0:
            raise ValueError("betas and alpha_bars must be equal-length, non-empty")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(abars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def n_steps(self):
        return self.betas.shape[0]

    def check_t(self, t):
        t = int(t)
        if not 0 <= t < self.n_steps:
            raise ValueError(f"time index {t} outside [0, {self.n_steps})")
        return t

    def to_dict(self):
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, record):
        betas = np.asarray(record["betas"], dtype=float)
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def build_schedule(n_steps=DEFAULT_N_STEPS, beta_min=DEFAULT_BETA_MIN, beta_max=DEFAULT_BETA_MAX):
    """Linearly spaced betas on [beta_min, beta_max] with derived alpha_bars."""
    n_steps = int(n_steps)
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    check_in_range(beta_min, 0.0, 1.0, "beta_min", lo_open=True, hi_open=True)
    check_in_range(beta_max, beta_min, 1.0, "beta_max", hi_open=True)
    betas = np.linspace(beta_min, beta_max, n_steps)
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def forward_diffuse(x0, t, schedule, rng):
    """Closed-form forward noising: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    Returns ``(x_t, eps)`` with eps standard normal from ``rng``.
    """
    x0 = as_float_array(x0)
    t = schedule.check_t(t)
    rng = check_rng(rng)
    abar = schedule.alpha_bars[t]
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps, eps
