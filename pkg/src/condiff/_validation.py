"""Input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = ["as_float_array", "check_rng", "check_finite", "check_in_range"]


def as_float_array(x, *, ndim=None, name="array"):
    """Coerce to a float64 ndarray, optionally enforcing dimensionality.

    Raises ValueError on non-numeric input or a rank mismatch.
    """
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr, name="array"):
    """Raise FloatingPointError if any entry is NaN or infinite."""
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite values")
    return arr


def check_rng(seed_or_rng) -> np.random.Generator:
    """Turn None or an integer seed into a Generator; pass generators through.

    Anything exposing ``standard_normal`` is accepted, so tests can inject
    deterministic noise sources.
    """
    if seed_or_rng is None:
        return np.random.default_rng()
    if isinstance(seed_or_rng, (int, np.integer)):
        return np.random.default_rng(int(seed_or_rng))
    if hasattr(seed_or_rng, "standard_normal"):
        return seed_or_rng
    raise ValueError(f"expected None, an int seed, or a numpy Generator, got {type(seed_or_rng)!r}")


def check_in_range(value, lo, hi, name, *, lo_open=False, hi_open=False):
    """Validate a scalar against an interval, raising ValueError otherwise."""
    bad_lo = value <= lo if lo_open else value < lo
    bad_hi = value >= hi if hi_open else value > hi
    if bad_lo or bad_hi:
        lo_b = "(" if lo_open else "["
        hi_b = ")" if hi_open else "]"
        raise ValueError(f"{name}={value} outside {lo_b}{lo}, {hi}{hi_b}")
    return value
