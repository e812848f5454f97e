"""Flat parameter-vector algebra.

A parameter vector is a 1-D float64 numpy array. Every binary operation
checks lengths up front; nothing broadcasts.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, NumericError

ParamVector = np.ndarray


def as_vector(x) -> ParamVector:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D parameter vector, got shape {v.shape}")
    return v


def check_same_length(*vectors: ParamVector) -> int:
    n = len(vectors[0])
    for v in vectors[1:]:
        if len(v) != n:
            raise DimensionError(f"length mismatch: {n} vs {len(v)}")
    return n


def check_finite(v: ParamVector, what: str = "result") -> ParamVector:
    if not np.all(np.isfinite(v)):
        raise NumericError(f"{what} contains non-finite values")
    return v


def linear_combine(a: float, x, b: float, y) -> ParamVector:
    """Return ``a*x + b*y`` element-wise."""
    x, y = as_vector(x), as_vector(y)
    check_same_length(x, y)
    if not (np.isfinite(a) and np.isfinite(b)):
        raise NumericError("combination coefficients must be finite")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a * x + b * y
    return check_finite(out)


def weighted_average(theta_o, theta_star, beta: float) -> ParamVector:
    """Pull ``theta_star`` toward the anchor: ``beta*theta_o + (1-beta)*theta_star``."""
    if not 0.0 <= beta <= 1.0:
        raise DomainError(f"beta must lie in [0, 1], got {beta}")
    return linear_combine(beta, theta_o, 1.0 - beta, theta_star)


def l2_distance(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    check_same_length(x, y)
    return float(np.sqrt(np.sum((x - y) ** 2)))
