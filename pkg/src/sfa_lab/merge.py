"""Post-hoc merging of parameter vectors.

All operators are pure functions of parameter vectors (and, for Fisher
merging, their Fisher diagonals). None of them touches data.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .params import as_vector, check_finite, check_same_length, weighted_average

DEFAULT_TIES_DENSITY = 0.2


def _weights(weights, count: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != count:
        raise DimensionError(f"{count} inputs but {len(w)} weights")
    if not np.all(np.isfinite(w)):
        raise DomainError("merge weights must be finite")
    return w


def task_vector(base, finetuned) -> np.ndarray:
    base, finetuned = as_vector(base), as_vector(finetuned)
    check_same_length(base, finetuned)
    return finetuned - base


def task_arithmetic(base, vectors: Sequence, weights) -> np.ndarray:
    """``base + sum_i w_i * vectors[i]``."""
    base = as_vector(base)
    vectors = [as_vector(v) for v in vectors]
    check_same_length(base, *vectors)
    w = _weights(weights, len(vectors))
    out = base.copy()
    for wi, v in zip(w, vectors):
        out = out + wi * v
    return check_finite(out)


def wise_ft(base, finetuned, beta: float) -> np.ndarray:
    """Interpolate after training; identical to ``weighted_average(base, finetuned, beta)``."""
    return weighted_average(base, finetuned, beta)


def trim_top_k(v: np.ndarray, density: float) -> np.ndarray:
    """Zero everything but the ``ceil(density * n)`` largest magnitudes.

    Ties at the threshold keep the lower index.
    """
    k = math.ceil(density * len(v))
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    out[order[:k]] = v[order[:k]]
    return out


def ties_merge(base, vectors: Sequence, density: float = DEFAULT_TIES_DENSITY,
               weights=None) -> np.ndarray:
    """TIES merging: trim, elect a sign per coordinate, average the agreeing entries.

    A coordinate whose weighted sum is exactly zero elects the positive sign.
    The merged entry is the weight-normalised mean of trimmed entries matching
    the elected sign, or zero when none match.
    """
    if not 0.0 < density <= 1.0:
        raise DomainError(f"density must lie in (0, 1], got {density}")
    base = as_vector(base)
    vectors = [as_vector(v) for v in vectors]
    if not vectors:
        return base.copy()
    check_same_length(base, *vectors)
    w = _weights(np.ones(len(vectors)) if weights is None else weights, len(vectors))

    trimmed = np.stack([trim_top_k(v, density) for v in vectors])
    elected = np.where(w @ trimmed >= 0.0, 1.0, -1.0)
    agree = np.sign(trimmed) == elected
    num = (w[:, None] * trimmed * agree).sum(axis=0)
    den = (w[:, None] * agree).sum(axis=0)
    delta = np.divide(num, den, out=np.zeros_like(num), where=den != 0)
    return check_finite(base + delta)


def fisher_merge(models: Sequence, fishers: Sequence, lambdas=None) -> np.ndarray:
    """Per-coordinate Fisher-weighted average of models.

    Coordinates where every ``lambda_k * F_k`` vanishes take the plain mean.
    """
    models = [as_vector(m) for m in models]
    fishers = [as_vector(f) for f in fishers]
    if len(models) != len(fishers) or not models:
        raise DimensionError(f"{len(models)} models but {len(fishers)} Fisher diagonals")
    check_same_length(*models, *fishers)
    lam = _weights(np.ones(len(models)) if lambdas is None else lambdas, len(models))
    if any(np.any(f < 0) for f in fishers):
        raise DomainError("Fisher diagonals must be non-negative")
    if np.any(lam < 0):
        raise DomainError("Fisher merge coefficients must be non-negative")

    weighted = [lk * fk for lk, fk in zip(lam, fishers)]
    num = sum(wk * mk for wk, mk in zip(weighted, models))
    den = sum(weighted)
    fallback = sum(models) / len(models)
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), fallback)
    return check_finite(out)


def ewc_merge_step(theta_star, theta_o, fisher_o, eta: float) -> np.ndarray:
    """Fisher-weighted pull toward the anchor: ``(1 - eta*F) theta* + eta*F theta_o``."""
    theta_star, theta_o, fisher_o = as_vector(theta_star), as_vector(theta_o), as_vector(fisher_o)
    check_same_length(theta_star, theta_o, fisher_o)
    if np.any(fisher_o < 0):
        raise DomainError("Fisher diagonal must be non-negative")
    k = eta * fisher_o
    if np.any(k > 1.0) or np.any(k < 0):
        raise DomainError(
            f"eta*F must lie in [0, 1] (max is {k.max():.6g}); use a smaller eta"
        )
    return check_finite((1.0 - k) * theta_star + k * theta_o)
