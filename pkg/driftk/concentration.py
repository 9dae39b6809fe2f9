"""Concentration calculators for sub-Gaussian vectors and dependent sums.

These evaluate closed-form tail bounds; their validity is checked empirically
in the test suite rather than proved here.
"""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from driftk.types import Vector, frozen_slots


@frozen_slots
class SubGaussianSpec:
    """Per-component sub-Gaussian norms τ_j of a random vector."""

    taus: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(not (math.isfinite(t) and t >= 0) for t in self.taus):
            raise ValueError("sub-Gaussian norms must be finite and nonnegative")

    @property
    def norm_bound(self) -> float:
        """B(v) = Σ_j τ_j."""
        return float(sum(self.taus))


def avg_norm_bound(tau: float, d: int, K: int) -> float:
    """B of the mean of K independent vectors whose components all have τ ≤ tau."""
    if tau < 0 or d < 1 or K < 1:
        raise ValueError("need tau >= 0, d >= 1 and K >= 1")
    return tau * d / math.sqrt(K)


def avg_norm_bound_general(taus: np.ndarray) -> float:
    """B of the mean of K independent vectors with per-entry norms ``taus[k, j]``.

    (1/K)·Σ_j (Σ_k τ_kj²)^½.
    """
    taus = np.atleast_2d(np.asarray(taus, dtype=float))
    if np.any(taus < 0):
        raise ValueError("sub-Gaussian norms must be nonnegative")
    return float(np.sqrt((taus**2).sum(axis=0)).sum() / taus.shape[0])


def norm_tail(norm_bound: float, t: float) -> float:
    """P{‖v‖ > t} ≤ 2·exp(−t²/(2B²)) for a centered vector with B(v) = norm_bound."""
    if norm_bound <= 0 or t < 0:
        raise ValueError("need B > 0 and t >= 0")
    return 2.0 * math.exp(-(t * t) / (2.0 * norm_bound**2))


def mgf_sigma_from_tail(c: float) -> float:
    """MGF variance proxy σ² = 9/c of a centered variable with tail 2e^(−ct²)."""
    if c <= 0:
        raise ValueError(f"tail constant must be positive, got {c}")
    return 9.0 / c


def hoeffding_sigma(a: float, b: float) -> float:
    """Variance proxy (b − a)²/4 of a centered variable supported on [a, b]."""
    if b < a:
        raise ValueError(f"need b >= a, got [{a}, {b}]")
    return (b - a) ** 2 / 4.0


def _gaussian_tail(t: float, scale: float) -> float:
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if t == 0:
        return 1.0
    if scale == 0:
        return 0.0
    return math.exp(-(t * t) / scale)


def martingale_sum_tail(
    sigma_sq: Sequence[float], a: Sequence[float], t: float
) -> float:
    """P{Σ a_i V_i > t} ≤ exp(−t²/(2ν)), ν = Σ σ_i² a_i², for a sub-Gaussian
    martingale difference sequence V_i."""
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    a = np.asarray(a, dtype=float)
    if sigma_sq.shape != a.shape:
        raise ValueError("sigma_sq and a must have the same length")
    return _gaussian_tail(t, 2.0 * float(np.sum(sigma_sq * a**2)))


def cover(n: int, W: int) -> list[list[int]]:
    """Split {1..n} into W arithmetic progressions A_j = {j, j+W, ...}."""
    if not 1 <= W <= n:
        raise ValueError(f"need 1 <= W <= n, got W={W}, n={n}")
    return [list(range(j, n + 1, W)) for j in range(1, W + 1)]


def dependent_hoeffding_tail(
    ranges: Sequence[tuple[float, float]], W: int, t: float
) -> float:
    """P{Σ (V_i − E V_i) > t} ≤ exp(−2t²/(W·Σ(b_i − a_i)²)) when V_i ∈ [a_i, b_i]
    and each V_i depends on at most the W − 1 previous terms."""
    if W < 1:
        raise ValueError(f"W must be >= 1, got {W}")
    widths = np.array([b - a for a, b in ranges], dtype=float)
    if np.any(widths < 0):
        raise ValueError("every range needs b_i >= a_i")
    return _gaussian_tail(t, W * float(np.sum(widths**2)) / 2.0)


def subgaussian_norm_from_samples(samples: Vector, grid: Vector | None = None) -> float:
    """Plug-in estimate of τ: the largest √(2 log Ê[e^{sξ}] / s²) over a grid of s.

    The samples are centered first. Only a rough diagnostic; small samples
    understate heavy tails.
    """
    xi = np.asarray(samples, dtype=float)
    xi = xi - xi.mean()
    if grid is None:
        scale = xi.std() or 1.0
        grid = np.linspace(0.1, 3.0, 30) / scale
    ratios = [2.0 * np.log(np.mean(np.exp(s * xi))) / s**2 for s in grid]
    return float(math.sqrt(max(0.0, max(ratios))))
