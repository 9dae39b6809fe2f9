"""Drift estimation: one-step change estimates and their combination.

A one-step estimate ρ̃_i bounds ‖x*_i − x*_{i−1}‖ from the data of tasks i
and i−1. The combiners average them into ρ̂_n, under either constant drift
(every step moves exactly ρ) or bounded drift (every step moves at most ρ),
and add a vanishing slack t_n plus, in certified mode, correction constants.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections.abc import Callable, Sequence
from typing import Protocol

import numpy as np
from scipy.sparse.csgraph import csgraph_from_dense, shortest_path
from scipy.spatial.distance import cdist

from driftk.concentration import (
    dependent_hoeffding_tail,
    hoeffding_sigma,
    martingale_sum_tail,
    mgf_sigma_from_tail,
)
from driftk.gap_bounds import FunctionParams
from driftk.objective import LossModel, empirical_gradient, nonempty_batch
from driftk.types import Batch, Matrix, Vector, frozen_slots

Metric = str | Callable[[Vector, Vector], float]
BoundFn = Callable[[float, int], float]

EXACT_IPM_MAX_SAMPLES = 4


class DriftEstimateError(ValueError):
    """Raised when a drift estimate cannot be formed from the given inputs."""


class InstanceTooLargeError(ValueError):
    """Raised when the exhaustive IPM oracle is asked to solve a large instance."""


class DriftMethod(enum.Enum):
    DIRECT = "direct"
    IPM = "ipm"


class DriftMode(enum.Enum):
    """``PRACTICAL`` certifies ρ̂ + t_n; ``CERTIFIED`` also adds corrections."""

    PRACTICAL = "practical"
    CERTIFIED = "certified"


class ChangeModel(enum.Enum):
    CONSTANT = "constant"
    BOUNDED = "bounded"


@frozen_slots
class OneStepEstimate:
    """ρ̃_i, an estimate of ‖x*_i − x*_{i−1}‖; ``index`` is i."""

    value: float
    method: DriftMethod
    index: int = 0


@frozen_slots
class TnSchedule:
    """Slack t_n = c·n^(−η) with 0 < η < ½, so that n·t_n² → ∞."""

    c: float = 1.0
    eta: float = 0.375

    def __post_init__(self) -> None:
        if not self.c > 0:
            raise ValueError(f"slack scale must be positive, got {self.c}")
        if not 0.0 < self.eta < 0.5:
            raise ValueError(f"slack exponent must be in (0, 1/2), got {self.eta}")


def tn(schedule: TnSchedule, n: int) -> float:
    if n < 1:
        raise ValueError(f"t_n is defined for n >= 1, got {n}")
    return schedule.c * n ** (-schedule.eta)


@frozen_slots
class DriftEstimate:
    """Combined drift estimate after n tasks.

    ``corrections`` holds (Ĉ_n, Ĉ_n^(2)) under constant drift and (Û_n, V̂_n)
    under bounded drift; both are zero unless the direct method runs in
    certified mode. ``certified`` = ρ̂_n + corrections + t_n.
    """

    n: int
    rho_hat: float
    change: ChangeModel
    method: DriftMethod
    mode: DriftMode
    slack: float
    certified: float
    corrections: tuple[float, float] = (0.0, 0.0)
    window: int = 1


# ---------------------------------------------------------------------------
# One-step estimates
# ---------------------------------------------------------------------------


def direct_one_step(
    model: LossModel,
    x_i: Vector,
    x_prev: Vector,
    batch_i: Batch,
    batch_prev: Batch,
    m: float,
    diameter: float,
    index: int = 0,
) -> OneStepEstimate:
    """‖x_i − x_{i−1}‖ + (‖ḡ_i(x_i)‖ + ‖ḡ_{i−1}(x_{i−1})‖)/m, capped at diam(X).

    ḡ_i is the empirical gradient over the batch task i was trained on.

    Raises:
        EmptyBatchError: If either batch is empty.
    """
    if not m > 0:
        raise DriftEstimateError(f"direct estimate needs m > 0, got {m}")
    g_i = empirical_gradient(model, x_i, batch_i)
    g_prev = empirical_gradient(model, x_prev, batch_prev)
    step = np.linalg.norm(
        np.asarray(x_i, dtype=float) - np.asarray(x_prev, dtype=float)
    )
    value = float(step) + (np.linalg.norm(g_i) + np.linalg.norm(g_prev)) / m
    return OneStepEstimate(min(float(value), diameter), DriftMethod.DIRECT, index)


def _pairwise(batch_a: Batch, batch_b: Batch, metric: Metric, scale: float) -> Matrix:
    a = nonempty_batch(batch_a, "IPM estimate")
    b = nonempty_batch(batch_b, "IPM estimate")
    r = scale * cdist(a, b, metric=metric)
    if np.any(r < 0):
        raise DriftEstimateError("metric returned a negative distance")
    return r


def ipm_one_step(
    batch_i: Batch,
    batch_prev: Batch,
    m: float,
    diameter: float,
    metric: Metric = "euclidean",
    scale: float = 1.0,
    index: int = 0,
) -> OneStepEstimate:
    """Pairwise relaxation of the vector IPM between two batches, divided by m.

    Γ̄ = mean over all cross pairs of r(z_i(k), z_{i−1}(j)) upper-bounds the
    IPM over every vector class whose members satisfy
    ‖f(z) − f(z̃)‖ ≤ r(z, z̃).

    Raises:
        EmptyBatchError: If either batch is empty.
        DriftEstimateError: If the metric is negative somewhere.
    """
    if not m > 0:
        raise DriftEstimateError(f"IPM estimate needs m > 0, got {m}")
    gamma = float(_pairwise(batch_i, batch_prev, metric, scale).mean())
    return OneStepEstimate(min(gamma / m, diameter), DriftMethod.IPM, index)


def _ipm_program(batch_i: Batch, batch_prev: Batch, metric: Metric, scale: float):
    """Stack both batches and return (r over all samples, objective weights c)."""
    a = nonempty_batch(batch_i, "IPM program")
    b = nonempty_batch(batch_prev, "IPM program")
    z = np.vstack([a, b])
    r = scale * cdist(z, z, metric=metric)
    if np.any(r < 0):
        raise DriftEstimateError("metric returned a negative distance")
    c = np.concatenate([np.full(len(a), 1.0 / len(a)), -np.full(len(b), 1.0 / len(b))])
    return r, c


def ipm_exact_tiny(
    batch_i: Batch,
    batch_prev: Batch,
    m: float,
    metric: Metric = "euclidean",
    scale: float = 1.0,
) -> float:
    """Exact vector IPM / m for at most four samples in total.

    Projecting f onto its maximizing direction turns the program into
    max Σ c_k a_k subject to |a_k − a_j| ≤ r_kj, whose optimum sits on a vertex
    where the tight constraints form a spanning tree. Every such tree and
    orientation is enumerated.

    Raises:
        InstanceTooLargeError: Beyond four samples in total.
    """
    total = len(np.atleast_2d(batch_i)) + len(np.atleast_2d(batch_prev))
    if total > EXACT_IPM_MAX_SAMPLES:
        raise InstanceTooLargeError(
            f"exhaustive IPM handles at most {EXACT_IPM_MAX_SAMPLES} samples, "
            f"got {total}"
        )
    r, c = _ipm_program(batch_i, batch_prev, metric, scale)
    n = len(c)
    pairs = list(itertools.combinations(range(n), 2))
    best = 0.0
    for tree in itertools.combinations(pairs, n - 1):
        for signs in itertools.product((1.0, -1.0), repeat=n - 1):
            a = _tree_potential(n, tree, signs, r)
            if a is None:
                continue
            if np.all(np.abs(a[:, None] - a[None, :]) <= r + 1e-12):
                best = max(best, float(c @ a))
    return best / m


def _tree_potential(n, tree, signs, r) -> Vector | None:
    """Solve a_k − a_j = ±r_jk along the tree edges with a_0 = 0."""
    a = np.full(n, np.nan)
    a[0] = 0.0
    for _ in range(n):
        for (j, k), s in zip(tree, signs):
            if np.isnan(a[k]) and not np.isnan(a[j]):
                a[k] = a[j] + s * r[j, k]
            elif np.isnan(a[j]) and not np.isnan(a[k]):
                a[j] = a[k] - s * r[j, k]
    return None if np.any(np.isnan(a)) else a


def ipm_ascent_lower_bound(
    batch_i: Batch,
    batch_prev: Batch,
    m: float,
    metric: Metric = "euclidean",
    scale: float = 1.0,
    steps: int = 50,
) -> float:
    """Feasible-point lower bound on the vector IPM / m.

    Starts from the shortest-path potential to the previous batch, then
    alternates gradient steps on Σ c_k a_k with the repair
    a_k ← min_j (a_j + D_jk), which restores feasibility.
    """
    r, c = _ipm_program(batch_i, batch_prev, metric, scale)
    dist = shortest_path(csgraph_from_dense(r, null_value=np.inf), directed=False)
    n_i = len(np.atleast_2d(batch_i))
    a = dist[n_i:].min(axis=0)
    best = float(c @ a)
    step = float(r.max()) or 1.0
    for it in range(steps):
        a = a + (step / (it + 1)) * c
        a = (a[:, None] + dist).min(axis=0)
        best = max(best, float(c @ a))
    return max(best, 0.0) / m


@frozen_slots
class InclusionCheck:
    """Outcome of a gradient-inclusion spot check."""

    checked: int
    violations: int
    worst_ratio: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def gradient_inclusion_spot_check(
    model: LossModel,
    x: Vector,
    batch_i: Batch,
    batch_prev: Batch,
    metric: Metric = "euclidean",
    scale: float = 1.0,
    pairs: int = 200,
    rng: np.random.Generator | None = None,
) -> InclusionCheck:
    """Check ‖∇ℓ(x, z) − ∇ℓ(x, z̃)‖ ≤ r(z, z̃) on sampled pairs of samples.

    Passing does not prove the gradient class lies inside the IPM class; a
    violation shows it does not.
    """
    z = np.vstack(
        [
            nonempty_batch(batch_i, "spot check"),
            nonempty_batch(batch_prev, "spot check"),
        ]
    )
    rng = rng if rng is not None else np.random.default_rng(0)
    left = rng.integers(0, len(z), size=pairs)
    right = rng.integers(0, len(z), size=pairs)
    keep = left != right
    left, right = left[keep], right[keep]
    if left.size == 0:
        return InclusionCheck(checked=0, violations=0, worst_ratio=0.0)
    grads = model.grads(x, z)
    gaps = np.linalg.norm(grads[left] - grads[right], axis=1)
    r = (scale * cdist(z, z, metric=metric))[left, right]
    violations = int(np.sum(gaps > r + 1e-12))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(r > 0, gaps / r, np.where(gaps > 0, np.inf, 0.0))
    return InclusionCheck(
        checked=int(left.size), violations=violations, worst_ratio=float(ratios.max())
    )


# ---------------------------------------------------------------------------
# Window estimators for bounded drift
# ---------------------------------------------------------------------------


class HWindowEstimator(Protocol):
    """Statistic over the last W one-step estimates whose mean bounds ρ.

    ``combine`` must be monotone in each argument and Lipschitz with
    constants ``lipschitz`` (one per window slot).
    """

    @property
    def W(self) -> int: ...

    @property
    def lipschitz(self) -> tuple[float, ...]: ...

    def combine(self, window: Sequence[float]) -> float: ...


@frozen_slots
class UniformMaxWindow:
    """((W+1)/W)·max over the window."""

    W: int = 1

    def __post_init__(self) -> None:
        if self.W < 1:
            raise ValueError(f"window size must be >= 1, got {self.W}")

    @property
    def lipschitz(self) -> tuple[float, ...]:
        return ((self.W + 1) / self.W,) * self.W

    def combine(self, window: Sequence[float]) -> float:
        if not len(window):
            raise DriftEstimateError("window estimator needs at least one value")
        return (self.W + 1) / self.W * float(max(window))


# ---------------------------------------------------------------------------
# Combiners
# ---------------------------------------------------------------------------


def _validated_history(
    history: Sequence[OneStepEstimate], budgets: Sequence[int]
) -> tuple[Vector, Vector, DriftMethod]:
    n = len(budgets)
    if n < 2:
        raise DriftEstimateError(f"drift estimate needs n >= 2 tasks, got {n}")
    if len(history) != n - 1:
        raise DriftEstimateError(
            f"expected {n - 1} one-step estimates for {n} tasks, got {len(history)}"
        )
    methods = {h.method for h in history}
    if len(methods) != 1:
        raise DriftEstimateError("one-step estimates mix methods")
    values = np.array([h.value for h in history], dtype=float)
    return values, np.asarray(budgets, dtype=float), methods.pop()


def _certified_inputs(
    params: FunctionParams, bound: BoundFn | None, dimension: int | None
):
    if params.C_g is None or params.L_G is None:
        raise DriftEstimateError("certified mode needs C_g and L_G")
    if bound is None or dimension is None:
        raise DriftEstimateError("certified mode needs the gap bound and the dimension")
    return params.C_g, params.L_G


def sample_error_radius(bound: BoundFn, params: FunctionParams, K: int) -> float:
    """C(K) = 2·√((2/m)·b(diam², K)), a bound on the distance of x̂ from x*."""
    return 2.0 * math.sqrt(2.0 / params.m * bound(params.diam_sq, K))


def combine_constant(
    history: Sequence[OneStepEstimate],
    budgets: Sequence[int],
    params: FunctionParams,
    tn_schedule: TnSchedule,
    *,
    mode: DriftMode = DriftMode.PRACTICAL,
    bound: BoundFn | None = None,
    dimension: int | None = None,
) -> DriftEstimate:
    """Average ρ̃_2..ρ̃_n under constant drift.

    Args:
        history: One-step estimates ρ̃_2, ..., ρ̃_n.
        budgets: K_1, ..., K_n.
        params: ψ of the tasks; ``C_g`` and ``L_G`` are read in certified mode.
        tn_schedule: Slack schedule.
        mode: Practical or certified.
        bound: b(d0, K), used for C(K) in certified mode.
        dimension: d, used for Ĉ_n^(2) in certified mode.

    Raises:
        DriftEstimateError: If n < 2, or certified inputs are missing.
    """
    values, K, method = _validated_history(history, budgets)
    n = len(K)
    rho_hat = min(float(values.mean()), math.sqrt(params.diam_sq))
    slack = tn(tn_schedule, n)
    corrections = (0.0, 0.0)
    if mode is DriftMode.CERTIFIED and method is DriftMethod.DIRECT:
        C_g, L_G = _certified_inputs(params, bound, dimension)
        weights = np.full(n, 2.0)
        weights[[0, -1]] = 1.0
        radii = np.array([sample_error_radius(bound, params, int(k)) for k in K])
        c_hat = (1.0 + L_G / params.m) / (n - 1) * float(weights @ radii)
        c_hat2 = float(weights @ np.sqrt(C_g / K)) / (dimension * params.m * (n - 1))
        corrections = (c_hat, c_hat2)
    return DriftEstimate(
        n=n,
        rho_hat=rho_hat,
        change=ChangeModel.CONSTANT,
        method=method,
        mode=mode,
        slack=slack,
        certified=rho_hat + sum(corrections) + slack,
        corrections=corrections,
    )


def window_values(values: Sequence[float], hw: HWindowEstimator) -> Vector:
    """ρ̃^(i) = hw(trailing min(W, i−1) one-step values) for i = 2..n."""
    return np.array(
        [hw.combine(values[max(0, j - hw.W + 1) : j + 1]) for j in range(len(values))]
    )


def combine_bounded(
    history: Sequence[OneStepEstimate],
    hw: HWindowEstimator,
    budgets: Sequence[int],
    params: FunctionParams,
    tn_schedule: TnSchedule,
    *,
    mode: DriftMode = DriftMode.PRACTICAL,
    bound: BoundFn | None = None,
    dimension: int | None = None,
) -> DriftEstimate:
    """Average the window statistics ρ̃^(2)..ρ̃^(n) under bounded drift.

    The estimate is capped at diam(X), which every drift respects.

    Raises:
        DriftEstimateError: If n < 2, or n ≤ W when corrections are needed.
    """
    values, K, method = _validated_history(history, budgets)
    n, W = len(K), hw.W
    rho_hat = min(float(window_values(values, hw).mean()), math.sqrt(params.diam_sq))
    slack = tn(tn_schedule, n)
    corrections = (0.0, 0.0)
    if mode is DriftMode.CERTIFIED and method is DriftMethod.DIRECT:
        C_g, L_G = _certified_inputs(params, bound, dimension)
        if n <= W:
            raise DriftEstimateError(
                f"bounded-drift corrections need n > W, got n={n}, W={W}"
            )
        lip = float(sum(hw.lipschitz))
        radii = sum(sample_error_radius(bound, params, int(k)) for k in K)
        u_hat = 2.0 * (1.0 + L_G / params.m) * lip / (n - W) * radii
        noise = float(np.sqrt(C_g / (dimension * K)).sum())
        v_hat = 2.0 * lip / (params.m * (n - W)) * noise
        corrections = (u_hat, v_hat)
    return DriftEstimate(
        n=n,
        rho_hat=rho_hat,
        change=ChangeModel.BOUNDED,
        method=method,
        mode=mode,
        slack=slack,
        certified=rho_hat + sum(corrections) + slack,
        corrections=corrections,
        window=W,
    )


# ---------------------------------------------------------------------------
# Slack admissibility
# ---------------------------------------------------------------------------


def coverage_tail(
    method: DriftMethod,
    change: ChangeModel,
    n: int,
    t: float,
    params: FunctionParams,
    W: int = 1,
    lipschitz_sum: float = 2.0,
) -> float:
    """Tail bound on the event that the certified estimate at n misses ρ by t.

    Each case is a martingale or dependent-Hoeffding tail with the range or
    variance proxy of the one-step estimates; the result is capped at 1.
    """
    if n < 2:
        raise ValueError(f"coverage tail is defined for n >= 2, got {n}")
    diam = math.sqrt(params.diam_sq)
    if method is DriftMethod.IPM:
        if change is ChangeModel.CONSTANT:
            sigma = hoeffding_sigma(0.0, 2.0 * math.sqrt(2.0) * diam)
            tail = martingale_sum_tail([sigma] * n, [1.0 / n] * n, t)
        else:
            ranges = [(0.0, diam)] * (n - 1)
            tail = dependent_hoeffding_tail(ranges, W + 1, (n - 1) * t)
        return min(1.0, tail)

    if params.C_g is None or params.L_G is None:
        raise DriftEstimateError("direct-method coverage needs C_g and L_G")
    lift = 1.0 + params.L_G / params.m
    m, C_g = params.m, params.C_g
    if change is ChangeModel.CONSTANT:
        noise_sigma = 0.0 if C_g == 0 else mgf_sigma_from_tail(m * m / (4.0 * C_g))
        range_sigma = hoeffding_sigma(0.0, 2.0 * lift * diam)
        a = [1.0 / (n - 1)]
        tail = martingale_sum_tail([noise_sigma] * (n - 1), a * (n - 1), t)
        tail += martingale_sum_tail([range_sigma] * n, a * n, t)
        return min(1.0, tail)

    if n <= W:
        return 1.0
    lip = lipschitz_sum
    a = [1.0 / (n - W)] * n
    range_sigma = hoeffding_sigma(0.0, 8.0 * lift * lip * diam)
    noise_sigma = (
        0.0 if C_g == 0 else mgf_sigma_from_tail(m * m / (8.0 * C_g * lip * lip))
    )
    tail = martingale_sum_tail([range_sigma] * n, a, t)
    tail += martingale_sum_tail([noise_sigma] * n, a, t)
    return min(1.0, tail)


@frozen_slots
class TnCheck:
    """Partial sums of coverage tails over n = 2..horizon."""

    total: float
    late_mass: float
    stabilised: bool


def check_tn_summable(
    schedule: TnSchedule,
    method: DriftMethod,
    change: ChangeModel,
    params: FunctionParams,
    W: int = 1,
    lipschitz_sum: float = 2.0,
    horizon: int = 10_000,
    tol: float = 1e-3,
) -> TnCheck:
    """Sum the coverage tails at t = t_n and report whether the sum has settled.

    ``late_mass`` is the contribution of the second half of the horizon; a
    schedule that shrinks too quickly for the tails to be summable leaves it
    above ``tol``.
    """
    if horizon < 4:
        raise ValueError(f"horizon must be >= 4, got {horizon}")
    tails = np.array(
        [
            coverage_tail(method, change, n, tn(schedule, n), params, W, lipschitz_sum)
            for n in range(2, horizon + 1)
        ]
    )
    late = float(tails[(horizon // 2) - 1 :].sum())
    return TnCheck(total=float(tails.sum()), late_mass=late, stabilised=late <= tol)
