"""Projected SGD with step-size schedules and iterate averaging."""

from __future__ import annotations

import enum
from collections.abc import Callable

import numpy as np
from scipy.special import softmax

from driftk.objective import FeasibleSet, InfeasiblePointError, LossModel, project
from driftk.types import Batch, Matrix, Vector, frozen_slots

Sampler = Callable[[int, np.random.Generator], Batch]


class ScheduleError(ValueError):
    """Raised for invalid step-size schedules or averaging configurations."""


class StepKind(enum.Enum):
    CONSTANT = "constant"
    POWER = "power"
    INVERSE_STRONG = "inverse-strong-convexity"


@frozen_slots
class StepSchedule:
    """Step sizes μ(ℓ), ℓ ≥ 1.

    ``CONSTANT`` uses ``mu``; ``POWER`` uses ``c·ℓ^(−alpha)``;
    ``INVERSE_STRONG`` uses ``1/(m·ℓ)``. μ(0) is 1 by convention.
    A constant step of zero is accepted and freezes the iterate.
    """

    kind: StepKind
    mu: float = 0.0
    c: float = 1.0
    alpha: float = 1.0
    m: float = 1.0

    def __post_init__(self) -> None:
        if self.kind is StepKind.CONSTANT:
            if not (np.isfinite(self.mu) and self.mu >= 0):
                raise ScheduleError(f"constant step must be >= 0, got {self.mu}")
        elif self.kind is StepKind.POWER:
            if not self.c > 0:
                raise ScheduleError(f"power schedule needs C > 0, got {self.c}")
            if not 0.0 <= self.alpha <= 1.0:
                raise ScheduleError(
                    f"power exponent must be in [0, 1], got {self.alpha}"
                )
        elif not self.m > 0:
            raise ScheduleError(f"inverse schedule needs m > 0, got {self.m}")

    @classmethod
    def constant(cls, mu: float) -> StepSchedule:
        return cls(kind=StepKind.CONSTANT, mu=float(mu))

    @classmethod
    def power(cls, c: float, alpha: float) -> StepSchedule:
        return cls(kind=StepKind.POWER, c=float(c), alpha=float(alpha))

    @classmethod
    def inverse_strong(cls, m: float) -> StepSchedule:
        return cls(kind=StepKind.INVERSE_STRONG, m=float(m))

    def steps(self, K: int) -> Vector:
        """μ(1), ..., μ(K)."""
        ell = np.arange(1, K + 1, dtype=float)
        if self.kind is StepKind.CONSTANT:
            return np.full(K, self.mu)
        if self.kind is StepKind.POWER:
            return self.c * ell ** (-self.alpha)
        return 1.0 / (self.m * ell)

    def step(self, ell: int) -> float:
        if ell == 0:
            return 1.0
        return float(self.steps(ell)[-1])


class AveragingScheme(enum.Enum):
    LAST_ITERATE = "last-iterate"
    UNIFORM = "uniform"
    GAMMA = "gamma"
    INVERSE_STEP = "inverse-step"


def gamma_ratio(mu: float, m: float, B: float) -> float:
    """1 − mμ + Bμ², the per-step ratio of the gamma weights."""
    return 1.0 - m * mu + B * mu * mu


def averaging_weights(
    scheme: AveragingScheme,
    schedule: StepSchedule,
    K: int,
    *,
    m: float | None = None,
    B: float | None = None,
) -> Vector:
    """Convex weights λ(0..K) over the iterates x(0), ..., x(K).

    The gamma scheme needs the strong-convexity constant *m* and the growth
    constant *B*; it puts λ(ℓ) ∝ (1 − mμ + Bμ²)^(−ℓ) on ℓ ≥ 1. The
    inverse-step scheme weighs x(ℓ) by 1/μ(ℓ), including x(0) with μ(0) = 1.

    Raises:
        ScheduleError: If K < 1, or the scheme is incompatible with the schedule.
    """
    if K < 1:
        raise ScheduleError(f"averaging needs K >= 1, got {K}")
    weights = np.zeros(K + 1)
    if scheme is AveragingScheme.LAST_ITERATE:
        weights[-1] = 1.0
    elif scheme is AveragingScheme.UNIFORM:
        weights[1:] = 1.0 / K
    elif scheme is AveragingScheme.GAMMA:
        if schedule.kind is not StepKind.CONSTANT:
            raise ScheduleError("gamma averaging needs a constant step size")
        if m is None or B is None:
            raise ScheduleError("gamma averaging needs m and B")
        ratio = gamma_ratio(schedule.mu, m, B)
        if ratio <= 0:
            raise ScheduleError(f"1 - m*mu + B*mu^2 must be positive, got {ratio:.6g}")
        ell = np.arange(1, K + 1, dtype=float)
        weights[1:] = softmax(-ell * np.log(ratio))
    else:
        steps = schedule.steps(K)
        if np.any(steps <= 0):
            raise ScheduleError("inverse-step averaging needs positive steps")
        inverse = np.concatenate([[1.0], 1.0 / steps])
        weights = inverse / inverse.sum()
    return weights


@frozen_slots
class SgdResult:
    """Output of one SGD run."""

    x_hat: Vector
    x_last: Vector
    batch: Batch
    steps: Vector
    path: Matrix | None = None

    @property
    def samples_used(self) -> int:
        return int(self.batch.shape[0])


def _check_start(feasible_set: FeasibleSet, x0: Vector, K: int) -> Vector:
    if K < 1:
        raise ScheduleError(f"SGD needs K >= 1, got {K}")
    x0 = np.asarray(x0, dtype=float)
    if not feasible_set.contains(x0):
        raise InfeasiblePointError("x0 lies outside the feasible set; project it first")
    return x0


def run_sgd(
    model: LossModel,
    sampler: Sampler,
    x0: Vector,
    K: int,
    schedule: StepSchedule,
    averaging: AveragingScheme,
    feasible_set: FeasibleSet,
    rng: np.random.Generator,
    *,
    m: float | None = None,
    B: float | None = None,
    record_path: bool = False,
) -> SgdResult:
    """Run K projected SGD steps, one fresh sample per step.

    x(ℓ+1) = Π_X[x(ℓ) − μ(ℓ+1)∇ₓℓ(x(ℓ), z(ℓ))], then average the iterates
    with the requested scheme.

    Args:
        model: Loss model supplying per-sample gradients.
        sampler: ``sampler(k, rng)`` returning k samples as rows.
        x0: Feasible starting point.
        K: Number of iterations (and samples).
        schedule: Step sizes.
        averaging: How x(0..K) are combined into x̂.
        feasible_set: Projection target.
        rng: Source of randomness handed to the sampler.
        m: Strong-convexity constant (gamma averaging only).
        B: Gradient-growth constant (gamma averaging only).
        record_path: Keep all K+1 iterates.

    Returns:
        The averaged point, last iterate, consumed batch and step sizes.
    """
    x = _check_start(feasible_set, x0, K).copy()
    weights = averaging_weights(averaging, schedule, K, m=m, B=B)
    steps = schedule.steps(K)
    batch = np.asarray(sampler(K, rng), dtype=float)
    if batch.shape[0] != K:
        raise ScheduleError(f"sampler returned {batch.shape[0]} samples, expected {K}")

    path = np.empty((K + 1, x.size)) if record_path else None
    if path is not None:
        path[0] = x
    x_hat = weights[0] * x
    for ell in range(K):
        g = model.grads(x, batch[ell : ell + 1])[0]
        x = project(feasible_set, x - steps[ell] * g)
        x_hat = x_hat + weights[ell + 1] * x
        if path is not None:
            path[ell + 1] = x
    return SgdResult(x_hat=x_hat, x_last=x, batch=batch, steps=steps, path=path)


def run_sgd_replicates(
    model: LossModel,
    sampler: Sampler,
    x0: Vector,
    K: int,
    schedule: StepSchedule,
    averaging: AveragingScheme,
    feasible_set: FeasibleSet,
    rng: np.random.Generator,
    replicates: int,
    *,
    m: float | None = None,
    B: float | None = None,
) -> tuple[Matrix, Matrix]:
    """Run independent SGD chains in lockstep.

    Returns:
        ``(x_hat, x_last)``, each of shape ``(replicates, d)``.
    """
    x0 = _check_start(feasible_set, x0, K)
    weights = averaging_weights(averaging, schedule, K, m=m, B=B)
    steps = schedule.steps(K)
    samples = np.asarray(sampler(K * replicates, rng), dtype=float)
    samples = samples.reshape(K, replicates, -1)

    X = np.tile(x0, (replicates, 1))
    x_hat = weights[0] * X
    for ell in range(K):
        G = model.grads(X, samples[ell])
        X = project(feasible_set, X - steps[ell] * G)
        x_hat = x_hat + weights[ell + 1] * X
    return x_hat, X
