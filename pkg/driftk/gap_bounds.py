"""Mean-gap bounds b(d0, K) for projected SGD.

Every bound is built on the iterate-distance recursion

    E[d(ℓ)] ≤ q(ℓ)·E[d(ℓ−1)] + A·μ(ℓ)²,    q(ℓ) = 1 − 2mμ(ℓ) + Bμ(ℓ)²,

unwound in log space so that products over long horizons do not underflow.
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np
from scipy.special import logsumexp

from driftk.sgd import AveragingScheme, StepKind, StepSchedule, gamma_ratio
from driftk.types import Vector, frozen_slots

_TINY = np.finfo(float).tiny


class InadmissibleStepError(ValueError):
    """Raised when a step size breaks the conditions a bound relies on."""


class NonFactoringBoundError(ValueError):
    """Raised when α(K), β(K) are requested from a bound that is not affine in d0."""


@frozen_slots
class FunctionParams:
    """Problem constants ψ = (m, M, A, B) plus the quantities the drift
    corrections need.

    ``C_g`` is the per-component sub-Gaussian constant of the gradient error
    and ``L_G`` the per-sample gradient Lipschitz constant; both are only
    required in certified drift mode.
    """

    m: float
    M: float
    A: float = 0.0
    B: float = 0.0
    diam_sq: float = 1.0
    C_g: float | None = None
    L_G: float | None = None

    def __post_init__(self) -> None:
        if not self.m > 0:
            raise ValueError(f"strong convexity m must be positive, got {self.m}")
        if self.M < self.m:
            raise ValueError(f"need M >= m, got M={self.M}, m={self.m}")
        if self.A < 0 or self.B < 0:
            raise ValueError("growth constants A and B must be nonnegative")
        if not self.diam_sq > 0:
            raise ValueError(f"squared diameter must be positive, got {self.diam_sq}")
        for name in ("C_g", "L_G"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")

    def replace(self, **changes: float | None) -> FunctionParams:
        return dataclasses.replace(self, **changes)


class BoundKind(enum.Enum):
    LAST_ITERATE = "last-iterate"
    CONST_STEP_AVG = "const-step-avg"
    NEDIC_LEE_AVG = "nedic-lee-avg"
    QUADRATIC_AVG = "quadratic-avg"
    CLOSED_FORM_D = "closed-form-d"


FACTORIZABLE = frozenset({BoundKind.LAST_ITERATE, BoundKind.CONST_STEP_AVG})

_AVERAGING = {
    BoundKind.LAST_ITERATE: AveragingScheme.LAST_ITERATE,
    BoundKind.CONST_STEP_AVG: AveragingScheme.GAMMA,
    BoundKind.NEDIC_LEE_AVG: AveragingScheme.INVERSE_STEP,
    BoundKind.QUADRATIC_AVG: AveragingScheme.UNIFORM,
    BoundKind.CLOSED_FORM_D: AveragingScheme.LAST_ITERATE,
}

_SCHEDULE = {
    BoundKind.LAST_ITERATE: None,
    BoundKind.CONST_STEP_AVG: StepKind.CONSTANT,
    BoundKind.NEDIC_LEE_AVG: StepKind.INVERSE_STRONG,
    BoundKind.QUADRATIC_AVG: StepKind.POWER,
    BoundKind.CLOSED_FORM_D: StepKind.POWER,
}


# ---------------------------------------------------------------------------
# Iterate-distance recursion
# ---------------------------------------------------------------------------


def _log_contractions(K: int, schedule: StepSchedule, params: FunctionParams):
    """Return (μ(1..K), log q(1..K)) after checking q(ℓ) ∈ [0, 1)."""
    steps = schedule.steps(K)
    q = 1.0 - 2.0 * params.m * steps + params.B * steps**2
    bad = np.flatnonzero((q < 0.0) | (q >= 1.0))
    if bad.size:
        ell = int(bad[0]) + 1
        raise InadmissibleStepError(
            f"1 - 2m*mu + B*mu^2 = {q[bad[0]]:.6g} at step {ell} is outside [0, 1)"
        )
    return steps, np.log(np.maximum(q, _TINY))


def _d_factors(
    K: int, schedule: StepSchedule, params: FunctionParams
) -> tuple[float, float]:
    if K == 0:
        return 1.0, 0.0
    steps, log_q = _log_contractions(K, schedule, params)
    # tail[ℓ] = Σ_{i>ℓ} log q(i) for ℓ = 0..K
    tail = np.append(np.cumsum(log_q[::-1])[::-1], 0.0)
    alpha = math.exp(tail[0])
    if params.A == 0.0 or not np.any(steps > 0):
        return alpha, 0.0
    with np.errstate(divide="ignore"):
        log_terms = 2.0 * np.log(steps) + tail[1:]
    return alpha, params.A * math.exp(logsumexp(log_terms))


def d_recursion_bound(
    d0: float, K: int, schedule: StepSchedule, params: FunctionParams
) -> float:
    """Unwound bound on E[d(K)] = E‖x(K) − x*‖² starting from E[d(0)] = d0.

    d0·Π q(ℓ) + A·Σ_ℓ μ(ℓ)² Π_{i>ℓ} q(i).

    Raises:
        InadmissibleStepError: If some q(ℓ) falls outside [0, 1).
    """
    alpha, beta = _d_factors(K, schedule, params)
    return alpha * d0 + beta


def d_recursion_path(
    d0: float, K: int, schedule: StepSchedule, params: FunctionParams
) -> Vector:
    """Bounds on E[d(0)], ..., E[d(K)] from the same recursion."""
    if K == 0:
        return np.array([float(d0)])
    steps, log_q = _log_contractions(K, schedule, params)
    log_prod = np.concatenate([[0.0], np.cumsum(log_q)])
    with np.errstate(divide="ignore"):
        start = math.log(d0) if d0 > 0 else -np.inf
        terms = np.concatenate(
            [[start], np.log(params.A * steps**2) - log_prod[1:]]
        )
    return np.exp(log_prod + np.logaddexp.accumulate(terms))


def _phi(beta: float, t: float) -> float:
    if beta == 0.0:
        return math.log(t)
    return (t**beta - 1.0) / beta


def closed_form_d_bound(
    d0: float, ell: int, C: float, alpha: float, params: FunctionParams
) -> float:
    """Closed-form (looser) bound on E[d(ℓ)] for μ(ℓ) = C·ℓ^(−α).

    Raises:
        InadmissibleStepError: If α ∉ [0, 1] or B ≤ 0.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InadmissibleStepError(
            f"closed-form bound needs 0 <= alpha <= 1, got {alpha}"
        )
    if params.B <= 0.0:
        raise InadmissibleStepError("closed-form bound divides by B and needs B > 0")
    if ell < 1:
        raise ValueError(f"closed-form bound is defined for ell >= 1, got {ell}")
    m, A, B = params.m, params.A, params.B
    start = d0 + A / B
    if alpha < 1.0:
        growth = 2.0 * B * C**2 * _phi(1.0 - 2.0 * alpha, ell)
        exponent = growth - (m * C / 4.0) * ell ** (1.0 - alpha)
        return 2.0 * math.exp(exponent) * start + 2.0 * A * C / (m * ell**alpha)
    mc = m * C
    return (
        math.exp(B * C**2 - mc * math.log(ell)) * start
        + A * C**2 * _phi(mc / 2.0 - 1.0, ell) / ell ** (mc / 2.0)
    )


# ---------------------------------------------------------------------------
# Mean-gap bounds
# ---------------------------------------------------------------------------


def b_last_iterate(
    d0: float, K: int, schedule: StepSchedule, params: FunctionParams
) -> float:
    """½M times the d-recursion bound (no averaging)."""
    alpha, beta = _d_factors(K, schedule, params)
    return 0.5 * params.M * alpha * d0 + 0.5 * params.M * beta


def _const_step_factors(
    K: int, mu: float, params: FunctionParams
) -> tuple[float, float]:
    ratio = gamma_ratio(mu, params.m, params.B)
    if not (mu > 0 and 0.0 < ratio < 1.0):
        raise InadmissibleStepError(
            f"constant step {mu} gives 1 - m*mu + B*mu^2 = {ratio:.6g}, outside (0, 1)"
        )
    ell = np.arange(K + 1, dtype=float)
    log_sum = logsumexp(-ell * math.log(ratio))
    return math.exp(-math.log(2.0 * mu) - log_sum), 0.5 * params.A * mu


def b_const_step_avg(d0: float, K: int, mu: float, params: FunctionParams) -> float:
    """Bound for a constant step with gamma-weighted averaging.

    d0 / (2μ Σ_{ℓ=0}^{K} γ(ℓ)) + ½Aμ with γ(ℓ) = (1 − mμ + Bμ²)^(−ℓ).
    """
    alpha, beta = _const_step_factors(K, mu, params)
    return alpha * d0 + beta


def b_nedic_lee(
    d0: float, K: int, params: FunctionParams, gamma_bounds: Vector | None = None
) -> float:
    """Bound for μ(ℓ) = 1/(mℓ) with inverse-step weighted averaging.

    ``gamma_bounds[ℓ]`` must upper-bound E[d(ℓ)] for ℓ = 0..K; by default it
    comes from :func:`d_recursion_path`, capped at diam(X)², and falls back to
    diam(X)² alone when the recursion is inadmissible for 1/(mℓ). It is not
    needed when B = 0.
    """
    if gamma_bounds is None:
        if params.B == 0.0:
            gamma_sum = 0.0
        else:
            schedule = StepSchedule.inverse_strong(params.m)
            try:
                path = d_recursion_path(d0, K, schedule, params)
            except InadmissibleStepError:
                path = np.full(K + 1, params.diam_sq)
            gamma_sum = float(np.minimum(path, params.diam_sq).sum())
    else:
        gamma_bounds = np.asarray(gamma_bounds, dtype=float)
        if gamma_bounds.shape != (K + 1,):
            raise ValueError(
                f"gamma_bounds must have length K+1 = {K + 1}, got {gamma_bounds.size}"
            )
        gamma_sum = float(gamma_bounds.sum())
    numerator = 0.5 * d0 + 0.5 * (K + 1) * params.A + 0.5 * params.B * gamma_sum
    return numerator / (1.0 + 0.5 * params.m * (K + 1) * (K + 2))


def b_quadratic_avg(
    d0: float,
    K: int,
    schedule: StepSchedule,
    params: FunctionParams,
    d_bounds: Vector | None = None,
) -> float:
    """Bound for uniform averaging with μ(ℓ) = C·ℓ^(−α), ½ ≤ α ≤ 1, on
    losses whose gradients are exactly linear in x.

    The root mean squared distance of the average is bounded by a Minkowski
    sum of five terms built from per-iterate bounds ``d_bounds`` on E[d(0..K)]
    (default: the d-recursion); the result is ½M times its square.
    """
    if schedule.kind is not StepKind.POWER or not 0.5 <= schedule.alpha <= 1.0:
        raise InadmissibleStepError(
            "quadratic averaging needs mu = C*l^-alpha with 1/2 <= alpha <= 1"
        )
    if K < 1:
        raise ValueError(f"quadratic averaging needs K >= 1, got {K}")
    if d_bounds is None:
        d = d_recursion_path(d0, K, schedule, params)
    else:
        d = np.asarray(d_bounds, dtype=float)
        if d.shape != (K + 1,):
            raise ValueError(f"d_bounds must have length K+1 = {K + 1}, got {d.size}")
    root_d = np.sqrt(d)
    inverse = 1.0 / schedule.steps(K)
    telescoping = float(np.sum(np.abs(np.diff(inverse)) * root_d[1:K]))
    drift_terms = (telescoping + inverse[0] * root_d[0] + inverse[-1] * root_d[K]) / K
    noise = math.sqrt(params.A / K)
    curvature = math.sqrt(2.0 * params.B * float(d[:K].sum())) / K
    root = (drift_terms + noise + curvature) / params.m
    return 0.5 * params.M * root**2


def factorize(
    kind: BoundKind, K: int, schedule: StepSchedule, params: FunctionParams
) -> tuple[float, float]:
    """Return (α(K), β(K)) with b(d0, K) = α(K)·d0 + β(K).

    Raises:
        NonFactoringBoundError: For kinds that are not affine in d0.
    """
    if kind is BoundKind.LAST_ITERATE:
        alpha, beta = _d_factors(K, schedule, params)
        return 0.5 * params.M * alpha, 0.5 * params.M * beta
    if kind is BoundKind.CONST_STEP_AVG:
        if schedule.kind is not StepKind.CONSTANT:
            raise InadmissibleStepError("const-step-avg needs a constant schedule")
        return _const_step_factors(K, schedule.mu, params)
    raise NonFactoringBoundError(f"{kind.value} bound is non-factoring")


# ---------------------------------------------------------------------------
# Bound objects and step schedules derived from ψ
# ---------------------------------------------------------------------------


def step_ceiling(params: FunctionParams, kind: BoundKind) -> float:
    """Supremum step size that keeps *kind*'s contraction factor admissible."""
    m, B = params.m, params.B
    if kind is BoundKind.CONST_STEP_AVG:
        if 4.0 * B > m * m:
            return m / B
        return 2.0 / (m + math.sqrt(m * m - 4.0 * B))
    if B >= m * m:
        return 2.0 * m / B
    return 1.0 / (m + math.sqrt(m * m - B))


def make_schedule(
    kind: BoundKind, params: FunctionParams, scale: float = 0.5, alpha: float = 0.75
) -> StepSchedule:
    """Step schedule for *kind*, sized as ``scale`` times the admissible ceiling."""
    if not 0.0 < scale < 1.0:
        raise InadmissibleStepError(f"step scale must be in (0, 1), got {scale}")
    if kind is BoundKind.NEDIC_LEE_AVG:
        return StepSchedule.inverse_strong(params.m)
    ceiling = step_ceiling(params, kind)
    if kind is BoundKind.CONST_STEP_AVG:
        return StepSchedule.constant(scale * ceiling)
    return StepSchedule.power(scale * ceiling, alpha)


@frozen_slots
class GapBound:
    """A mean-gap bound b(d0, K) of a given kind, callable as ``bound(d0, K)``."""

    kind: BoundKind
    schedule: StepSchedule
    params: FunctionParams

    def __post_init__(self) -> None:
        required = _SCHEDULE[self.kind]
        if required is not None and self.schedule.kind is not required:
            raise InadmissibleStepError(
                f"{self.kind.value} bound needs a {required.value} schedule, "
                f"got {self.schedule.kind.value}"
            )

    @classmethod
    def for_params(
        cls,
        kind: BoundKind,
        params: FunctionParams,
        scale: float = 0.5,
        alpha: float = 0.75,
    ) -> GapBound:
        schedule = make_schedule(kind, params, scale, alpha)
        return cls(kind=kind, schedule=schedule, params=params)

    @property
    def averaging(self) -> AveragingScheme:
        return _AVERAGING[self.kind]

    @property
    def factorizable(self) -> bool:
        return self.kind in FACTORIZABLE

    def __call__(self, d0: float, K: int) -> float:
        if self.kind is BoundKind.LAST_ITERATE:
            return b_last_iterate(d0, K, self.schedule, self.params)
        if self.kind is BoundKind.CONST_STEP_AVG:
            return b_const_step_avg(d0, K, self.schedule.mu, self.params)
        if self.kind is BoundKind.NEDIC_LEE_AVG:
            return b_nedic_lee(d0, K, self.params)
        if self.kind is BoundKind.QUADRATIC_AVG:
            return b_quadratic_avg(d0, K, self.schedule, self.params)
        if K == 0:
            return 0.5 * self.params.M * d0
        return 0.5 * self.params.M * closed_form_d_bound(
            d0, K, self.schedule.c, self.schedule.alpha, self.params
        )

    def factors(self, K: int) -> tuple[float, float]:
        return factorize(self.kind, K, self.schedule, self.params)
