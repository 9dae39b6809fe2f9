"""Sample-budget selection and mean-gap bookkeeping.

Given a gap bound b(d0, K), a drift value ρ and a target ε, the budget rule
picks the smallest K with b((√(2ε/m) + ρ)², K) ≤ ε. The controllers differ
in which ρ and which previous bound they feed into that rule.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from collections.abc import Callable
from typing import Protocol

import numpy as np
from scipy.optimize import brentq

from driftk.gap_bounds import FunctionParams, GapBound
from driftk.types import frozen_slots

K_MAX_DEFAULT = 1_000_000

BoundFn = Callable[[float, int], float]


class InfeasibleBudgetError(ValueError):
    """Raised when no budget K ≤ K_max reaches the target ε."""


class InadmissibleMapError(ValueError):
    """Raised when the propagation map does not contract (2α/m ≥ 1)."""


class Policy(enum.Enum):
    KNOWN_RHO = "known-rho"
    UPDATE_PAST = "update-past"
    NO_UPDATE = "no-update"


# ---------------------------------------------------------------------------
# Budget rule
# ---------------------------------------------------------------------------


def propagate_eps(
    eps_prev: float, rho: float, K: int, bound: BoundFn, params: FunctionParams
) -> float:
    """b((√(2ε_prev/m) + ρ)², K), the mean-gap bound one task later."""
    if eps_prev < 0:
        raise ValueError(f"previous gap bound must be nonnegative, got {eps_prev}")
    return bound((math.sqrt(2.0 * eps_prev / params.m) + rho) ** 2, K)


def _min_budget(ok: Callable[[int], bool], K_max: int, what: str) -> int:
    """Smallest K in [1, K_max] with ok(K), assuming ok is monotone in K."""
    if ok(1):
        return 1
    lo = hi = 1
    while True:
        if hi >= K_max:
            raise InfeasibleBudgetError(f"{what} is not reachable with K <= {K_max}")
        lo, hi = hi, min(2 * hi, K_max)
        if ok(hi):
            break
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def k_star(
    eps: float,
    rho: float,
    bound: BoundFn,
    params: FunctionParams,
    K_max: int = K_MAX_DEFAULT,
) -> int:
    """Minimal K with b((√(2ε/m) + ρ)², K) ≤ ε.

    Doubles from K = 1 until the rule holds, then bisects; this relies on b
    being nonincreasing in K.

    Raises:
        InfeasibleBudgetError: If no K ≤ K_max qualifies.
    """
    if not eps > 0:
        raise ValueError(f"target gap must be positive, got {eps}")
    d0 = (math.sqrt(2.0 * eps / params.m) + rho) ** 2
    return _min_budget(lambda K: bound(d0, K) <= eps, K_max, f"target gap {eps:g}")


def k_initial(
    eps: float, bound: BoundFn, diam_sq: float, K_max: int = K_MAX_DEFAULT
) -> int:
    """Smallest K with b(diam², K) ≤ ε: a bootstrap budget from a cold start."""
    if not eps > 0:
        raise ValueError(f"target gap must be positive, got {eps}")
    return _min_budget(
        lambda K: bound(diam_sq, K) <= eps, K_max, f"cold-start target gap {eps:g}"
    )


def bootstrap(
    K1: int, K2: int, bound: BoundFn, params: FunctionParams
) -> tuple[float, float]:
    """(ε_1, ε_2) = (b(diam², K1), b(diam², K2))."""
    if K1 < 1 or K2 < 1:
        raise ValueError(f"bootstrap budgets must be >= 1, got {K1}, {K2}")
    return bound(params.diam_sq, K1), bound(params.diam_sq, K2)


def check_monotone_in_k(
    bound: BoundFn, d0: float, K_max: int = K_MAX_DEFAULT, samples: int = 24
) -> bool:
    """Sample b(d0, ·) on a geometric grid and check it never increases."""
    grid = np.unique(np.geomspace(1, K_max, samples).astype(int))
    values = np.array([bound(d0, int(K)) for K in grid])
    return bool(np.all(np.diff(values) <= 1e-12 * np.maximum(1.0, values[:-1])))


# ---------------------------------------------------------------------------
# Ledger and controllers
# ---------------------------------------------------------------------------


@frozen_slots
class GapLedger:
    """Bootstrap values, per-task bounds ε_n and budgets K_n so far."""

    policy: Policy
    eps_bootstrap: tuple[float, float]
    eps: tuple[float, ...] = ()
    budgets: tuple[int, ...] = ()

    @classmethod
    def start(
        cls, policy: Policy, K1: int, K2: int, eps1: float, eps2: float
    ) -> GapLedger:
        return cls(
            policy=policy,
            eps_bootstrap=(eps1, eps2),
            eps=(eps1, eps2),
            budgets=(K1, K2),
        )

    @property
    def n(self) -> int:
        return len(self.budgets)

    def append(self, K: int, eps: float) -> GapLedger:
        if K < 1:
            raise ValueError(f"budgets must be >= 1, got {K}")
        return dataclasses.replace(
            self, eps=self.eps + (eps,), budgets=self.budgets + (K,)
        )


def recompute_past(
    ledger: GapLedger, rho: float, bound: BoundFn, params: FunctionParams
) -> tuple[float, ...]:
    """ε̂_1..ε̂_{n} rebuilt from the bootstrap anchors with the latest ρ.

    The first two entries are the bootstrap values; later ones follow
    ε̂_i = b((√(2ε̂_{i−1}/m) + ρ)², K_i).
    """
    eps = list(ledger.eps_bootstrap)
    for K in ledger.budgets[2:]:
        eps.append(propagate_eps(eps[-1], rho, K, bound, params))
    return tuple(eps[: ledger.n])


def choose_K_update_past(
    ledger: GapLedger,
    rho_certified: float,
    eps: float,
    bound: BoundFn,
    params: FunctionParams,
    K_max: int = K_MAX_DEFAULT,
) -> int:
    """K_n from the recomputed previous bound max{ε̂_{n−1}, ε} and ρ̂ + t.

    The ledger holds tasks 1..n−1, so n = ledger.n + 1.

    Raises:
        InfeasibleBudgetError: If no K ≤ K_max qualifies.
    """
    n = ledger.n + 1
    if n < 3:
        raise ValueError(
            f"update-past chooses K_n for n >= 3, got n = {n}; "
            "the ledger needs both bootstrap tasks"
        )
    eps_prev = max(recompute_past(ledger, rho_certified, bound, params)[-1], eps)
    d0 = (math.sqrt(2.0 * eps_prev / params.m) + rho_certified) ** 2
    return _min_budget(lambda K: bound(d0, K) <= eps, K_max, f"target gap {eps:g}")


def choose_K_no_update(
    rho_certified: float,
    eps: float,
    bound: BoundFn,
    params: FunctionParams,
    K_max: int = K_MAX_DEFAULT,
) -> int:
    """K* with the certified drift estimate in place of ρ."""
    return k_star(eps, rho_certified, bound, params, K_max)


class BudgetController(Protocol):
    """Chooses K_n and records ε_n for one policy."""

    policy: Policy

    def choose(
        self,
        ledger: GapLedger,
        rho_certified: float,
        bound: BoundFn,
        params: FunctionParams,
    ) -> int: ...

    def record(
        self,
        ledger: GapLedger,
        K: int,
        rho_certified: float,
        bound: BoundFn,
        params: FunctionParams,
    ) -> GapLedger: ...


@frozen_slots
class KnownRhoController:
    """Uses the true ρ and K_n = K* from the third task on."""

    eps: float
    rho: float
    K_max: int = K_MAX_DEFAULT
    policy: Policy = Policy.KNOWN_RHO

    def choose(self, ledger, rho_certified, bound, params) -> int:
        return k_star(self.eps, self.rho, bound, params, self.K_max)

    def record(self, ledger, K, rho_certified, bound, params) -> GapLedger:
        eps = propagate_eps(ledger.eps[-1], self.rho, K, bound, params)
        return ledger.append(K, eps)


@frozen_slots
class NoUpdateController:
    """K* with ρ̂_{n−1} + t_{n−1}; past bounds are never revisited."""

    eps: float
    K_max: int = K_MAX_DEFAULT
    policy: Policy = Policy.NO_UPDATE

    def choose(self, ledger, rho_certified, bound, params) -> int:
        return choose_K_no_update(rho_certified, self.eps, bound, params, self.K_max)

    def record(self, ledger, K, rho_certified, bound, params) -> GapLedger:
        return ledger.append(
            K, propagate_eps(ledger.eps[-1], rho_certified, K, bound, params)
        )


@frozen_slots
class UpdatePastController:
    """Rebuilds every past bound with the latest drift estimate."""

    eps: float
    K_max: int = K_MAX_DEFAULT
    policy: Policy = Policy.UPDATE_PAST

    def choose(self, ledger, rho_certified, bound, params) -> int:
        return choose_K_update_past(
            ledger, rho_certified, self.eps, bound, params, self.K_max
        )

    def record(self, ledger, K, rho_certified, bound, params) -> GapLedger:
        eps_prev = recompute_past(ledger, rho_certified, bound, params)[-1]
        eps = propagate_eps(eps_prev, rho_certified, K, bound, params)
        return ledger.append(K, eps)


def make_controller(
    policy: Policy, eps: float, rho: float | None = None, K_max: int = K_MAX_DEFAULT
) -> BudgetController:
    if policy is Policy.KNOWN_RHO:
        if rho is None:
            raise ValueError("the known-rho policy needs rho")
        return KnownRhoController(eps=eps, rho=rho, K_max=K_max)
    if policy is Policy.UPDATE_PAST:
        return UpdatePastController(eps=eps, K_max=K_max)
    return NoUpdateController(eps=eps, K_max=K_max)


# ---------------------------------------------------------------------------
# Fixed point of the propagation map
# ---------------------------------------------------------------------------


@frozen_slots
class PhiMap:
    """φ(v) = α(√(2v/m) + ρ)² + β for a factorizable bound at fixed K."""

    alpha: float
    beta: float
    m: float
    rho: float

    def __call__(self, v: float) -> float:
        return self.alpha * (math.sqrt(2.0 * v / self.m) + self.rho) ** 2 + self.beta

    def derivative(self, v: float) -> float:
        if v <= 0:
            return math.inf if self.rho > 0 else self.contraction
        return self.contraction * (1.0 + self.rho * math.sqrt(self.m / (2.0 * v)))

    @property
    def contraction(self) -> float:
        """2α/m, the slope of φ as v → ∞."""
        return 2.0 * self.alpha / self.m

    @property
    def admissible(self) -> bool:
        return self.contraction < 1.0


def phi_map_for(bound: GapBound, K: int, m: float, rho: float) -> PhiMap:
    """PhiMap from the factorization b(d0, K) = α(K)·d0 + β(K)."""
    alpha, beta = bound.factors(K)
    return PhiMap(alpha=alpha, beta=beta, m=m, rho=rho)


@frozen_slots
class FixedPoint:
    value: float
    derivative: float
    iterations: int
    degenerate: bool = False
    converged: bool = True


def closed_form_fixed_point(phi: PhiMap) -> float:
    """Positive root u of (1 − 2α/m)u² − 2αρ√(2/m)u − (αρ² + β) = 0, squared."""
    a = 1.0 - phi.contraction
    b = 2.0 * phi.alpha * phi.rho * math.sqrt(2.0 / phi.m)
    c = phi.alpha * phi.rho**2 + phi.beta
    u = (b + math.sqrt(b * b + 4.0 * a * c)) / (2.0 * a)
    return u * u


def fixed_point(
    phi: PhiMap, tol: float = 1e-12, v0: float | None = None, max_iter: int = 100_000
) -> FixedPoint:
    """Iterate v ← φ(v) to the unique positive fixed point, then polish it.

    The iteration starts at ``v0``, normally the target ε; without one it
    starts at φ(0), one step from the origin. It stops once |φ(v) − v| ≤ tol
    or after ``max_iter`` steps, and ``converged`` records which. Either way
    the reported value is refined with a bracketing root finder. With
    ρ = β = 0 the only fixed point is 0, which is returned flagged as
    degenerate.

    Raises:
        InadmissibleMapError: If 2α/m ≥ 1.
    """
    if not phi.admissible:
        raise InadmissibleMapError(
            f"2*alpha/m = {phi.contraction:.6g} >= 1; the map has no stable fixed point"
        )
    if phi.rho == 0.0 and phi.beta == 0.0:
        return FixedPoint(
            value=0.0, derivative=phi.contraction, iterations=0, degenerate=True
        )

    v = phi(0.0) if v0 is None else float(v0)
    iterations = 0
    while abs(phi(v) - v) > tol and iterations < max_iter:
        v = phi(v)
        iterations += 1

    upper = 2.0 * max(v, closed_form_fixed_point(phi)) + tol
    value = brentq(
        lambda s: phi(s) - s,
        0.0,
        upper,
        xtol=tol * 1e-3,
        rtol=4 * np.finfo(float).eps,
    )
    return FixedPoint(
        value=value,
        derivative=phi.derivative(value),
        iterations=iterations,
        converged=abs(phi(v) - v) <= tol,
    )
