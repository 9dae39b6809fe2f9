"""Estimates of the problem constants ψ = (m, M, A, B) from sample batches.

One-step estimators look at a single task's batch. :func:`combine_params`
averages them over tasks and widens the result by a slack t_n in the
conservative direction (m down, M, A and B up).
"""

from __future__ import annotations

import enum
from collections.abc import Sequence

import numpy as np

from driftk.drift import TnSchedule, tn
from driftk.gap_bounds import FunctionParams
from driftk.objective import (
    CapabilityError,
    FeasibleSet,
    LossModel,
    empirical_gradient,
    empirical_hessian,
    empirical_loss,
    finite_difference_gradient,
    nonempty_batch,
    project,
)
from driftk.types import Batch, Matrix, Vector, frozen_slots

EIGEN_STEPS = 25
EIGEN_STEP_FRACTION = 0.1


class ParamEstimateError(ValueError):
    """Raised when ψ cannot be estimated or the estimate is unusable."""


class Probe(enum.Enum):
    """Where the Hessian estimators look for extreme curvature."""

    GRID = "grid"
    EIGEN_GRADIENT = "eigen-gradient"


class ParamMethod(enum.Enum):
    HESSIAN = "hessian"
    EIGEN_GRADIENT = "eigen-gradient"
    HEURISTIC = "heuristic"
    QUADRATIC = "quadratic"


@frozen_slots
class OneStepParams:
    """(m̃, M̃, Ã, B̃) from one task's batch."""

    m: float
    M: float
    A: float
    B: float


@frozen_slots
class ParamEstimates:
    """Running means of one-step estimates after n tasks, with slack t_n."""

    n: int
    m_hat: float
    M_hat: float
    A_hat: float
    B_hat: float
    slack: float

    @property
    def m_adjusted(self) -> float:
        return self.m_hat - self.slack

    @property
    def M_adjusted(self) -> float:
        return self.M_hat + self.slack

    @property
    def A_adjusted(self) -> float:
        return self.A_hat + self.slack

    @property
    def B_adjusted(self) -> float:
        return self.B_hat + self.slack

    def as_function_params(
        self, diam_sq: float, C_g: float | None = None, L_G: float | None = None
    ) -> FunctionParams:
        """Adjusted ψ ready for the gap bounds.

        Raises:
            ParamEstimateError: If the adjusted m is not positive.
        """
        m = self.m_adjusted
        if not m > 0:
            raise ParamEstimateError(
                f"adjusted strong convexity m_hat - t_n = {m:.6g} is not positive"
            )
        return FunctionParams(
            m=m,
            M=max(self.M_adjusted, m),
            A=max(self.A_adjusted, 0.0),
            B=max(self.B_adjusted, 0.0),
            diam_sq=diam_sq,
            C_g=C_g,
            L_G=L_G,
        )


# ---------------------------------------------------------------------------
# Curvature estimators
# ---------------------------------------------------------------------------


def heuristic_probes(feasible_set: FeasibleSet) -> Matrix:
    """The centre and the centre ± half of the half-width along each axis."""
    center = feasible_set.center
    offsets = np.diag(feasible_set.half_widths / 2.0)
    return np.vstack([center, center + offsets, center - offsets])


def _require_hessian(model: LossModel) -> None:
    if not model.has_hessian:
        raise CapabilityError(f"{type(model).__name__} does not provide Hessians")


def eigen_gradient_probe(
    model: LossModel,
    batch: Batch,
    feasible_set: FeasibleSet,
    *,
    smallest: bool = True,
    steps: int = EIGEN_STEPS,
    step_fraction: float = EIGEN_STEP_FRACTION,
) -> float:
    """Follow ∇ₓλ of the mean Hessian's extreme eigenvalue from the centre.

    ∂λ/∂x_k = vᵀ(∂T/∂x_k)v for the unit eigenvector v of the mean Hessian T.
    Each step moves ``step_fraction·diam(X)`` along the normalized gradient
    (downhill for λ_min, uphill for λ_max) and projects back onto X. Returns
    the eigenvalue at the final point.
    """
    _require_hessian(model)
    batch = nonempty_batch(batch, "eigen-gradient probe")
    pick = 0 if smallest else -1
    direction = -1.0 if smallest else 1.0
    step = step_fraction * feasible_set.diameter
    x = feasible_set.center

    def hessian_at(y: Vector) -> Matrix:
        return empirical_hessian(model, y, batch)

    for _ in range(steps):
        _, vectors = np.linalg.eigh(hessian_at(x))
        v = vectors[:, pick]
        grad = np.einsum("i,kij,j->k", v, finite_difference_gradient(hessian_at, x), v)
        norm = np.linalg.norm(grad)
        if norm == 0.0:
            break
        x = project(feasible_set, x + direction * step * grad / norm)
    return float(np.linalg.eigvalsh(hessian_at(x))[pick])


def _grid_extreme(model, batch, feasible_set, smallest: bool) -> float:
    eig = [
        np.linalg.eigvalsh(empirical_hessian(model, x, batch))
        for x in heuristic_probes(feasible_set)
    ]
    return float(min(e[0] for e in eig)) if smallest else float(max(e[-1] for e in eig))


def m_hat_hessian(
    model: LossModel, batch: Batch, feasible_set: FeasibleSet, probe: Probe = Probe.GRID
) -> float:
    """Smallest eigenvalue of the mean Hessian over the probed points.

    Raises:
        CapabilityError: If the model has no Hessian.
    """
    _require_hessian(model)
    if probe is Probe.EIGEN_GRADIENT:
        return eigen_gradient_probe(model, batch, feasible_set, smallest=True)
    return _grid_extreme(model, batch, feasible_set, smallest=True)


def M_hat_hessian(
    model: LossModel, batch: Batch, feasible_set: FeasibleSet, probe: Probe = Probe.GRID
) -> float:
    """Largest eigenvalue of the mean Hessian over the probed points."""
    _require_hessian(model)
    if probe is Probe.EIGEN_GRADIENT:
        return eigen_gradient_probe(model, batch, feasible_set, smallest=False)
    return _grid_extreme(model, batch, feasible_set, smallest=False)


def m_M_heuristic(
    model: LossModel, batch: Batch, probes: Matrix
) -> tuple[float, float]:
    """Min and max secant curvature over ordered pairs of probe points.

    For each pair (i, j) the ratio is
    [L̄(x_i) − L̄(x_j) − ⟨ḡ(x_j), x_i − x_j⟩] / (½‖x_i − x_j‖²).

    Raises:
        ParamEstimateError: With fewer than two probes or a repeated probe.
    """
    X = np.atleast_2d(np.asarray(probes, dtype=float))
    if X.shape[0] < 2:
        raise ParamEstimateError("secant curvature needs at least two probe points")
    batch = nonempty_batch(batch, "secant curvature")
    losses = np.array([empirical_loss(model, x, batch) for x in X])
    grads = np.array([empirical_gradient(model, x, batch) for x in X])
    diff = X[:, None, :] - X[None, :, :]
    half_sq = 0.5 * np.einsum("ijk,ijk->ij", diff, diff)
    off_diagonal = ~np.eye(len(X), dtype=bool)
    if np.any(half_sq[off_diagonal] == 0.0):
        raise ParamEstimateError("probe points must be distinct")
    numerator = losses[:, None] - losses[None, :] - np.einsum("jk,ijk->ij", grads, diff)
    ratios = numerator[off_diagonal] / half_sq[off_diagonal]
    return float(ratios.min()), float(ratios.max())


def quadratic_specific(batch: Batch, lam: float) -> tuple[float, float]:
    """λ plus the extreme eigenvalues of (1/K)Σwwᵀ, for z = (w, y) rows."""
    batch = nonempty_batch(batch, "quadratic estimate")
    w = batch[:, :-1]
    eig = np.linalg.eigvalsh(w.T @ w / len(w))
    return lam + float(eig[0]), lam + float(eig[-1])


def B_hat(M_tilde: float) -> float:
    if M_tilde < 0:
        raise ParamEstimateError(f"M estimate must be nonnegative, got {M_tilde}")
    return 2.0 * M_tilde**2


def A_hat(
    model: LossModel, x: Vector, batch: Batch, m_prev_adj: float, M_prev_adj: float
) -> float:
    """(2/K)Σ‖∇ℓ(x, z)‖² + 4(M/m)²‖ḡ(x)‖² with the previous adjusted (m, M).

    Raises:
        ParamEstimateError: If ``m_prev_adj`` is not positive.
    """
    if not m_prev_adj > 0:
        raise ParamEstimateError(
            f"A estimate needs a positive adjusted m, got {m_prev_adj}"
        )
    batch = nonempty_batch(batch, "A estimate")
    grads = model.grads(x, batch)
    mean_sq = float(np.einsum("ij,ij->i", grads, grads).mean())
    gbar = grads.mean(axis=0)
    return 2.0 * mean_sq + 4.0 * (M_prev_adj / m_prev_adj) ** 2 * float(gbar @ gbar)


# ---------------------------------------------------------------------------
# Running estimates
# ---------------------------------------------------------------------------


def one_step_params(
    model: LossModel,
    x: Vector,
    batch: Batch,
    feasible_set: FeasibleSet,
    method: ParamMethod,
    previous: FunctionParams,
    lam: float | None = None,
) -> OneStepParams:
    """Estimate (m̃, M̃, Ã, B̃) for one task.

    ``previous`` supplies the adjusted (m, M) from the tasks before this one;
    Ã must not depend on the current batch through them.
    """
    if method is ParamMethod.QUADRATIC:
        if lam is None:
            raise ParamEstimateError("the quadratic estimator needs the penalty lambda")
        m, M = quadratic_specific(batch, lam)
    elif method is ParamMethod.HEURISTIC:
        m, M = m_M_heuristic(model, batch, heuristic_probes(feasible_set))
    else:
        probe = Probe.GRID if method is ParamMethod.HESSIAN else Probe.EIGEN_GRADIENT
        m = m_hat_hessian(model, batch, feasible_set, probe)
        M = M_hat_hessian(model, batch, feasible_set, probe)
    return OneStepParams(
        m=m,
        M=M,
        A=A_hat(model, x, batch, previous.m, previous.M),
        B=B_hat(max(M, 0.0)),
    )


def combine_params(
    history: Sequence[OneStepParams], tn_schedule: TnSchedule
) -> ParamEstimates:
    """Running means of the one-step estimates, with slack t_n.

    Raises:
        ParamEstimateError: If the history is empty.
    """
    if not history:
        raise ParamEstimateError("parameter estimates need at least one task")
    table = np.array([(h.m, h.M, h.A, h.B) for h in history], dtype=float)
    m, M, A, B = table.mean(axis=0)
    n = len(history)
    return ParamEstimates(
        n=n,
        m_hat=float(m),
        M_hat=float(M),
        A_hat=float(A),
        B_hat=float(B),
        slack=tn(tn_schedule, n),
    )
