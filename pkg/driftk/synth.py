"""Synthetic drifting task sequences with known structure.

Regression and noisy-quadratic families have analytic minimizers that walk a
fixed distance ρ per task along a seeded unit direction, so realized gaps are
exact. The classification family rotates its class means on a circle and
has no closed-form minimizer.
"""

from __future__ import annotations

import math

import numpy as np
import pandas as pd

from driftk.drift import ChangeModel
from driftk.gap_bounds import FunctionParams
from driftk.objective import (
    TRAIN_STREAM,
    FeasibleSet,
    NoisyQuadraticLoss,
    PenalizedQuadraticLoss,
    SmoothedHingeLoss,
    TaskSequence,
    task_rng,
)
from driftk.types import Batch, Vector, frozen_slots


class SynthError(ValueError):
    """Raised for invalid synthetic task parameters."""


def _unit_direction(d: int, seed: int) -> tuple[float, ...]:
    v = np.random.default_rng(seed).standard_normal(d)
    return tuple(float(c) for c in v / np.linalg.norm(v))


def _walk_ball(
    direction: tuple[float, ...], rho: float, N: int, margin: float
) -> FeasibleSet:
    """Ball around the segment x*_1..x*_N with the given margin."""
    u = np.asarray(direction)
    half = (N - 1) * rho / 2.0
    return FeasibleSet.ball(half * u, half + margin)


def _check_horizon(d: int, N: int) -> None:
    if d < 1:
        raise SynthError(f"dimension must be >= 1, got {d}")
    if N < 1:
        raise SynthError(f"horizon must be >= 1, got {N}")


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------


@frozen_slots
class RegressionSequence:
    """Gaussian (w, y) with w ~ N(0, σ_w²I) and Cov(w, y) = r_n.

    r_n = (n−1)·ρ(σ_w² + λ)·u, so x*_n = r_n/(σ_w² + λ) moves exactly ρ per
    task; Var(y) = ‖r_n‖²/σ_w² + 1 keeps the joint covariance positive
    definite.
    """

    dimension: int
    sigma_w_sq: float
    lam: float
    rho: float
    horizon: int
    direction: tuple[float, ...]
    margin: float = 1.0

    change = ChangeModel.CONSTANT

    @property
    def model(self) -> PenalizedQuadraticLoss:
        return PenalizedQuadraticLoss(self.dimension, self.lam)

    @property
    def feasible_set(self) -> FeasibleSet:
        return _walk_ball(self.direction, self.rho, self.horizon, self.margin)

    @property
    def curvature(self) -> float:
        return self.sigma_w_sq + self.lam

    def cross_covariance(self, n: int) -> Vector:
        return (n - 1) * self.rho * self.curvature * np.asarray(self.direction)

    def minimizer(self, n: int) -> Vector:
        return self.cross_covariance(n) / self.curvature

    def sample(self, n: int, k: int, rng: np.random.Generator) -> Batch:
        w = rng.normal(0.0, math.sqrt(self.sigma_w_sq), size=(k, self.dimension))
        y = w @ self.cross_covariance(n) / self.sigma_w_sq + rng.standard_normal(k)
        return np.column_stack([w, y])

    def objective(self, n: int, x: Vector) -> float:
        """f_n(x) = ½(σ_y² − 2rᵀx + σ_w²‖x‖²) + ½λ‖x‖²."""
        x = np.asarray(x, dtype=float)
        r = self.cross_covariance(n)
        var_y = r @ r / self.sigma_w_sq + 1.0
        return 0.5 * float(var_y - 2.0 * r @ x + self.curvature * x @ x)

    def gap(self, n: int, x: Vector) -> float:
        delta = np.asarray(x, dtype=float) - self.minimizer(n)
        return 0.5 * self.curvature * float(delta @ delta)

    def known_params(self) -> FunctionParams:
        """ψ for the whole horizon.

        m = M = σ_w² + λ. The growth constants come from
        E‖∇ℓ‖² ≤ 2E‖H_z(x − x*)‖² + 2E‖∇ℓ(x*, z)‖² with Gaussian fourth
        moments, maximized over the horizon.
        """
        s2, lam, d = self.sigma_w_sq, self.lam, self.dimension
        far = (self.horizon - 1) * self.rho
        return FunctionParams(
            m=self.curvature,
            M=self.curvature,
            A=2.0 * ((d + 1) * lam**2 * far**2 + d * s2),
            B=2.0 * (s2**2 * (d + 2) + 2.0 * lam * s2 + lam**2),
            diam_sq=self.feasible_set.diameter ** 2,
        )


def make_regression(
    d: int,
    sigma_w_sq: float,
    lam: float,
    rho: float,
    N: int,
    seed: int = 0,
    margin: float = 1.0,
) -> RegressionSequence:
    """Penalized least squares with minimizers drifting exactly ρ per task.

    Raises:
        SynthError: If σ_w² ≤ 0 (the joint covariance would be singular) or
            another parameter is out of range.
    """
    _check_horizon(d, N)
    if not sigma_w_sq > 0:
        raise SynthError(f"feature variance must be positive, got {sigma_w_sq}")
    if lam < 0 or rho < 0 or not margin > 0:
        raise SynthError("need lambda >= 0, rho >= 0 and margin > 0")
    return RegressionSequence(
        dimension=d,
        sigma_w_sq=float(sigma_w_sq),
        lam=float(lam),
        rho=float(rho),
        horizon=N,
        direction=_unit_direction(d, seed),
        margin=float(margin),
    )


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


@frozen_slots
class ClassificationSequence:
    """Two Gaussian classes with antipodal unit means rotating in a 2-plane.

    The mean of class +1 at task n is cos θ_n·e1 + sin θ_n·e2 with
    θ_n = (n−1)·arc_step; class −1 sits at the opposite point. Since
    f_n(0) = ½, every minimizer lies within 1/√λ of the origin.
    """

    dimension: int
    sigma_sq: float
    lam: float
    horizon: int
    arc_step: float
    plane: tuple[tuple[float, ...], tuple[float, ...]]

    change = ChangeModel.BOUNDED
    rho = None

    @property
    def model(self) -> SmoothedHingeLoss:
        return SmoothedHingeLoss(self.dimension, self.lam)

    @property
    def feasible_set(self) -> FeasibleSet:
        return FeasibleSet.ball(np.zeros(self.dimension), 1.0 / math.sqrt(self.lam))

    def means(self, n: int) -> tuple[Vector, Vector]:
        e1, e2 = (np.asarray(v) for v in self.plane)
        theta = (n - 1) * self.arc_step
        mu = math.cos(theta) * e1 + math.sin(theta) * e2
        return mu, -mu

    def sample(self, n: int, k: int, rng: np.random.Generator) -> Batch:
        positive, _ = self.means(n)
        y = np.where(rng.random(k) < 0.5, 1.0, -1.0)
        noise = rng.normal(0.0, math.sqrt(self.sigma_sq), size=(k, self.dimension))
        return np.column_stack([y[:, None] * positive + noise, y])

    def scores(self, x: Vector, batch: Batch) -> Vector:
        return self.model.decision_scores(x, batch)

    def minimizer(self, n: int) -> None:
        return None

    def objective(self, n: int, x: Vector) -> None:
        return None

    def gap(self, n: int, x: Vector) -> None:
        return None


def make_classification(
    d: int, sigma_sq: float, lam: float, N: int, arc_step: float, seed: int = 0
) -> ClassificationSequence:
    """Smoothed-hinge classification whose class means rotate by ``arc_step``.

    Raises:
        SynthError: If d < 2 or a parameter is out of range.
    """
    _check_horizon(d, N)
    if d < 2:
        raise SynthError(f"rotating class means need d >= 2, got {d}")
    if not (sigma_sq > 0 and lam > 0):
        raise SynthError("need sigma^2 > 0 and lambda > 0")
    basis, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, 2)))
    plane = (tuple(float(c) for c in basis[:, 0]), tuple(float(c) for c in basis[:, 1]))
    return ClassificationSequence(
        dimension=d,
        sigma_sq=float(sigma_sq),
        lam=float(lam),
        horizon=N,
        arc_step=float(arc_step),
        plane=plane,
    )


# ---------------------------------------------------------------------------
# Noisy quadratic
# ---------------------------------------------------------------------------


@frozen_slots
class NoisyQuadraticSequence:
    """ℓ(x, z) = ½(x − z)ᵀH(x − z) with z ~ N(x*_n, s²I) and H = diag(h).

    ψ is exact: m = min h, M = max h, A = s²Σh², B = max h².
    """

    curvature: tuple[float, ...]
    noise: float
    rho: float
    horizon: int
    direction: tuple[float, ...]
    margin: float = 1.0

    change = ChangeModel.CONSTANT

    @property
    def dimension(self) -> int:
        return len(self.curvature)

    @property
    def model(self) -> NoisyQuadraticLoss:
        return NoisyQuadraticLoss(self.curvature)

    @property
    def feasible_set(self) -> FeasibleSet:
        return _walk_ball(self.direction, self.rho, self.horizon, self.margin)

    def minimizer(self, n: int) -> Vector:
        return (n - 1) * self.rho * np.asarray(self.direction)

    def sample(self, n: int, k: int, rng: np.random.Generator) -> Batch:
        return self.minimizer(n) + self.noise * rng.standard_normal((k, self.dimension))

    def gap(self, n: int, x: Vector) -> float:
        delta = np.asarray(x, dtype=float) - self.minimizer(n)
        return 0.5 * float(delta @ (np.asarray(self.curvature) * delta))

    def objective(self, n: int, x: Vector) -> float:
        return self.gap(n, x) + 0.5 * self.noise**2 * float(sum(self.curvature))

    def known_params(self) -> FunctionParams:
        h = np.asarray(self.curvature)
        return FunctionParams(
            m=float(h.min()),
            M=float(h.max()),
            A=self.noise**2 * float(np.sum(h**2)),
            B=float(h.max() ** 2),
            diam_sq=self.feasible_set.diameter ** 2,
        )


def make_noisy_quadratic(
    h: tuple[float, ...],
    s: float,
    rho: float,
    N: int,
    seed: int = 0,
    margin: float = 1.0,
) -> NoisyQuadraticSequence:
    """Drifting noisy quadratic with exactly known ψ.

    Raises:
        SynthError: For nonpositive curvature or negative noise or drift.
    """
    h = tuple(float(v) for v in h)
    _check_horizon(len(h), N)
    if min(h) <= 0:
        raise SynthError("curvatures must be positive")
    if s < 0 or rho < 0 or not margin > 0:
        raise SynthError("need s >= 0, rho >= 0 and margin > 0")
    return NoisyQuadraticSequence(
        curvature=h,
        noise=float(s),
        rho=float(rho),
        horizon=N,
        direction=_unit_direction(len(h), seed),
        margin=float(margin),
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def to_frame(task: TaskSequence, per_period: int, seed: int = 0) -> pd.DataFrame:
    """Draw ``per_period`` samples of every task into a replayable table.

    Columns are ``period``, ``w1``..``wd`` and ``y``.

    Raises:
        SynthError: If the family's samples carry no target.
    """
    d = task.model.dimension
    if task.model.sample_dimension != d + 1:
        raise SynthError("only families with (w, y) samples can be exported")
    frames = []
    for n in range(1, task.horizon + 1):
        batch = task.sample(n, per_period, task_rng(seed, n, TRAIN_STREAM))
        frame = pd.DataFrame(batch, columns=[f"w{j + 1}" for j in range(d)] + ["y"])
        frame.insert(0, "period", n)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)
