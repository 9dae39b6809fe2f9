"""Feasible sets, loss models, task sequences and batch statistics.

A batch is a 2-D array with one sample ``z`` per row. Loss models evaluate
row-wise kernels over paired rows ``(X, Z)`` so that the same model serves a
single iterate (broadcast against a batch) and a stack of replicate iterates.
"""

from __future__ import annotations

import enum
from collections.abc import Callable
from typing import Protocol

import numpy as np

from driftk.types import Batch, Matrix, Vector, frozen_slots

TRAIN_STREAM = 0
TEST_STREAM = 1
SPLIT_STREAM = 2
UPFRONT_STREAM = 3


class DimensionError(ValueError):
    """Raised when a point or batch does not match the expected dimension."""


class EmptyBatchError(ValueError):
    """Raised when a batch statistic is requested over zero samples."""


class InfeasiblePointError(ValueError):
    """Raised when a point that must lie in the feasible set does not."""


class CapabilityError(ValueError):
    """Raised when a loss model lacks a requested capability (e.g. Hessians)."""


# ---------------------------------------------------------------------------
# Feasible sets
# ---------------------------------------------------------------------------


class SetKind(enum.Enum):
    """Shape of a feasible set."""

    BOX = "box"
    BALL = "ball"


@frozen_slots
class FeasibleSet:
    """A box or Euclidean ball in R^d.

    Use :meth:`box` or :meth:`ball` rather than the raw constructor.
    """

    kind: SetKind
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()
    center_point: tuple[float, ...] = ()
    radius: float = 0.0

    def __post_init__(self) -> None:
        if self.kind is SetKind.BOX:
            if len(self.lower) != len(self.upper) or not self.lower:
                raise DimensionError("box bounds must be nonempty and equal length")
            lo, hi = np.asarray(self.lower), np.asarray(self.upper)
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError("box bounds must be finite")
            if np.any(hi < lo) or not np.any(hi > lo):
                raise ValueError(
                    "box must satisfy lower <= upper with positive diameter"
                )
        else:
            if not self.center_point:
                raise DimensionError("ball center must be nonempty")
            if not (np.isfinite(self.radius) and self.radius > 0):
                raise ValueError(f"ball radius must be positive, got {self.radius}")

    @classmethod
    def box(cls, lower: Vector, upper: Vector) -> FeasibleSet:
        return cls(
            kind=SetKind.BOX,
            lower=tuple(float(v) for v in np.ravel(lower)),
            upper=tuple(float(v) for v in np.ravel(upper)),
        )

    @classmethod
    def ball(cls, center: Vector, radius: float) -> FeasibleSet:
        return cls(
            kind=SetKind.BALL,
            center_point=tuple(float(v) for v in np.ravel(center)),
            radius=float(radius),
        )

    @property
    def dimension(self) -> int:
        return len(self.lower) if self.kind is SetKind.BOX else len(self.center_point)

    @property
    def center(self) -> Vector:
        if self.kind is SetKind.BOX:
            return (np.asarray(self.lower) + np.asarray(self.upper)) / 2.0
        return np.asarray(self.center_point, dtype=float)

    @property
    def diameter(self) -> float:
        if self.kind is SetKind.BOX:
            span = np.asarray(self.upper) - np.asarray(self.lower)
            return float(np.linalg.norm(span))
        return 2.0 * self.radius

    @property
    def half_widths(self) -> Vector:
        """Per-axis half extent (the radius on every axis for a ball)."""
        if self.kind is SetKind.BOX:
            return (np.asarray(self.upper) - np.asarray(self.lower)) / 2.0
        return np.full(self.dimension, self.radius)

    def contains(self, x: Vector, tol: float = 1e-9) -> bool:
        x = _check_point(self, x)
        if self.kind is SetKind.BOX:
            return bool(
                np.all(x >= np.asarray(self.lower) - tol)
                and np.all(x <= np.asarray(self.upper) + tol)
            )
        dist = np.linalg.norm(x - self.center, axis=-1)
        return bool(np.all(dist <= self.radius * (1.0 + tol) + tol))


def _check_point(feasible_set: FeasibleSet, x: Vector) -> Vector:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != feasible_set.dimension:
        raise DimensionError(
            f"point has dimension {x.shape[-1] if x.ndim else 0}, "
            f"feasible set has dimension {feasible_set.dimension}"
        )
    return x


def project(feasible_set: FeasibleSet, x: Vector) -> Vector:
    """Euclidean projection onto the feasible set.

    Accepts a single point of shape ``(d,)`` or a stack of shape ``(..., d)``.

    Raises:
        DimensionError: If the last axis of *x* is not the set's dimension.
    """
    x = _check_point(feasible_set, x)
    if feasible_set.kind is SetKind.BOX:
        return np.clip(
            x, np.asarray(feasible_set.lower), np.asarray(feasible_set.upper)
        )
    center = feasible_set.center
    offset = x - center
    norm = np.linalg.norm(offset, axis=-1, keepdims=True)
    safe_norm = np.maximum(norm, np.finfo(float).tiny)
    scale = np.minimum(1.0, feasible_set.radius / safe_norm)
    return center + offset * scale


# ---------------------------------------------------------------------------
# Loss models
# ---------------------------------------------------------------------------


def as_batch(batch: Batch | list) -> Batch:
    """Coerce a sequence of samples into a 2-D float array."""
    arr = np.asarray(batch, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


class LossModel:
    """Base class for per-sample losses ``ℓ(x, z)``.

    Subclasses define ``dimension`` (length of x), ``sample_dimension``
    (length of z) and the row-wise kernels ``_losses``, ``_grads`` and,
    when ``has_hessian`` is true, ``_hessians``.
    """

    has_hessian = False

    def _losses(self, X: Matrix, Z: Batch) -> Vector:
        raise NotImplementedError

    def _grads(self, X: Matrix, Z: Batch) -> Matrix:
        raise NotImplementedError

    def _hessians(self, X: Matrix, Z: Batch) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} does not provide Hessians")

    def _pair(self, x: Vector, batch: Batch) -> tuple[Matrix, Batch]:
        Z = as_batch(batch)
        if Z.shape[1] != self.sample_dimension:
            raise DimensionError(
                f"samples have dimension {Z.shape[1]}, "
                f"model expects {self.sample_dimension}"
            )
        X = np.asarray(x, dtype=float)
        if X.shape[-1] != self.dimension:
            raise DimensionError(
                f"point has dimension {X.shape[-1]}, model expects {self.dimension}"
            )
        if X.ndim == 1:
            X = np.broadcast_to(X, (Z.shape[0], self.dimension))
        elif X.shape[0] != Z.shape[0]:
            raise DimensionError("row-wise evaluation needs one point per sample")
        return X, Z

    def losses(self, x: Vector, batch: Batch) -> Vector:
        """Per-sample losses; *x* is one point or one point per row."""
        return self._losses(*self._pair(x, batch))

    def grads(self, x: Vector, batch: Batch) -> Matrix:
        """Per-sample gradients, shape ``(K, d)``."""
        return self._grads(*self._pair(x, batch))

    def hessians(self, x: Vector, batch: Batch) -> np.ndarray:
        """Per-sample Hessians, shape ``(K, d, d)``."""
        if not self.has_hessian:
            raise CapabilityError(f"{type(self).__name__} does not provide Hessians")
        return self._hessians(*self._pair(x, batch))

    def loss(self, x: Vector, z: Vector) -> float:
        return float(self.losses(x, z)[0])

    def grad(self, x: Vector, z: Vector) -> Vector:
        return self.grads(x, z)[0]

    def hessian(self, x: Vector, z: Vector) -> Matrix:
        return self.hessians(x, z)[0]


def _split_features(Z: Batch, d: int) -> tuple[Matrix, Vector]:
    return Z[:, :d], Z[:, d]


@frozen_slots
class PenalizedQuadraticLoss(LossModel):
    """Ridge regression loss ½(y − wᵀx)² + ½λ‖x‖² with z = (w, y)."""

    dimension: int
    lam: float = 0.1
    has_hessian = True

    @property
    def sample_dimension(self) -> int:
        return self.dimension + 1

    def _losses(self, X: Matrix, Z: Batch) -> Vector:
        w, y = _split_features(Z, self.dimension)
        residual = y - np.einsum("ij,ij->i", w, X)
        return 0.5 * residual**2 + 0.5 * self.lam * np.einsum("ij,ij->i", X, X)

    def _grads(self, X: Matrix, Z: Batch) -> Matrix:
        w, y = _split_features(Z, self.dimension)
        residual = y - np.einsum("ij,ij->i", w, X)
        return -residual[:, None] * w + self.lam * X

    def _hessians(self, X: Matrix, Z: Batch) -> np.ndarray:
        w, _ = _split_features(Z, self.dimension)
        return np.einsum("ki,kj->kij", w, w) + self.lam * np.eye(self.dimension)


@frozen_slots
class SmoothedHingeLoss(LossModel):
    """Squared hinge ½(1 − y wᵀx)₊² + ½λ‖x‖² with z = (w, y), y ∈ {−1, +1}."""

    dimension: int
    lam: float = 0.1
    has_hessian = True

    @property
    def sample_dimension(self) -> int:
        return self.dimension + 1

    def _margins(self, X: Matrix, Z: Batch) -> tuple[Matrix, Vector, Vector]:
        w, y = _split_features(Z, self.dimension)
        return w, y, 1.0 - y * np.einsum("ij,ij->i", w, X)

    def _losses(self, X: Matrix, Z: Batch) -> Vector:
        _, _, margin = self._margins(X, Z)
        hinge = np.maximum(margin, 0.0)
        return 0.5 * hinge**2 + 0.5 * self.lam * np.einsum("ij,ij->i", X, X)

    def _grads(self, X: Matrix, Z: Batch) -> Matrix:
        w, y, margin = self._margins(X, Z)
        hinge = np.maximum(margin, 0.0)
        return -(hinge * y)[:, None] * w + self.lam * X

    def _hessians(self, X: Matrix, Z: Batch) -> np.ndarray:
        # Second derivative exists away from the kink; active rows only.
        w, _, margin = self._margins(X, Z)
        active = (margin > 0.0).astype(float)
        outer = np.einsum("ki,kj->kij", w, w)
        return active[:, None, None] * outer + self.lam * np.eye(self.dimension)

    def decision_scores(self, x: Vector, batch: Batch) -> Vector:
        """Linear scores wᵀx used for ROC curves."""
        Z = as_batch(batch)
        return Z[:, : self.dimension] @ np.asarray(x, dtype=float)


@frozen_slots
class NoisyQuadraticLoss(LossModel):
    """½(x − z)ᵀH(x − z) with H = diag(curvature) and z ∈ R^d.

    With z ~ N(x*, s²I) the constants are known exactly:
    m = min h, M = max h, A = s²Σh², B = max h².
    """

    curvature: tuple[float, ...]
    has_hessian = True

    def __post_init__(self) -> None:
        if not self.curvature or min(self.curvature) <= 0:
            raise ValueError("curvature must be a nonempty tuple of positive values")

    @property
    def dimension(self) -> int:
        return len(self.curvature)

    @property
    def sample_dimension(self) -> int:
        return len(self.curvature)

    def _losses(self, X: Matrix, Z: Batch) -> Vector:
        diff = X - Z
        return 0.5 * np.einsum("ij,j,ij->i", diff, np.asarray(self.curvature), diff)

    def _grads(self, X: Matrix, Z: Batch) -> Matrix:
        return np.asarray(self.curvature) * (X - Z)

    def _hessians(self, X: Matrix, Z: Batch) -> np.ndarray:
        shape = (Z.shape[0],) + (self.dimension,) * 2
        return np.broadcast_to(np.diag(self.curvature), shape)


# ---------------------------------------------------------------------------
# Batch statistics
# ---------------------------------------------------------------------------


def nonempty_batch(batch: Batch, what: str) -> Batch:
    batch = as_batch(batch) if np.size(batch) else np.empty((0, 0))
    if batch.shape[0] == 0:
        raise EmptyBatchError(f"{what} needs a nonempty batch")
    return batch


def empirical_gradient(model: LossModel, x: Vector, batch: Batch) -> Vector:
    """Mean of ∇ₓℓ(x, z) over the batch.

    Raises:
        EmptyBatchError: If the batch holds no samples.
    """
    batch = nonempty_batch(batch, "empirical gradient")
    return model.grads(x, batch).mean(axis=0)


def empirical_loss(model: LossModel, x: Vector, batch: Batch) -> float:
    """Mean of ℓ(x, z) over the batch."""
    batch = nonempty_batch(batch, "empirical loss")
    return float(model.losses(x, batch).mean())


def empirical_hessian(model: LossModel, x: Vector, batch: Batch) -> Matrix:
    """Mean Hessian over the batch; symmetrized against round-off."""
    batch = nonempty_batch(batch, "empirical Hessian")
    mean = model.hessians(x, batch).mean(axis=0)
    return 0.5 * (mean + mean.T)


def finite_difference_gradient(
    fn: Callable[[Vector], float | np.ndarray], x: Vector, step: float = 1e-6
) -> np.ndarray:
    """Central differences of *fn* at *x*; axis 0 indexes the coordinate."""
    x = np.asarray(x, dtype=float)
    columns = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        columns.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * step))
    return np.stack(columns)


# ---------------------------------------------------------------------------
# Task sequences
# ---------------------------------------------------------------------------


class TaskSequence(Protocol):
    """A horizon of related tasks n = 1..N sharing one loss model."""

    @property
    def model(self) -> LossModel: ...

    @property
    def feasible_set(self) -> FeasibleSet: ...

    @property
    def horizon(self) -> int: ...

    def sample(self, n: int, k: int, rng: np.random.Generator) -> Batch: ...

    def minimizer(self, n: int) -> Vector | None: ...

    def gap(self, n: int, x: Vector) -> float | None: ...


def task_rng(seed: int, n: int, stream: int = TRAIN_STREAM) -> np.random.Generator:
    """Generator that is a pure function of (seed, stream, n)."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, n]))
