"""Replay of period-labelled CSV data as a task sequence."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pandas as pd

from driftk.drift import ChangeModel
from driftk.objective import (
    SPLIT_STREAM,
    FeasibleSet,
    LossModel,
    PenalizedQuadraticLoss,
    SmoothedHingeLoss,
    task_rng,
)
from driftk.types import Batch, frozen_slots


class DataError(ValueError):
    """Raised when replay data is missing columns, empty, or unreadable."""


@frozen_slots
class ReplaySchema:
    period_column: str = "period"
    feature_columns: tuple[str, ...] = ()
    target_column: str = "y"


@frozen_slots
class ReplayTask:
    """Periods of a CSV file, each split once into train and test rows.

    Training batches are drawn without replacement from the period's train
    split; a request larger than the split walks through fresh permutations.
    There is no known minimizer, so gaps are unavailable.
    """

    periods: tuple[object, ...]
    train: tuple[Batch, ...]
    test: tuple[Batch, ...]
    loss: str
    lam: float
    radius: float

    change = ChangeModel.BOUNDED
    rho = None

    @property
    def horizon(self) -> int:
        return len(self.periods)

    @property
    def dimension(self) -> int:
        return self.train[0].shape[1] - 1

    @property
    def model(self) -> LossModel:
        if self.loss == "hinge":
            return SmoothedHingeLoss(self.dimension, self.lam)
        return PenalizedQuadraticLoss(self.dimension, self.lam)

    @property
    def feasible_set(self) -> FeasibleSet:
        return FeasibleSet.ball(np.zeros(self.dimension), self.radius)

    def sample(self, n: int, k: int, rng: np.random.Generator) -> Batch:
        rows = self.train[n - 1]
        repeats = -(-k // len(rows))
        order = np.concatenate([rng.permutation(len(rows)) for _ in range(repeats)])
        return rows[order[:k]]

    def test_batch(self, n: int) -> Batch:
        return self.test[n - 1]

    def minimizer(self, n: int) -> None:
        return None

    def objective(self, n: int, x) -> None:
        return None

    def gap(self, n: int, x) -> None:
        return None


def _split(rows: Batch, test_fraction: float, rng: np.random.Generator, label) -> tuple:
    n_test = int(round(test_fraction * len(rows)))
    if n_test == 0 or n_test == len(rows):
        raise DataError(
            f"period {label!r} has {len(rows)} rows; both splits must be nonempty"
        )
    order = rng.permutation(len(rows))
    return rows[order[n_test:]], rows[order[:n_test]]


def _radius(train: tuple[Batch, ...], loss: str, lam: float) -> float:
    # f(0) bounds ½λ‖x*‖², so ‖x*‖ ≤ √(2f(0)/λ)
    if loss == "hinge":
        return 1.0 / math.sqrt(lam)
    f0 = max(0.5 * float(np.mean(rows[:, -1] ** 2)) for rows in train)
    return max(math.sqrt(2.0 * f0 / lam), 1.0)


def load_replay(
    path: Path,
    schema: ReplaySchema,
    *,
    test_fraction: float = 0.2,
    split_seed: int = 0,
    lam: float = 0.1,
    loss: str = "quadratic",
) -> ReplayTask:
    """Read *path* and split every period into train and test rows.

    Periods are ordered by their sorted labels; the labels themselves are
    not used otherwise. Without explicit feature columns every column except
    the period and target columns is a feature.

    Raises:
        DataError: If the file cannot be read, a column is missing or
            non-numeric, or a period cannot be split.
    """
    if not lam > 0:
        raise DataError(f"replay needs a positive penalty lambda, got {lam}")
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None

    reserved = (schema.period_column, schema.target_column)
    features = list(schema.feature_columns) or [
        c for c in frame.columns if c not in reserved
    ]
    missing = [
        c
        for c in [schema.period_column, *features, schema.target_column]
        if c not in frame.columns
    ]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")
    if not features:
        raise DataError(f"{path}: no feature columns")

    values = frame[features + [schema.target_column]]
    try:
        values = values.astype(float)
    except (TypeError, ValueError):
        raise DataError(f"{path}: feature and target columns must be numeric") from None
    if values.isna().any().any():
        raise DataError(f"{path}: feature and target columns contain missing values")

    periods = tuple(sorted(frame[schema.period_column].unique()))
    train, test = [], []
    for n, label in enumerate(periods, start=1):
        rows = values[frame[schema.period_column] == label].to_numpy()
        a, b = _split(rows, test_fraction, task_rng(split_seed, n, SPLIT_STREAM), label)
        train.append(a)
        test.append(b)

    return ReplayTask(
        periods=periods,
        train=tuple(train),
        test=tuple(test),
        loss=loss,
        lam=float(lam),
        radius=_radius(tuple(train), loss, lam),
    )
