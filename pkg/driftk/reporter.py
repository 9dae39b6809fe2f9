"""Run records, CSV output, aggregation across seeds, and plot tables.

Every CSV uses one dialect: comma separated, header row, '.' decimals,
UTF-8 and LF line endings, empty cells for missing values.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import TextIO

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score, roc_curve

from driftk.replay import DataError
from driftk.types import Matrix, Vector, frozen_slots

RUN_COLUMNS = (
    "seed",
    "n",
    "k",
    "rho_hat",
    "rho_certified",
    "rho_true",
    "eps_bound",
    "gap",
    "test_loss",
    "upfront_test_loss",
    "m_hat",
    "big_m_hat",
    "a_hat",
    "b_hat",
    "wall_time",
)

# Per-seed columns that are averaged in the aggregate table.
METRIC_COLUMNS = RUN_COLUMNS[2:]

PLOT_FIGURES: dict[str, tuple[str, ...]] = {
    "rho": ("rho_hat_mean", "rho_hat_se", "rho_certified_mean", "rho_true_mean"),
    "k": ("k_mean", "k_se"),
    "gap": ("gap_mean", "gap_se", "eps_bound_mean"),
    "test-loss": (
        "test_loss_mean",
        "test_loss_se",
        "upfront_test_loss_mean",
        "upfront_test_loss_se",
    ),
}

# Columns a figure cannot do without; the others may be empty.
_REQUIRED = {
    "rho": ("rho_hat_mean",),
    "k": ("k_mean",),
    "gap": ("gap_mean", "eps_bound_mean"),
    "test-loss": ("test_loss_mean",),
}


@frozen_slots
class RunRecord:
    """One row per (seed, n) of a sequential run."""

    seed: int
    n: int
    k: int
    rho_hat: float | None
    rho_certified: float | None
    rho_true: float | None
    eps_bound: float
    gap: float | None
    test_loss: float
    upfront_test_loss: float | None = None
    m_hat: float | None = None
    big_m_hat: float | None = None
    a_hat: float | None = None
    b_hat: float | None = None
    wall_time: float | None = None


def records_to_frame(records: Iterable[RunRecord | tuple]) -> pd.DataFrame:
    """Table of records in the fixed column order.

    Accepts RunRecords or plain tuples in the same order.
    """
    rows = [
        dataclasses.astuple(r) if isinstance(r, RunRecord) else tuple(r)
        for r in records
    ]
    frame = pd.DataFrame(rows, columns=list(RUN_COLUMNS))
    for column in RUN_COLUMNS[3:]:
        frame[column] = pd.to_numeric(frame[column], errors="coerce").astype(float)
    return frame


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


def seed_csv_path(run_dir: Path, seed: int) -> Path:
    return run_dir / f"seed_{seed}.csv"


def iterates_csv_path(run_dir: Path, seed: int) -> Path:
    return run_dir / f"seed_{seed}_iterates.csv"


def iterates_frame(iterates: Matrix) -> pd.DataFrame:
    """x_1..x_N as rows with columns n, x1..xd."""
    iterates = np.atleast_2d(iterates)
    columns = [f"x{j + 1}" for j in range(iterates.shape[1])]
    frame = pd.DataFrame(iterates, columns=columns)
    frame.insert(0, "n", np.arange(1, len(iterates) + 1))
    return frame


def read_seed_frames(
    run_dir: Path, seeds: Sequence[int] | None = None
) -> list[pd.DataFrame]:
    """Per-seed tables of a run directory, ordered by seed.

    Reads the given seeds, or every ``seed_<s>.csv`` present.

    Raises:
        DataError: If a table is missing, lacks columns, or none exist.
    """
    if seeds is None:
        seeds = [
            int(p.stem.removeprefix("seed_"))
            for p in run_dir.glob("seed_*.csv")
            if p.stem.removeprefix("seed_").isdigit()
        ]
    if not seeds:
        raise DataError(f"no per-seed CSV files in {run_dir}")
    frames = []
    for seed in sorted(seeds):
        path = seed_csv_path(run_dir, seed)
        if not path.is_file():
            raise DataError(f"missing per-seed table {path}")
        frame = pd.read_csv(path)
        missing = [c for c in RUN_COLUMNS if c not in frame.columns]
        if missing:
            raise DataError(f"{path}: missing columns {', '.join(missing)}")
        frames.append(frame)
    return frames


def aggregate(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Mean and standard error of every metric across seeds, per n.

    The standard error is std/√count over the seeds that report the metric;
    it is empty when fewer than two do.
    """
    if not frames:
        raise DataError("nothing to aggregate")
    table = pd.concat(frames, ignore_index=True)
    grouped = table.groupby("n", sort=True)
    result = pd.DataFrame({"n": sorted(table["n"].unique())})
    result["seeds"] = grouped["seed"].count().to_numpy()
    for column in METRIC_COLUMNS:
        values = grouped[column].agg(["mean", "std", "count"])
        result[f"{column}_mean"] = values["mean"].to_numpy()
        count = values["count"].to_numpy(dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            se = values["std"].to_numpy(dtype=float) / np.sqrt(count)
        result[f"{column}_se"] = np.where(count >= 2, se, np.nan)
    return result


# ---------------------------------------------------------------------------
# Plot tables
# ---------------------------------------------------------------------------


def _has_data(agg: pd.DataFrame, column: str) -> bool:
    return column in agg.columns and bool(agg[column].notna().any())


def plot_tables(
    agg: pd.DataFrame, eps: float, figures: Sequence[str] | None = None
) -> dict[str, pd.DataFrame]:
    """One table per figure, keyed by figure name.

    Without an explicit selection, figures whose data the run lacks (the
    gap of a classification run, say) are skipped.

    Raises:
        DataError: If an explicitly requested figure is unknown or its
            columns are missing.
    """
    explicit = figures is not None
    names = list(figures) if explicit else list(PLOT_FIGURES)
    tables: dict[str, pd.DataFrame] = {}
    for name in names:
        if name not in PLOT_FIGURES:
            raise DataError(f"unknown figure '{name}'")
        missing = [c for c in _REQUIRED[name] if not _has_data(agg, c)]
        if missing:
            if explicit:
                raise DataError(
                    f"missing columns for requested figure '{name}': "
                    f"{', '.join(missing)}"
                )
            continue
        table = agg[["n", *PLOT_FIGURES[name]]].copy()
        if name == "gap":
            table["eps"] = eps
        tables[name] = table
    return tables


def roc_table(labels: Vector, scores: Vector) -> pd.DataFrame:
    """(threshold, fpr, tpr) for labels in {−1, +1}."""
    fpr, tpr, thresholds = roc_curve(labels, scores, pos_label=1)
    return pd.DataFrame({"threshold": thresholds, "fpr": fpr, "tpr": tpr})


def roc_auc(labels: Vector, scores: Vector) -> float:
    return float(roc_auc_score(np.asarray(labels) > 0, scores))


# ---------------------------------------------------------------------------
# Console summary
# ---------------------------------------------------------------------------


def _cell(value: float) -> str:
    return "-" if pd.isna(value) else f"{value:.4g}"


def format_summary(agg: pd.DataFrame, eps: float, out: TextIO) -> None:
    """Per-period means across seeds as a plain-text table."""
    header = ("n", "K", "rho_hat", "eps_bound", "gap", "test_loss")
    out.write(f"target gap eps = {eps:g}\n")
    out.write("  ".join(f"{h:>10}" for h in header) + "\n")
    for row in agg.itertuples(index=False):
        cells = (
            str(row.n),
            _cell(row.k_mean),
            _cell(row.rho_hat_mean),
            _cell(row.eps_bound_mean),
            _cell(row.gap_mean),
            _cell(row.test_loss_mean),
        )
        out.write("  ".join(f"{c:>10}" for c in cells) + "\n")
