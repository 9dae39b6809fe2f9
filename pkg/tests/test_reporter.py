"""Tests for the reporter module."""

import io
import math

import numpy as np
import pandas as pd
import pytest

from driftk.replay import DataError
from driftk.reporter import (
    RUN_COLUMNS,
    RunRecord,
    aggregate,
    format_summary,
    iterates_frame,
    plot_tables,
    read_seed_frames,
    records_to_frame,
    roc_auc,
    roc_table,
    seed_csv_path,
    write_csv,
)


def _record(seed, n, k=10, gap=0.1, test_loss=1.0, rho_hat=None):
    return RunRecord(
        seed=seed,
        n=n,
        k=k,
        rho_hat=rho_hat,
        rho_certified=None if rho_hat is None else rho_hat + 0.5,
        rho_true=1.0,
        eps_bound=0.2,
        gap=gap,
        test_loss=test_loss,
    )


def _write_seed(run_dir, seed, records):
    write_csv(records_to_frame(records), seed_csv_path(run_dir, seed))


class TestRecordsToFrame:
    def test_column_order(self):
        frame = records_to_frame([_record(0, 1)])
        assert tuple(frame.columns) == RUN_COLUMNS

    def test_missing_values_are_nan(self):
        frame = records_to_frame([_record(0, 1)])
        assert math.isnan(frame.loc[0, "rho_hat"])
        assert math.isnan(frame.loc[0, "wall_time"])

    def test_accepts_tuples(self):
        row = (3, 2, 50, 0.5, 1.0, 1.0, 0.1, None, 2.0) + (None,) * 6
        frame = records_to_frame([row])
        assert frame.loc[0, "seed"] == 3
        assert frame.loc[0, "k"] == 50
        assert math.isnan(frame.loc[0, "gap"])


class TestWriteCsv:
    def test_dialect(self, tmp_path):
        path = write_csv(records_to_frame([_record(0, 1)]), tmp_path / "out.csv")
        raw = path.read_bytes()
        assert b"\r\n" not in raw
        assert raw.startswith(b"seed,n,k,rho_hat,")
        # empty cells for missing values
        assert b",," in raw

    def test_iterates_frame(self):
        frame = iterates_frame(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert list(frame.columns) == ["n", "x1", "x2"]
        assert frame["n"].tolist() == [1, 2]


class TestReadSeedFrames:
    def test_reads_all_seeds_in_order(self, tmp_path):
        for seed in (10, 2):
            _write_seed(tmp_path, seed, [_record(seed, 1)])
        frames = read_seed_frames(tmp_path)
        assert [int(f.loc[0, "seed"]) for f in frames] == [2, 10]

    def test_ignores_iterate_tables(self, tmp_path):
        _write_seed(tmp_path, 0, [_record(0, 1)])
        write_csv(iterates_frame(np.zeros((1, 2))), tmp_path / "seed_0_iterates.csv")
        assert len(read_seed_frames(tmp_path)) == 1

    def test_missing_seed(self, tmp_path):
        _write_seed(tmp_path, 0, [_record(0, 1)])
        with pytest.raises(DataError, match="missing per-seed table"):
            read_seed_frames(tmp_path, [0, 1])

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError, match="no per-seed CSV files"):
            read_seed_frames(tmp_path)

    def test_missing_columns(self, tmp_path):
        frame = pd.DataFrame({"seed": [0], "n": [1]})
        frame.to_csv(tmp_path / "seed_0.csv", index=False)
        with pytest.raises(DataError, match="missing columns k"):
            read_seed_frames(tmp_path)


class TestAggregate:
    def test_mean_and_standard_error(self, tmp_path):
        _write_seed(tmp_path, 0, [_record(0, 1, k=10, gap=0.1), _record(0, 2, k=20)])
        _write_seed(tmp_path, 1, [_record(1, 1, k=30, gap=0.3), _record(1, 2, k=20)])
        agg = aggregate(read_seed_frames(tmp_path))
        assert agg["n"].tolist() == [1, 2]
        assert agg["seeds"].tolist() == [2, 2]
        assert agg.loc[0, "k_mean"] == 20.0
        # std of (10, 30) is 10√2, over √2 seeds
        assert agg.loc[0, "k_se"] == pytest.approx(10.0)
        assert agg.loc[0, "gap_mean"] == pytest.approx(0.2)
        assert agg.loc[1, "k_se"] == 0.0

    def test_single_seed_has_no_standard_error(self):
        agg = aggregate([records_to_frame([_record(0, 1)])])
        assert math.isnan(agg.loc[0, "k_se"])
        assert agg.loc[0, "k_mean"] == 10.0

    def test_all_missing_metric_stays_empty(self):
        frames = [records_to_frame([_record(s, 1)]) for s in (0, 1)]
        agg = aggregate(frames)
        assert math.isnan(agg.loc[0, "rho_hat_mean"])

    def test_nothing_to_aggregate(self):
        with pytest.raises(DataError):
            aggregate([])


class TestPlotTables:
    def _agg(self, **overrides):
        frames = [
            records_to_frame(
                [_record(s, n, rho_hat=0.5, **overrides) for n in (1, 2, 3)]
            )
            for s in (0, 1)
        ]
        return aggregate(frames)

    def test_all_figures_by_default(self):
        tables = plot_tables(self._agg(), eps=0.2)
        assert set(tables) == {"rho", "k", "gap", "test-loss"}
        assert list(tables["k"].columns) == ["n", "k_mean", "k_se"]
        assert tables["gap"]["eps"].tolist() == [0.2, 0.2, 0.2]

    def test_figures_without_data_are_skipped(self):
        tables = plot_tables(self._agg(gap=None), eps=0.2)
        assert "gap" not in tables

    def test_requested_figure_without_data_raises(self):
        with pytest.raises(DataError, match="requested figure 'gap'"):
            plot_tables(self._agg(gap=None), eps=0.2, figures=["gap"])

    def test_unknown_figure(self):
        with pytest.raises(DataError, match="unknown figure"):
            plot_tables(self._agg(), eps=0.2, figures=["heatmap"])


class TestRoc:
    def test_perfect_scorer_reaches_corner(self):
        labels = np.array([-1, -1, 1, 1])
        table = roc_table(labels, np.array([0.1, 0.2, 0.8, 0.9]))
        corner = (table["fpr"] == 0.0) & (table["tpr"] == 1.0)
        assert corner.any()
        assert roc_auc(labels, np.array([0.1, 0.2, 0.8, 0.9])) == 1.0

    def test_random_scorer_auc_is_half(self):
        rng = np.random.default_rng(0)
        labels = np.where(rng.random(20_000) < 0.5, -1, 1)
        assert roc_auc(labels, rng.random(20_000)) == pytest.approx(0.5, abs=0.02)

    def test_curve_is_monotone(self):
        rng = np.random.default_rng(1)
        labels = np.where(rng.random(200) < 0.5, -1, 1)
        table = roc_table(labels, labels + rng.standard_normal(200))
        assert np.all(np.diff(table["fpr"]) >= 0)
        assert np.all(np.diff(table["tpr"]) >= 0)


class TestFormatSummary:
    def test_table_lines(self):
        agg = aggregate([records_to_frame([_record(0, 1), _record(0, 2)])])
        out = io.StringIO()
        format_summary(agg, 0.2, out)
        lines = out.getvalue().splitlines()
        assert lines[0] == "target gap eps = 0.2"
        assert len(lines) == 4
        assert lines[2].split()[:2] == ["1", "10"]
        assert lines[2].split()[2] == "-"
