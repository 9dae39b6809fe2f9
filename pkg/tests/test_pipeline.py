"""Integration tests for the sequential run pipeline."""

import dataclasses
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from driftk.config import ConfigFileError, RunConfig, build_config, config_to_toml
from driftk.controller import (
    InfeasibleBudgetError,
    Policy,
    fixed_point,
    phi_map_for,
)
from driftk.drift import ChangeModel, DriftMethod
from driftk.gap_bounds import BoundKind
from driftk.pipeline import (
    AGGREGATE_CSV,
    CONFIG_ECHO,
    _max_workers,
    _process_seed,
    _SeedResult,
    build_task,
    emit_plotdata,
    fixed_point_report,
    initial_params,
    load_run_config,
    make_bound,
    replay_csv,
    run,
    simulate,
)
from driftk.replay import DataError, ReplaySchema
from driftk.reporter import records_to_frame
from driftk.synth import make_regression, to_frame


def _quadratic_config(**sections) -> RunConfig:
    """A small noisy-quadratic run that finishes in well under a second."""
    file_config = {
        "task": {
            "family": "noisy-quadratic",
            "curvature": (1.0, 2.0),
            "noise": 0.5,
            "rho": 0.2,
            "horizon": 5,
            "test_size": 200,
        },
        "target": {"eps": 0.1},
        "run": {"workers": 1},
    }
    for name, fields in sections.items():
        file_config.setdefault(name, {}).update(fields)
    return build_config({}, file_config)


def _classification_config(**run_fields) -> RunConfig:
    return build_config(
        {},
        {
            "task": {
                "family": "classification",
                "dimension": 2,
                "horizon": 3,
                "lam": 0.1,
                "test_size": 300,
            },
            "sgd": {"bound": BoundKind.CONST_STEP_AVG},
            "drift": {"change": ChangeModel.BOUNDED, "window": 1},
            "psi": {"m": 0.1, "M": 1.1, "A": 1.0, "B": 2.0},
            "run": {"workers": 1, "upfront_arm": False, **run_fields},
        },
    )


class TestSimulate:
    def test_one_record_per_task(self):
        config = _quadratic_config()
        result = simulate(build_task(config), config, seed=0)
        assert [r.n for r in result.records] == [1, 2, 3, 4, 5]
        assert result.iterates.shape == (5, 2)
        assert result.records[0].k == result.records[1].k
        assert result.records[0].rho_hat is None
        assert result.records[1].rho_hat is not None
        assert all(r.gap is not None and r.gap >= 0 for r in result.records)
        assert all(r.upfront_test_loss is not None for r in result.records)

    def test_known_rho_bounds_stay_below_target(self):
        config = _quadratic_config(controller={"policy": Policy.KNOWN_RHO})
        result = simulate(build_task(config), config, seed=0)
        assert all(r.eps_bound <= 0.1 for r in result.records)
        assert len({r.k for r in result.records[2:]}) == 1

    def test_certified_drift_adds_slack(self):
        config = _quadratic_config(drift={"method": DriftMethod.DIRECT})
        result = simulate(build_task(config), config, seed=3)
        assert all(r.rho_certified > r.rho_hat for r in result.records[1:])

    @pytest.mark.parametrize(
        "policy", [Policy.NO_UPDATE, Policy.UPDATE_PAST, Policy.KNOWN_RHO]
    )
    def test_every_policy_runs(self, policy):
        config = _quadratic_config(controller={"policy": policy})
        result = simulate(build_task(config), config, seed=1)
        assert len(result.records) == 5

    def test_ipm_method_and_bounded_change(self):
        config = _quadratic_config(
            drift={
                "method": DriftMethod.IPM,
                "change": ChangeModel.BOUNDED,
                "window": 2,
            }
        )
        result = simulate(build_task(config), config, seed=0)
        assert result.records[-1].rho_hat > 0

    def test_estimated_psi(self):
        config = build_config(
            {},
            {
                "task": {"dimension": 2, "horizon": 4, "rho": 0.2},
                "target": {"eps": 0.2},
                "psi": {"source": "estimated"},
                "controller": {"k_initial": 200},
                "run": {"upfront_arm": False},
            },
        )
        result = simulate(build_task(config), config, seed=0)
        assert all(r.m_hat is not None and r.m_hat > 0 for r in result.records)
        first = result.records[0]
        assert first.b_hat == pytest.approx(2 * first.big_m_hat**2)

    def test_wall_time_is_optional(self):
        config = _quadratic_config(run={"record_wall_time": True})
        result = simulate(build_task(config), config, seed=0)
        assert all(r.wall_time is not None and r.wall_time >= 0 for r in result.records)

    def test_wall_time_off_by_default(self):
        config = _quadratic_config()
        result = simulate(build_task(config), config, seed=0)
        assert all(r.wall_time is None for r in result.records)


class TestRegressionDefaults:
    """The default drifting ridge regression: d = 5, ρ = 1, ε = 0.1, 20 tasks."""

    EPS = 0.1

    @pytest.fixture(scope="class")
    def config(self) -> RunConfig:
        return build_config({}, {"run": {"workers": 1, "upfront_arm": False}})

    @pytest.fixture(scope="class")
    def frame(self, config) -> pd.DataFrame:
        task = build_task(config)
        return records_to_frame(
            r for seed in range(20) for r in simulate(task, config, seed).records
        )

    def test_mean_gap_within_target_from_third_task(self, frame):
        mean_gap = frame[frame["n"] >= 3].groupby("n")["gap"].mean()
        assert len(mean_gap) == 18
        assert (mean_gap <= 1.2 * self.EPS).all(), mean_gap

    def test_bound_curve_dominates_mean_gap(self, frame):
        means = frame.groupby("n")[["gap", "eps_bound"]].mean()
        assert (means["eps_bound"] >= means["gap"]).all(), means

    def test_certified_drift_covers_true_drift(self, frame):
        late = frame[frame["n"] >= 10]
        assert (late["rho_certified"] >= 1.0).mean() >= 0.95

    def test_budget_settles(self, frame):
        deviations = []
        for _, runs in frame.groupby("seed"):
            k = runs.set_index("n")["k"].astype(float)
            final = k.loc[20]
            deviations.append(((k.loc[10:] - final).abs() / final).median())
        assert np.median(deviations) <= 0.1

    def test_fixed_point_at_every_chosen_budget(self, config, frame):
        task = build_task(config)
        psi = initial_params(config, task)
        bound = make_bound(config, psi)
        for _, runs in frame.groupby("seed"):
            rows = runs.sort_values("n").to_dict("records")
            # K_n was chosen from the certified drift after task n - 1
            for previous, row in zip(rows[1:], rows[2:]):
                rho = previous["rho_certified"]
                if np.isnan(rho):
                    rho = task.feasible_set.diameter
                phi = phi_map_for(bound, int(row["k"]), psi.m, rho)
                result = fixed_point(phi, v0=self.EPS)
                assert result.converged
                assert abs(phi(result.value) - result.value) <= 1e-10
                assert result.value <= self.EPS
                assert result.derivative < 1.0


class TestInitialParams:
    def test_known_family_fills_missing_values(self):
        config = _quadratic_config(psi={"m": 0.5})
        psi = initial_params(config, build_task(config))
        assert psi.m == 0.5
        assert psi.M == 2.0

    def test_unknown_family_needs_psi(self):
        config = dataclasses.replace(
            _classification_config(),
            psi=dataclasses.replace(_classification_config().psi, A=None),
        )
        with pytest.raises(ConfigFileError, match="needs m, big-m, a and b"):
            initial_params(config, build_task(config))

    def test_inconsistent_values(self):
        config = _quadratic_config(psi={"m": 3.0})
        with pytest.raises(ConfigFileError, match="M >= m"):
            initial_params(config, build_task(config))


class TestProcessSeed:
    def test_ok_tag_and_rows(self):
        config = _quadratic_config()
        tag, seed, rows, iterates, warnings, message = _process_seed(
            (config_to_toml(config), 4)
        )
        assert tag is _SeedResult.OK
        assert seed == 4
        assert len(rows) == 5
        assert iterates.shape == (5, 2)
        assert message == ""

    def test_infeasible_keeps_finished_rows(self):
        config = _quadratic_config(
            target={"eps": 1e-3}, controller={"k_initial": 50, "k_max": 60}
        )
        tag, _, rows, _, _, message = _process_seed((config_to_toml(config), 0))
        assert tag is _SeedResult.INFEASIBLE
        assert [row[1] for row in rows] == [1, 2]
        assert "not reachable" in message


class TestRun:
    def test_writes_run_directory(self, tmp_path):
        config = _quadratic_config(run={"seeds": (0, 1)})
        summary = run(config, tmp_path)
        assert summary.seeds == (0, 1)
        assert summary.failed_seeds == ()
        for name in (
            CONFIG_ECHO,
            AGGREGATE_CSV,
            "seed_0.csv",
            "seed_1.csv",
            "seed_0_iterates.csv",
        ):
            assert (tmp_path / name).is_file()

    def test_config_echo_reloads(self, tmp_path):
        config = _quadratic_config()
        run(config, tmp_path)
        assert load_run_config(tmp_path) == config

    def test_aggregate_is_mean_over_seeds(self, tmp_path):
        run(_quadratic_config(run={"seeds": (0, 1, 2)}), tmp_path)
        seeds = [pd.read_csv(tmp_path / f"seed_{s}.csv") for s in (0, 1, 2)]
        agg = pd.read_csv(tmp_path / AGGREGATE_CSV)
        expected = np.mean([f["gap"].to_numpy() for f in seeds], axis=0)
        np.testing.assert_allclose(agg["gap_mean"], expected)
        assert agg["seeds"].tolist() == [3] * 5

    def test_repeat_runs_are_byte_identical(self, tmp_path):
        config = _quadratic_config(run={"seeds": (0, 1)})
        run(config, tmp_path / "a")
        run(config, tmp_path / "b")
        for name in ("seed_0.csv", "seed_1.csv", AGGREGATE_CSV):
            first = (tmp_path / "a" / name).read_bytes()
            assert first == (tmp_path / "b" / name).read_bytes()

    def test_worker_pool_matches_inline(self, tmp_path):
        inline = _quadratic_config(run={"seeds": (0, 1), "workers": 1})
        pooled = _quadratic_config(run={"seeds": (0, 1), "workers": 2})
        run(inline, tmp_path / "inline")
        run(pooled, tmp_path / "pooled")
        for name in ("seed_0.csv", "seed_1.csv"):
            assert (tmp_path / "inline" / name).read_bytes() == (
                tmp_path / "pooled" / name
            ).read_bytes()

    def test_infeasible_budget_writes_partial_log(self, tmp_path):
        config = _quadratic_config(
            target={"eps": 1e-3}, controller={"k_initial": 50, "k_max": 60}
        )
        with pytest.raises(InfeasibleBudgetError, match="seed 0"):
            run(config, tmp_path)
        partial = pd.read_csv(tmp_path / "seed_0.csv")
        assert partial["n"].tolist() == [1, 2]
        assert not (tmp_path / AGGREGATE_CSV).exists()

    def test_infeasible_bootstrap(self, tmp_path):
        config = _quadratic_config(target={"eps": 1e-6}, controller={"k_max": 10})
        with pytest.raises(InfeasibleBudgetError):
            run(config, tmp_path)

    def test_default_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        summary = run(_quadratic_config(run={"out": "results"}))
        assert summary.run_dir == Path("results")
        assert (tmp_path / "results" / AGGREGATE_CSV).is_file()


class TestReplayCsv:
    def test_replays_exported_frame(self, tmp_path):
        task = make_regression(2, 1.0, 0.1, 0.2, 3, seed=1)
        data = tmp_path / "data.csv"
        to_frame(task, 300, seed=0).to_csv(data, index=False)
        config = build_config(
            {},
            {
                "target": {"eps": 0.5},
                "controller": {"k_initial": 100},
                "psi": {"m": 1.0, "M": 3.0, "A": 5.0, "B": 5.0},
                "run": {"workers": 1, "upfront_arm": False},
            },
        )
        summary = replay_csv(data, ReplaySchema(), config, tmp_path / "out")
        frame = pd.read_csv(tmp_path / "out" / "seed_0.csv")
        assert frame["n"].tolist() == [1, 2, 3]
        assert frame["gap"].isna().all()
        assert summary.seeds == (0,)
        assert load_run_config(tmp_path / "out").task.family == "replay"

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            replay_csv(tmp_path / "absent.csv", ReplaySchema(), RunConfig(), tmp_path)


class TestEmitPlotdata:
    def test_quadratic_figures(self, tmp_path):
        run(_quadratic_config(run={"seeds": (0, 1)}), tmp_path)
        paths = emit_plotdata(tmp_path)
        names = sorted(p.name for p in paths)
        assert names == [
            "plot_gap.csv",
            "plot_k.csv",
            "plot_rho.csv",
            "plot_test_loss.csv",
        ]
        gap = pd.read_csv(tmp_path / "plot_gap.csv")
        assert (gap["eps"] == 0.1).all()

    def test_requested_roc_needs_classification(self, tmp_path):
        run(_quadratic_config(), tmp_path)
        with pytest.raises(DataError, match="figure 'roc'"):
            emit_plotdata(tmp_path, ["roc"])

    def test_classification_roc(self, tmp_path):
        run(_classification_config(roc_periods=(1, 3)), tmp_path)
        paths = emit_plotdata(tmp_path, ["k", "roc"])
        names = {p.name for p in paths}
        assert names == {
            "plot_k.csv",
            "plot_roc_n1.csv",
            "plot_roc_n3.csv",
            "plot_roc_auc.csv",
        }
        auc = pd.read_csv(tmp_path / "plot_roc_auc.csv")
        assert auc["n"].tolist() == [1, 3]
        assert (auc["auc"] > 0.6).all()

    def test_not_a_run_directory(self, tmp_path):
        with pytest.raises(DataError, match="is it a run directory"):
            emit_plotdata(tmp_path)


class TestFixedPointReport:
    def test_fixed_point_below_target(self):
        report = fixed_point_report(_quadratic_config())
        assert report.value <= report.eps
        assert report.contraction < 1.0
        assert report.K >= 1

    def test_needs_known_drift(self):
        with pytest.raises(ConfigFileError, match="no known drift"):
            fixed_point_report(_classification_config())


class TestMaxWorkers:
    def test_at_least_one(self):
        with patch("driftk.pipeline.os.cpu_count", return_value=None):
            assert _max_workers() == 1
        with patch("driftk.pipeline.os.cpu_count", return_value=8):
            assert _max_workers() == 7
