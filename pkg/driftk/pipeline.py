"""Run pipeline: wires tasks, SGD, drift and ψ estimates and the budget
controller together, fans seeds out over processes and writes the results."""

from __future__ import annotations

import dataclasses
import enum
import os
import sys
import time
from collections.abc import Iterator, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np
import pandas as pd

from driftk.config import (
    ConfigFileError,
    RunConfig,
    build_config,
    config_to_toml,
    load_file_config,
    parse_config_text,
)
from driftk.controller import (
    GapLedger,
    InfeasibleBudgetError,
    bootstrap,
    check_monotone_in_k,
    fixed_point,
    k_initial,
    k_star,
    make_controller,
    phi_map_for,
)
from driftk.drift import (
    ChangeModel,
    DriftEstimate,
    DriftEstimateError,
    DriftMethod,
    TnSchedule,
    UniformMaxWindow,
    combine_bounded,
    combine_constant,
    direct_one_step,
    ipm_one_step,
)
from driftk.gap_bounds import (
    FunctionParams,
    GapBound,
    InadmissibleStepError,
    NonFactoringBoundError,
)
from driftk.objective import (
    TEST_STREAM,
    TRAIN_STREAM,
    UPFRONT_STREAM,
    EmptyBatchError,
    empirical_loss,
    project,
    task_rng,
)
from driftk.params import (
    ParamEstimateError,
    ParamEstimates,
    ParamMethod,
    combine_params,
    one_step_params,
)
from driftk.replay import DataError, ReplaySchema, ReplayTask, load_replay
from driftk.reporter import (
    RunRecord,
    aggregate,
    iterates_csv_path,
    iterates_frame,
    plot_tables,
    read_seed_frames,
    records_to_frame,
    roc_auc,
    roc_table,
    seed_csv_path,
    write_csv,
)
from driftk.sgd import ScheduleError, run_sgd
from driftk.synth import (
    SynthError,
    make_classification,
    make_noisy_quadratic,
    make_regression,
)
from driftk.types import Batch, Vector, frozen_slots

# Bootstrap budget when ψ is estimated and no k-initial is configured.
DEFAULT_K_INITIAL = 1000

CONFIG_ECHO = "config.toml"
AGGREGATE_CSV = "aggregate.csv"

# Errors that stem from the configuration rather than the run itself.
CONFIG_ERRORS = (
    ConfigFileError,
    InadmissibleStepError,
    NonFactoringBoundError,
    ScheduleError,
    SynthError,
)


def _warn(msg: str, *, verbose: bool) -> None:
    """Write a warning to stderr when verbose mode is enabled."""
    if verbose:
        print(f"driftk: warning: {msg}", file=sys.stderr)


def _progress(msg: str, *, verbose: bool) -> None:
    if verbose:
        print(f"driftk: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Task and bound construction
# ---------------------------------------------------------------------------


def build_task(config: RunConfig):
    """The task sequence a configuration describes."""
    task = config.task
    if task.family == "regression":
        return make_regression(
            task.dimension,
            task.sigma_w_sq,
            task.lam,
            task.rho,
            task.horizon,
            seed=task.seed,
            margin=task.margin,
        )
    if task.family == "classification":
        return make_classification(
            task.dimension,
            task.sigma_sq,
            task.lam,
            task.horizon,
            task.arc_step,
            seed=task.seed,
        )
    if task.family == "noisy-quadratic":
        return make_noisy_quadratic(
            task.curvature,
            task.noise,
            task.rho,
            task.horizon,
            seed=task.seed,
            margin=task.margin,
        )
    replay = config.replay
    schema = ReplaySchema(
        period_column=replay.period_column,
        feature_columns=replay.feature_columns,
        target_column=replay.target_column,
    )
    return load_replay(
        Path(replay.path),
        schema,
        test_fraction=replay.test_fraction,
        split_seed=replay.split_seed,
        lam=task.lam,
        loss=replay.loss,
    )


def initial_params(config: RunConfig, task) -> FunctionParams:
    """ψ from the ``[psi]`` table, completed by the family's analytic values.

    Raises:
        ConfigFileError: If a value is missing and the family has no analytic
            ψ, or the values are inconsistent.
    """
    psi = config.psi
    values = {"m": psi.m, "M": psi.M, "A": psi.A, "B": psi.B}
    if any(v is None for v in values.values()):
        if not hasattr(task, "known_params"):
            raise ConfigFileError(
                f"[psi] needs m, big-m, a and b for the '{config.task.family}' family"
            )
        known = task.known_params()
        values = {k: getattr(known, k) if v is None else v for k, v in values.items()}
    try:
        return FunctionParams(
            **values,
            diam_sq=task.feasible_set.diameter ** 2,
            C_g=config.drift.C_g,
            L_G=config.drift.L_G,
        )
    except ValueError as exc:
        raise ConfigFileError(f"[psi] {exc}") from None


def make_bound(config: RunConfig, params: FunctionParams) -> GapBound:
    return GapBound.for_params(
        config.sgd.bound, params, config.sgd.step_scale, config.sgd.alpha
    )


def _estimated_params(
    estimates: ParamEstimates, config: RunConfig, fallback: FunctionParams
) -> FunctionParams:
    try:
        return estimates.as_function_params(
            fallback.diam_sq, config.drift.C_g, config.drift.L_G
        )
    except (ParamEstimateError, ValueError):
        return fallback


def _test_batch(task, n: int, seed: int, size: int) -> Batch:
    if isinstance(task, ReplayTask):
        return task.test_batch(n)
    return task.sample(n, size, task_rng(seed, n, TEST_STREAM))


# ---------------------------------------------------------------------------
# Sequential controller loop
# ---------------------------------------------------------------------------


@frozen_slots
class Period:
    """One finished task: its record, the SGD output x̂_n and the test batch."""

    record: RunRecord
    x: Vector
    test: Batch


@frozen_slots
class SeedRun:
    records: tuple[RunRecord, ...]
    iterates: np.ndarray
    warnings: tuple[str, ...] = ()


def _combine(
    config, task, history, budgets, params, bound, tn_schedule
) -> DriftEstimate:
    drift = config.drift
    common = dict(mode=drift.mode, bound=bound, dimension=task.model.dimension)
    if drift.change is ChangeModel.CONSTANT:
        return combine_constant(history, budgets, params, tn_schedule, **common)
    return combine_bounded(
        history, UniformMaxWindow(drift.window), budgets, params, tn_schedule, **common
    )


def run_periods(
    task, config: RunConfig, seed: int, warnings: list[str]
) -> Iterator[Period]:
    """Solve tasks 1..N in order, yielding each period as it finishes.

    Tasks 1 and 2 use the bootstrap budget; from task 3 on the controller
    picks K_n from the certified drift estimate after task n−1 (diam(X)
    while no estimate exists). With estimated ψ the bounds and schedules
    follow the running estimates from the previous tasks.

    Raises:
        InfeasibleBudgetError: If the controller finds no K ≤ K_max.
    """
    fs = task.feasible_set
    model = task.model
    diameter = fs.diameter
    eps = config.target.eps
    k_max = config.controller.k_max
    estimated = config.psi.source == "estimated"
    drift_tn = TnSchedule(c=config.drift.slack_c, eta=config.drift.slack_eta)
    param_tn = TnSchedule(c=config.params.slack_c, eta=config.params.slack_eta)
    lam = getattr(model, "lam", None)
    if estimated and config.params.method is ParamMethod.QUADRATIC and lam is None:
        raise ConfigFileError(
            f"[params] method 'quadratic' needs (w, y) samples; "
            f"use another method for '{config.task.family}'"
        )

    psi0 = initial_params(config, task)
    bound = make_bound(config, psi0)
    K0 = config.controller.k_initial
    if K0 is None:
        if estimated:
            K0 = DEFAULT_K_INITIAL
        else:
            K0 = k_initial(eps, bound, psi0.diam_sq, k_max)
    eps1, eps2 = bootstrap(K0, K0, bound, psi0)
    ledger = GapLedger.start(config.controller.policy, K0, K0, eps1, eps2)
    controller = make_controller(config.controller.policy, eps, task.rho, k_max)

    psi = psi0
    params_history, drift_history, budgets = [], [], []
    estimate: DriftEstimate | None = None
    param_estimates: ParamEstimates | None = None
    x_start = fs.center
    x_prev = batch_prev = None

    for n in range(1, task.horizon + 1):
        started = time.perf_counter()
        if param_estimates is not None:
            updated = _estimated_params(param_estimates, config, psi)
            if updated is psi:
                warnings.append(
                    f"task {n}: unusable psi estimate; keeping the previous one"
                )
            psi = updated
        bound = make_bound(config, psi)

        if n <= 2:
            K = ledger.budgets[n - 1]
        else:
            rho_certified = estimate.certified if estimate is not None else diameter
            K = controller.choose(ledger, rho_certified, bound, psi)
            ledger = controller.record(ledger, K, rho_certified, bound, psi)
        budgets.append(K)

        result = run_sgd(
            model,
            lambda k, rng, n=n: task.sample(n, k, rng),
            x_start,
            K,
            bound.schedule,
            bound.averaging,
            fs,
            task_rng(seed, n, TRAIN_STREAM),
            m=psi.m,
            B=psi.B,
        )
        x_n, batch = result.x_hat, result.batch

        if n >= 2:
            if config.drift.method is DriftMethod.DIRECT:
                one_step = direct_one_step(
                    model, x_n, x_prev, batch, batch_prev, psi.m, diameter, index=n
                )
            else:
                one_step = ipm_one_step(
                    batch,
                    batch_prev,
                    psi.m,
                    diameter,
                    metric=config.drift.metric,
                    scale=config.drift.metric_scale,
                    index=n,
                )
            drift_history.append(one_step)
            try:
                estimate = _combine(
                    config, task, drift_history, budgets, psi, bound, drift_tn
                )
            except DriftEstimateError as exc:
                estimate = None
                warnings.append(f"task {n}: no drift estimate ({exc})")

        if estimated:
            params_history.append(
                one_step_params(
                    model, x_n, batch, fs, config.params.method, previous=psi, lam=lam
                )
            )
            param_estimates = combine_params(params_history, param_tn)

        test = _test_batch(task, n, seed, config.task.test_size)
        wall = time.perf_counter() - started if config.run.record_wall_time else None
        record = RunRecord(
            seed=seed,
            n=n,
            k=K,
            rho_hat=estimate.rho_hat if estimate is not None else None,
            rho_certified=estimate.certified if estimate is not None else None,
            rho_true=task.rho,
            eps_bound=ledger.eps[n - 1],
            gap=task.gap(n, x_n),
            test_loss=empirical_loss(model, x_n, test),
            m_hat=param_estimates.m_hat if param_estimates is not None else None,
            big_m_hat=param_estimates.M_hat if param_estimates is not None else None,
            a_hat=param_estimates.A_hat if param_estimates is not None else None,
            b_hat=param_estimates.B_hat if param_estimates is not None else None,
            wall_time=wall,
        )
        yield Period(record=record, x=x_n, test=test)

        x_prev, batch_prev = x_n, batch
        x_start = project(fs, x_n)


def upfront_losses(
    task, config: RunConfig, seed: int, total: int, tests: Sequence[Batch]
) -> list[float]:
    """Test losses of one SGD run on ``total`` samples of task 1.

    This is the comparison arm that spends the whole sequential budget up
    front and never adapts.
    """
    fs = task.feasible_set
    psi = initial_params(config, task)
    bound = make_bound(config, psi)
    result = run_sgd(
        task.model,
        lambda k, rng: task.sample(1, k, rng),
        fs.center,
        total,
        bound.schedule,
        bound.averaging,
        fs,
        task_rng(seed, 1, UPFRONT_STREAM),
        m=psi.m,
        B=psi.B,
    )
    return [empirical_loss(task.model, result.x_hat, test) for test in tests]


def _finish(
    task, config: RunConfig, seed: int, periods: Sequence[Period]
) -> list[RunRecord]:
    records = [p.record for p in periods]
    if not config.run.upfront_arm or not periods:
        return records
    total = sum(r.k for r in records)
    losses = upfront_losses(task, config, seed, total, [p.test for p in periods])
    return [
        dataclasses.replace(r, upfront_test_loss=v) for r, v in zip(records, losses)
    ]


def simulate(task, config: RunConfig, seed: int) -> SeedRun:
    """Run every period of one seed in-process, plus the up-front arm."""
    warnings: list[str] = []
    periods = list(run_periods(task, config, seed, warnings))
    return SeedRun(
        records=tuple(_finish(task, config, seed, periods)),
        iterates=np.array([p.x for p in periods]),
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Fan-out over seeds
# ---------------------------------------------------------------------------


class _SeedResult(enum.Enum):
    """Outcome tags for per-seed runs in worker processes."""

    OK = "ok"
    INFEASIBLE = "infeasible"
    CONFIG_ERR = "config_err"
    DATA_ERR = "data_err"
    FAILED = "failed"


def _process_seed(args: tuple[str, int]) -> tuple:
    """Run one seed from the echoed configuration text.

    Runs in a worker process. Returns a tagged tuple
    ``(tag, seed, rows, iterates, warnings, message)``; ``rows`` holds the
    records finished before any failure as plain tuples.
    """
    config_text, seed = args
    config = build_config({}, parse_config_text(config_text))
    periods: list[Period] = []
    warnings: list[str] = []
    tag, message = _SeedResult.OK, ""
    try:
        task = build_task(config)
        for period in run_periods(task, config, seed, warnings):
            periods.append(period)
        records = _finish(task, config, seed, periods)
    except InfeasibleBudgetError as exc:
        tag, message = _SeedResult.INFEASIBLE, str(exc)
    except (DataError, EmptyBatchError) as exc:
        tag, message = _SeedResult.DATA_ERR, str(exc)
    except CONFIG_ERRORS as exc:
        tag, message = _SeedResult.CONFIG_ERR, str(exc)
    except ValueError as exc:
        tag, message = _SeedResult.FAILED, str(exc)
    if tag is not _SeedResult.OK:
        records = [p.record for p in periods]
    rows = [dataclasses.astuple(r) for r in records]
    iterates = np.array([p.x for p in periods])
    return (tag, seed, rows, iterates, warnings, message)


_FAILURES = {
    _SeedResult.INFEASIBLE: InfeasibleBudgetError,
    _SeedResult.CONFIG_ERR: ConfigFileError,
    _SeedResult.DATA_ERR: DataError,
    _SeedResult.FAILED: ValueError,
}


def _max_workers() -> int:
    """Return number of worker processes: CPU count minus 1, minimum 1."""
    return max(1, (os.cpu_count() or 1) - 1)


@frozen_slots
class RunSummary:
    run_dir: Path
    seeds: tuple[int, ...]
    failed_seeds: tuple[int, ...]
    aggregate: pd.DataFrame | None


def _preflight(task, config: RunConfig) -> None:
    psi = initial_params(config, task)
    bound = make_bound(config, psi)
    if not check_monotone_in_k(bound, psi.diam_sq, config.controller.k_max):
        _warn(
            f"the {config.sgd.bound.value} bound is not monotone in K "
            "on a sampled grid; "
            "budgets may not be minimal",
            verbose=config.run.verbose,
        )


def execute(config: RunConfig, out_dir: Path) -> RunSummary:
    """Run every seed of *config* and write the run directory.

    The directory receives ``config.toml`` (the resolved configuration),
    ``seed_<s>.csv`` and ``seed_<s>_iterates.csv`` per seed and
    ``aggregate.csv`` over the seeds that completed. Files of completed
    seeds are written before the first failure is re-raised.

    Raises:
        InfeasibleBudgetError: If a seed's controller found no K ≤ K_max.
        ConfigFileError: For configuration problems found while running.
        DataError: For unusable replay data.
    """
    verbose = config.run.verbose
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = config_to_toml(config)
    (out_dir / CONFIG_ECHO).write_text(config_text, encoding="utf-8")

    task = build_task(config)
    _preflight(task, config)

    seeds = config.run.seeds
    work_items = [(config_text, seed) for seed in seeds]
    workers = min(config.run.workers or _max_workers(), len(work_items))
    if workers <= 1:
        results: list[tuple] = [_process_seed(item) for item in work_items]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_process_seed, item) for item in work_items]
            results = [f.result() for f in as_completed(futures)]

    # as_completed() yields in arrival order; sort for deterministic output.
    results.sort(key=lambda r: r[1])

    completed, failed = [], []
    first_failure = None
    for tag, seed, rows, iterates, warnings, message in results:
        for msg in warnings:
            _warn(f"seed {seed}: {msg}", verbose=verbose)
        if rows:
            write_csv(records_to_frame(rows), seed_csv_path(out_dir, seed))
            write_csv(iterates_frame(iterates), iterates_csv_path(out_dir, seed))
        if tag is _SeedResult.OK:
            completed.append(seed)
            _progress(f"seed {seed}: {len(rows)} tasks done", verbose=verbose)
        else:
            failed.append(seed)
            if first_failure is None:
                first_failure = (tag, seed, message)

    agg = None
    if completed:
        agg = aggregate(read_seed_frames(out_dir, completed))
        write_csv(agg, out_dir / AGGREGATE_CSV)

    if first_failure is not None:
        tag, seed, message = first_failure
        raise _FAILURES[tag](f"seed {seed}: {message}")
    return RunSummary(
        run_dir=out_dir,
        seeds=tuple(completed),
        failed_seeds=tuple(failed),
        aggregate=agg,
    )


def run(config: RunConfig, out_dir: Path | None = None) -> RunSummary:
    """Run a configuration into ``out_dir`` (default ``[run] out``)."""
    return execute(config, Path(out_dir if out_dir is not None else config.run.out))


def replay_csv(
    path: Path, schema: ReplaySchema, config: RunConfig, out_dir: Path | None = None
) -> RunSummary:
    """Sequential run over the periods of a CSV file.

    The configuration's task family becomes ``replay`` with *path* and
    *schema*; everything else (targets, bounds, estimators) is kept.
    """
    config = dataclasses.replace(
        config,
        task=dataclasses.replace(config.task, family="replay"),
        replay=dataclasses.replace(
            config.replay,
            path=str(path),
            period_column=schema.period_column,
            feature_columns=schema.feature_columns,
            target_column=schema.target_column,
        ),
    )
    config = build_config({}, parse_config_text(config_to_toml(config)))
    return run(config, out_dir)


# ---------------------------------------------------------------------------
# Plot data and fixed point
# ---------------------------------------------------------------------------


def load_run_config(run_dir: Path) -> RunConfig:
    path = run_dir / CONFIG_ECHO
    if not path.is_file():
        raise DataError(f"{run_dir} has no {CONFIG_ECHO}; is it a run directory?")
    return build_config({}, load_file_config(path))


def _roc_periods(config: RunConfig) -> list[int]:
    N = config.task.horizon
    chosen = config.run.roc_periods or (1, (N + 1) // 2, N)
    return sorted({n for n in chosen if 1 <= n <= N})


def emit_plotdata(run_dir: Path, figures: Sequence[str] | None = None) -> list[Path]:
    """Write one table per figure into *run_dir* and return the paths.

    Figures are ``rho``, ``k``, ``gap``, ``test-loss`` and, for
    classification runs, ``roc``: per selected task the ROC curve of the
    first seed's x̂_n on that task's test batch, with the AUCs collected in
    ``plot_roc_auc.csv``.

    Raises:
        DataError: If the run directory is incomplete or a requested figure
            lacks its columns.
    """
    config = load_run_config(run_dir)
    agg_path = run_dir / AGGREGATE_CSV
    if not agg_path.is_file():
        raise DataError(f"{run_dir} has no {AGGREGATE_CSV}")
    agg = pd.read_csv(agg_path)

    want_roc = figures is None or "roc" in figures
    table_figures = None if figures is None else [f for f in figures if f != "roc"]
    written = []
    for name, table in plot_tables(agg, config.target.eps, table_figures).items():
        written.append(write_csv(table, run_dir / f"plot_{name.replace('-', '_')}.csv"))

    if want_roc:
        if config.task.family != "classification":
            if figures is not None:
                raise DataError(
                    "missing columns for requested figure 'roc': no class scores"
                )
            return written
        written.extend(_emit_roc(run_dir, config))
    return written


def _emit_roc(run_dir: Path, config: RunConfig) -> list[Path]:
    task = build_task(config)
    seed = next(
        (s for s in config.run.seeds if iterates_csv_path(run_dir, s).is_file()), None
    )
    if seed is None:
        raise DataError("missing columns for requested figure 'roc': no iterates")
    iterates = pd.read_csv(iterates_csv_path(run_dir, seed)).set_index("n")
    written, aucs = [], []
    for n in _roc_periods(config):
        if n not in iterates.index:
            continue
        x = iterates.loc[n].to_numpy(dtype=float)
        test = _test_batch(task, n, seed, config.task.test_size)
        labels, scores = test[:, -1], task.scores(x, test)
        path = run_dir / f"plot_roc_n{n}.csv"
        written.append(write_csv(roc_table(labels, scores), path))
        aucs.append((n, roc_auc(labels, scores)))
    summary = pd.DataFrame(aucs, columns=["n", "auc"])
    written.append(write_csv(summary, run_dir / "plot_roc_auc.csv"))
    return written


@frozen_slots
class FixedPointReport:
    K: int
    value: float
    derivative: float
    contraction: float
    iterations: int
    converged: bool
    eps: float


def fixed_point_report(config: RunConfig) -> FixedPointReport:
    """Fixed point of the propagation map at K* for a known-drift configuration.

    Raises:
        ConfigFileError: If the family has no known drift.
        NonFactoringBoundError: If the bound is not affine in d0.
    """
    task = build_task(config)
    if task.rho is None:
        raise ConfigFileError(f"the '{config.task.family}' family has no known drift")
    psi = initial_params(config, task)
    bound = make_bound(config, psi)
    eps = config.target.eps
    K = k_star(eps, task.rho, bound, psi, config.controller.k_max)
    phi = phi_map_for(bound, K, psi.m, task.rho)
    result = fixed_point(phi, v0=eps)
    return FixedPointReport(
        K=K,
        value=result.value,
        derivative=result.derivative,
        contraction=phi.contraction,
        iterations=result.iterations,
        converged=result.converged,
        eps=eps,
    )
