"""CLI interface for driftk using Click."""

import sys
from pathlib import Path

import click

from driftk import __version__
from driftk.config import ConfigFileError, build_config, load_file_config
from driftk.controller import InadmissibleMapError, InfeasibleBudgetError
from driftk.gap_bounds import BoundKind
from driftk.objective import EmptyBatchError
from driftk.pipeline import (
    CONFIG_ERRORS,
    emit_plotdata,
    fixed_point_report,
    replay_csv,
)
from driftk.pipeline import run as run_config
from driftk.replay import DataError, ReplaySchema
from driftk.reporter import format_summary
from driftk.validate import (
    DEFAULT_KS,
    DEFAULT_NOISES,
    DEFAULT_REPLICATES,
    dominance_suite,
    write_dominance_report,
)

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DATA = 4


class DriftkError(click.ClickException):
    """A ClickException carrying one of driftk's exit codes."""

    def __init__(self, message: str, exit_code: int = 1) -> None:
        super().__init__(message)
        self.exit_code = exit_code

    def show(self, file=None) -> None:
        click.echo(f"driftk: error: {self.format_message()}", err=True)


def _parse_seeds(value: str) -> tuple[int, ...]:
    """``"0,1,5"`` or ``"0-19"`` or a mix, as a tuple of seeds."""
    seeds: list[int] = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if not lo.isdigit() or (sep and not hi.isdigit()):
            raise click.BadParameter(f"invalid seed '{part}'", param_hint="--seeds")
        seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    if not seeds:
        raise click.BadParameter("no seeds given", param_hint="--seeds")
    return tuple(seeds)


def _expand_cli_param(name: str, value: object) -> tuple[str, object]:
    """Map a CLI parameter name and value to its RunConfig override."""
    if name == "seeds":
        return name, _parse_seeds(value)
    if name == "data":
        return "replay_path", str(value)
    return name, value


def _collect_explicit_args(ctx: click.Context, **kwargs: object) -> dict[str, object]:
    """Return only the kwargs whose values were explicitly set on the command line."""
    explicit: dict[str, object] = {}
    for param_name, value in kwargs.items():
        source = ctx.get_parameter_source(param_name)
        if source is click.core.ParameterSource.COMMANDLINE:
            key, converted = _expand_cli_param(param_name, value)
            explicit[key] = converted
    return explicit


def _resolve(ctx: click.Context, config_path: Path | None, **kwargs: object):
    try:
        file_config = load_file_config(config_path)
        return build_config(_collect_explicit_args(ctx, **kwargs), file_config)
    except ConfigFileError as exc:
        raise DriftkError(str(exc), EXIT_CONFIG) from None


def _guarded(action):
    """Run *action*, mapping driftk's errors to exit codes."""
    try:
        return action()
    except KeyboardInterrupt:
        raise SystemExit(130)
    except InfeasibleBudgetError as exc:
        raise DriftkError(f"infeasible budget: {exc}", EXIT_INFEASIBLE) from None
    except (DataError, EmptyBatchError) as exc:
        raise DriftkError(str(exc), EXIT_DATA) from None
    except (*CONFIG_ERRORS, InadmissibleMapError) as exc:
        raise DriftkError(str(exc), EXIT_CONFIG) from None
    except (OSError, ValueError, RuntimeError) as exc:
        raise DriftkError(f"run failed: {exc}") from None


_config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Run configuration (TOML).",
)
_out_option = click.option(
    "--out", type=click.Path(file_okay=False), help="Output directory ([run] out)."
)
_seeds_option = click.option("--seeds", help="Seeds, e.g. '0-19' or '1,4,7'.")
_workers_option = click.option(
    "--workers", type=click.IntRange(min=0), help="Worker processes (0 = CPUs - 1)."
)
_verbose_option = click.option(
    "--verbose",
    is_flag=True,
    default=False,
    help="Print warnings and per-seed progress to stderr.",
)


@click.group()
@click.version_option(version=__version__, prog_name="driftk")
def main():
    """Adaptive sample sizes for sequences of drifting stochastic optimization tasks."""


def _summarize(summary, eps: float) -> None:
    if summary.aggregate is not None:
        format_summary(summary.aggregate, eps, sys.stdout)
    click.echo(f"results written to {summary.run_dir}")


@main.command()
@_config_option
@_out_option
@_seeds_option
@_workers_option
@_verbose_option
@click.pass_context
def run(ctx, config_path, out, seeds, workers, verbose):
    """Run a synthetic task sequence for every seed."""
    config = _resolve(
        ctx, config_path, out=out, seeds=seeds, workers=workers, verbose=verbose
    )
    if config.task.family == "replay":
        raise DriftkError("use 'driftk replay' for replay configurations", EXIT_CONFIG)
    _guarded(lambda: _summarize(run_config(config), config.target.eps))


@main.command()
@_config_option
@click.option(
    "--data",
    type=click.Path(exists=True, dir_okay=False),
    help="CSV file to replay ([replay] path).",
)
@_out_option
@_seeds_option
@_workers_option
@_verbose_option
@click.pass_context
def replay(ctx, config_path, data, out, seeds, workers, verbose):
    """Replay a period-labelled CSV file as a task sequence."""
    config = _resolve(
        ctx,
        config_path,
        data=data,
        out=out,
        seeds=seeds,
        workers=workers,
        verbose=verbose,
    )
    if config.replay.path is None:
        raise DriftkError("no data: pass --data or set [replay] path", EXIT_CONFIG)
    schema = ReplaySchema(
        period_column=config.replay.period_column,
        feature_columns=config.replay.feature_columns,
        target_column=config.replay.target_column,
    )
    _guarded(
        lambda: _summarize(
            replay_csv(Path(config.replay.path), schema, config), config.target.eps
        )
    )


@main.command()
@click.argument(
    "run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path)
)
@click.option(
    "--figure",
    "figures",
    multiple=True,
    type=click.Choice(["rho", "k", "gap", "test-loss", "roc"]),
    help="Figure to emit (repeatable); default: all the run supports.",
)
def plotdata(run_dir, figures):
    """Write one table per figure into RUN_DIR."""
    paths = _guarded(lambda: emit_plotdata(run_dir, list(figures) or None))
    for path in paths:
        click.echo(str(path))


@main.command("validate-bounds")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=Path("dominance.csv"),
    show_default=True,
    help="Report CSV.",
)
@click.option(
    "-k",
    "--k",
    "ks",
    multiple=True,
    type=click.IntRange(min=1),
    help=f"Budgets K (repeatable; default {', '.join(map(str, DEFAULT_KS))}).",
)
@click.option(
    "--kind",
    "kinds",
    multiple=True,
    type=click.Choice([k.value for k in BoundKind]),
    help="Bound kinds (repeatable; default all).",
)
@click.option(
    "--noise",
    "noises",
    multiple=True,
    type=float,
    help="Sample noise levels s (repeatable).",
)
@click.option("--replicates", type=click.IntRange(min=2), default=DEFAULT_REPLICATES)
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option(
    "--falsify", is_flag=True, help="Halve the smallest curvature of the loss."
)
@click.option("--empty", is_flag=True, help="Run an empty grid.")
def validate_bounds(out, ks, kinds, noises, replicates, seed, falsify, empty):
    """Check by simulation that every bound dominates the realized mean gap.

    Exits 1 when a case fails.
    """
    grid_Ks = () if empty else (ks or DEFAULT_KS)
    cases = _guarded(
        lambda: dominance_suite(
            grid_Ks,
            tuple(BoundKind(k) for k in kinds) or tuple(BoundKind),
            noises or DEFAULT_NOISES,
            replicates=replicates,
            seed=seed,
            falsify=falsify,
        )
    )
    write_dominance_report(cases, out)
    failed = [c for c in cases if not c.passed]
    click.echo(f"{len(cases) - len(failed)}/{len(cases)} cases passed; report in {out}")
    raise SystemExit(1 if failed else 0)


@main.command("fixed-point")
@_config_option
@click.pass_context
def fixed_point_cmd(ctx, config_path):
    """Print the fixed point of the propagation map at K* for a known-ρ config."""
    config = _resolve(ctx, config_path)
    report = _guarded(lambda: fixed_point_report(config))
    click.echo(f"K*        {report.K}")
    click.echo(f"v_bar     {report.value:.12g}")
    click.echo(f"phi'(v)   {report.derivative:.12g}")
    click.echo(f"2*alpha/m {report.contraction:.12g}")
    click.echo(f"eps       {report.eps:g}")
    click.echo(f"iters     {report.iterations}")
    click.echo(f"converged {str(report.converged).lower()}")
