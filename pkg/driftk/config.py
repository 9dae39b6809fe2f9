"""Configuration handling for driftk runs.

A run is described by one TOML file with the tables ``[task]``, ``[target]``,
``[sgd]``, ``[drift]``, ``[params]``, ``[psi]``, ``[controller]``, ``[run]``
and ``[replay]``. Keys are kebab-case; unknown tables and keys are errors.
"""

from __future__ import annotations

import dataclasses
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from pathlib import Path
from typing import Any

from driftk.controller import K_MAX_DEFAULT, Policy
from driftk.drift import ChangeModel, DriftMethod, DriftMode
from driftk.gap_bounds import BoundKind
from driftk.params import ParamMethod
from driftk.types import frozen_slots


class ConfigFileError(ValueError):
    """Raised when a run configuration is malformed or inconsistent."""


FAMILIES = ("regression", "classification", "noisy-quadratic", "replay")
PSI_SOURCES = ("known", "estimated")
REPLAY_LOSSES = ("quadratic", "hinge")


@frozen_slots
class TaskConfig:
    family: str = "regression"
    dimension: int = 5
    horizon: int = 20
    rho: float = 1.0
    sigma_w_sq: float = 0.9
    lam: float = 0.1
    sigma_sq: float = 0.5
    arc_step: float = 0.05
    curvature: tuple[float, ...] = (1.0, 2.0)
    noise: float = 0.5
    margin: float = 1.0
    seed: int = 0
    test_size: int = 1000


@frozen_slots
class TargetConfig:
    eps: float = 0.1


@frozen_slots
class SgdConfig:
    bound: BoundKind = BoundKind.LAST_ITERATE
    step_scale: float = 0.5
    alpha: float = 0.75


@frozen_slots
class DriftConfig:
    method: DriftMethod = DriftMethod.DIRECT
    mode: DriftMode = DriftMode.PRACTICAL
    change: ChangeModel = ChangeModel.CONSTANT
    window: int = 1
    slack_c: float = 1.0
    slack_eta: float = 0.375
    metric: str = "euclidean"
    metric_scale: float = 1.0
    C_g: float | None = None
    L_G: float | None = None


@frozen_slots
class ParamsConfig:
    method: ParamMethod = ParamMethod.QUADRATIC
    slack_c: float = 0.05
    slack_eta: float = 0.375


@frozen_slots
class PsiConfig:
    """Known ψ, or the starting point of estimated ψ.

    Unset values fall back to the synthetic family's analytic constants.
    """

    source: str = "known"
    m: float | None = None
    M: float | None = None
    A: float | None = None
    B: float | None = None


@frozen_slots
class ControllerConfig:
    policy: Policy = Policy.NO_UPDATE
    k_max: int = K_MAX_DEFAULT
    k_initial: int | None = None


@frozen_slots
class RunSection:
    seeds: tuple[int, ...] = (0,)
    workers: int = 0
    out: str = "driftk-out"
    verbose: bool = False
    record_wall_time: bool = False
    upfront_arm: bool = True
    roc_periods: tuple[int, ...] = ()


@frozen_slots
class ReplayConfig:
    path: str | None = None
    period_column: str = "period"
    feature_columns: tuple[str, ...] = ()
    target_column: str = "y"
    test_fraction: float = 0.2
    split_seed: int = 0
    loss: str = "quadratic"


_SECTION_TYPES: dict[str, type] = {
    "task": TaskConfig,
    "target": TargetConfig,
    "sgd": SgdConfig,
    "drift": DriftConfig,
    "params": ParamsConfig,
    "psi": PsiConfig,
    "controller": ControllerConfig,
    "run": RunSection,
    "replay": ReplayConfig,
}


@frozen_slots
class RunConfig:
    """Fully resolved configuration of a run."""

    task: TaskConfig = dataclasses.field(default_factory=TaskConfig)
    target: TargetConfig = dataclasses.field(default_factory=TargetConfig)
    sgd: SgdConfig = dataclasses.field(default_factory=SgdConfig)
    drift: DriftConfig = dataclasses.field(default_factory=DriftConfig)
    params: ParamsConfig = dataclasses.field(default_factory=ParamsConfig)
    psi: PsiConfig = dataclasses.field(default_factory=PsiConfig)
    controller: ControllerConfig = dataclasses.field(default_factory=ControllerConfig)
    run: RunSection = dataclasses.field(default_factory=RunSection)
    replay: ReplayConfig = dataclasses.field(default_factory=ReplayConfig)


# Each entry maps a TOML key to (field name, kind). Kinds name the validator.
_TOML_KEY_TO_FIELD: dict[str, dict[str, tuple[str, str]]] = {
    "task": {
        "family": ("family", "family"),
        "dimension": ("dimension", "pos_int"),
        "horizon": ("horizon", "pos_int"),
        "rho": ("rho", "nonneg_float"),
        "sigma-w-sq": ("sigma_w_sq", "pos_float"),
        "lambda": ("lam", "nonneg_float"),
        "sigma-sq": ("sigma_sq", "pos_float"),
        "arc-step": ("arc_step", "float"),
        "curvature": ("curvature", "float_list"),
        "noise": ("noise", "nonneg_float"),
        "margin": ("margin", "pos_float"),
        "seed": ("seed", "nonneg_int"),
        "test-size": ("test_size", "pos_int"),
    },
    "target": {"eps": ("eps", "pos_float")},
    "sgd": {
        "bound": ("bound", "bound"),
        "step-scale": ("step_scale", "fraction"),
        "alpha": ("alpha", "unit_float"),
    },
    "drift": {
        "method": ("method", "drift_method"),
        "mode": ("mode", "drift_mode"),
        "change": ("change", "change"),
        "window": ("window", "pos_int"),
        "slack-c": ("slack_c", "pos_float"),
        "slack-eta": ("slack_eta", "pos_float"),
        "metric": ("metric", "str"),
        "metric-scale": ("metric_scale", "pos_float"),
        "c-g": ("C_g", "nonneg_float"),
        "l-g": ("L_G", "nonneg_float"),
    },
    "params": {
        "method": ("method", "param_method"),
        "slack-c": ("slack_c", "pos_float"),
        "slack-eta": ("slack_eta", "pos_float"),
    },
    "psi": {
        "source": ("source", "psi_source"),
        "m": ("m", "pos_float"),
        "big-m": ("M", "pos_float"),
        "a": ("A", "nonneg_float"),
        "b": ("B", "nonneg_float"),
    },
    "controller": {
        "policy": ("policy", "policy"),
        "k-max": ("k_max", "pos_int"),
        "k-initial": ("k_initial", "pos_int"),
    },
    "run": {
        "seeds": ("seeds", "int_list"),
        "workers": ("workers", "nonneg_int"),
        "out": ("out", "str"),
        "verbose": ("verbose", "bool"),
        "record-wall-time": ("record_wall_time", "bool"),
        "upfront-arm": ("upfront_arm", "bool"),
        "roc-periods": ("roc_periods", "int_list"),
    },
    "replay": {
        "path": ("path", "str"),
        "period-column": ("period_column", "str"),
        "feature-columns": ("feature_columns", "str_list"),
        "target-column": ("target_column", "str"),
        "test-fraction": ("test_fraction", "fraction"),
        "split-seed": ("split_seed", "nonneg_int"),
        "loss": ("loss", "replay_loss"),
    },
}

_ENUM_KINDS: dict[str, type] = {
    "bound": BoundKind,
    "drift_method": DriftMethod,
    "drift_mode": DriftMode,
    "change": ChangeModel,
    "param_method": ParamMethod,
    "policy": Policy,
}

_CHOICE_KINDS: dict[str, tuple[str, ...]] = {
    "family": FAMILIES,
    "psi_source": PSI_SOURCES,
    "replay_loss": REPLAY_LOSSES,
}


def _where(section: str, toml_key: str) -> str:
    return f"[{section}] '{toml_key}'"


def _require_strict_int(section: str, toml_key: str, value: object) -> int:
    """Raise ConfigFileError unless *value* is an int (not bool)."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigFileError(
            f"{_where(section, toml_key)} must be an integer, "
            f"got {type(value).__name__}"
        )
    return value


def _require_float(section: str, toml_key: str, value: object) -> float:
    """Accept ints and floats (not bools) and return a float."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigFileError(
            f"{_where(section, toml_key)} must be a number, got {type(value).__name__}"
        )
    return float(value)


def _require_choice(section: str, toml_key: str, value: object, choices) -> str:
    if not isinstance(value, str):
        raise ConfigFileError(
            f"{_where(section, toml_key)} must be a string, got {type(value).__name__}"
        )
    if value not in choices:
        allowed = ", ".join(f"'{c}'" for c in choices)
        raise ConfigFileError(
            f"{_where(section, toml_key)} must be one of {allowed}, got '{value}'"
        )
    return value


def _require_list(section: str, toml_key: str, value: object, item: type) -> tuple:
    label = {int: "integers", float: "numbers", str: "strings"}[item]
    if not isinstance(value, list):
        raise ConfigFileError(f"{_where(section, toml_key)} must be a list of {label}")
    if item is float:
        return tuple(_require_float(section, toml_key, v) for v in value)
    if item is int:
        return tuple(_require_strict_int(section, toml_key, v) for v in value)
    if not all(isinstance(v, str) for v in value):
        raise ConfigFileError(f"{_where(section, toml_key)} must be a list of strings")
    return tuple(value)


def _convert_value(section: str, toml_key: str, kind: str, value: object) -> object:
    """Validate and convert a single TOML value to its config field type."""
    where = _where(section, toml_key)
    if kind in _ENUM_KINDS:
        enum_type = _ENUM_KINDS[kind]
        choice = _require_choice(section, toml_key, value, [e.value for e in enum_type])
        return enum_type(choice)
    if kind in _CHOICE_KINDS:
        return _require_choice(section, toml_key, value, _CHOICE_KINDS[kind])

    if kind in ("pos_int", "nonneg_int"):
        number = _require_strict_int(section, toml_key, value)
        if number < (1 if kind == "pos_int" else 0):
            bound = "positive" if kind == "pos_int" else "nonnegative"
            raise ConfigFileError(f"{where} must be {bound}, got {number}")
        return number

    if kind in ("float", "pos_float", "nonneg_float", "fraction", "unit_float"):
        number = _require_float(section, toml_key, value)
        checks = {
            "pos_float": (number > 0, "positive"),
            "nonneg_float": (number >= 0, "nonnegative"),
            "fraction": (0 < number < 1, "in (0, 1)"),
            "unit_float": (0 <= number <= 1, "in [0, 1]"),
        }
        ok, label = checks.get(kind, (True, ""))
        if not ok:
            raise ConfigFileError(f"{where} must be {label}, got {number}")
        return number

    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigFileError(
                f"{where} must be a boolean, got {type(value).__name__}"
            )
        return value

    if kind == "str":
        if not isinstance(value, str):
            raise ConfigFileError(
                f"{where} must be a string, got {type(value).__name__}"
            )
        return value

    if kind == "float_list":
        return _require_list(section, toml_key, value, float)
    if kind == "int_list":
        return _require_list(section, toml_key, value, int)
    if kind == "str_list":
        return _require_list(section, toml_key, value, str)

    raise ConfigFileError(f"{where} has an unhandled kind '{kind}'")


def _parse_toml_section(section: str, table: dict[str, Any]) -> dict[str, object]:
    """Validate and convert one table into field values."""
    keys = _TOML_KEY_TO_FIELD[section]
    result: dict[str, object] = {}
    for toml_key, value in table.items():
        entry = keys.get(toml_key)
        if entry is None:
            raise ConfigFileError(f"[{section}] unknown key '{toml_key}'")
        field_name, kind = entry
        result[field_name] = _convert_value(section, toml_key, kind, value)
    return result


def parse_config_data(data: dict[str, Any]) -> dict[str, dict[str, object]]:
    """Validate a parsed TOML document into per-table field dicts."""
    result: dict[str, dict[str, object]] = {}
    for section, table in data.items():
        if section not in _TOML_KEY_TO_FIELD:
            raise ConfigFileError(f"unknown table [{section}]")
        if not isinstance(table, dict):
            raise ConfigFileError(f"[{section}] must be a table")
        result[section] = _parse_toml_section(section, table)
    return result


def parse_config_text(text: str) -> dict[str, dict[str, object]]:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"Invalid TOML: {exc}") from None
    return parse_config_data(data)


def load_file_config(path: Path | None = None) -> dict[str, dict[str, object]]:
    """Read and validate a run configuration file.

    Returns an empty dict when *path* is None (all defaults).

    Raises:
        ConfigFileError: If the file is missing, unparsable or invalid.
    """
    if path is None:
        return {}
    if not path.is_file():
        raise ConfigFileError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"Invalid TOML in {path}: {exc}") from None
    return parse_config_data(data)


def _validate(config: RunConfig) -> RunConfig:
    """Cross-field checks that single values cannot express."""
    task, drift = config.task, config.drift
    if task.family == "replay" and config.replay.path is None:
        raise ConfigFileError(
            "[replay] 'path' is required when [task] family = 'replay'"
        )
    if task.family == "noisy-quadratic" and not task.curvature:
        raise ConfigFileError("[task] 'curvature' must be nonempty")
    if task.family == "classification" and task.dimension < 2:
        raise ConfigFileError("[task] 'dimension' must be >= 2 for classification")
    if not 0.0 < drift.slack_eta < 0.5 or not 0.0 < config.params.slack_eta < 0.5:
        raise ConfigFileError("'slack-eta' must be in (0, 0.5)")
    if drift.mode is DriftMode.CERTIFIED and (drift.C_g is None or drift.L_G is None):
        raise ConfigFileError("[drift] certified mode needs 'c-g' and 'l-g'")
    if config.controller.policy is Policy.KNOWN_RHO and task.family in (
        "classification",
        "replay",
    ):
        raise ConfigFileError(
            f"the known-rho policy needs a known drift; '{task.family}' has none"
        )
    if not config.run.seeds:
        raise ConfigFileError("[run] 'seeds' must not be empty")
    if len(set(config.run.seeds)) != len(config.run.seeds):
        raise ConfigFileError("[run] 'seeds' must be distinct")
    if min(config.run.seeds) < 0:
        raise ConfigFileError("[run] 'seeds' must be nonnegative")
    return config


def build_config(
    cli_overrides: dict[str, object],
    file_config: dict[str, dict[str, object]],
) -> RunConfig:
    """Merge file config and CLI overrides into a RunConfig.

    CLI overrides are ``[run]`` fields (``seeds``, ``workers``, ``out``,
    ``verbose``) plus ``replay_path``; CLI values always win.
    """
    sections = {name: dict(fields) for name, fields in file_config.items()}
    overrides = dict(cli_overrides)
    if "replay_path" in overrides:
        sections.setdefault("replay", {})["path"] = overrides.pop("replay_path")
    sections.setdefault("run", {}).update(overrides)
    try:
        built = {
            name: _SECTION_TYPES[name](**fields) for name, fields in sections.items()
        }
    except TypeError as exc:
        raise ConfigFileError(f"invalid configuration: {exc}") from None
    return _validate(RunConfig(**built))


# ---------------------------------------------------------------------------
# Echo
# ---------------------------------------------------------------------------


def _toml_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return _toml_value(value.value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return str(value)


def config_to_toml(config: RunConfig) -> str:
    """Render the resolved configuration, defaults included, as TOML.

    Unset optional values are omitted; reading the text back yields an equal
    RunConfig.
    """
    lines: list[str] = []
    for section, keys in _TOML_KEY_TO_FIELD.items():
        table = getattr(config, section)
        lines.append(f"[{section}]")
        for toml_key, (field_name, _) in keys.items():
            value = getattr(table, field_name)
            if value is not None:
                lines.append(f"{toml_key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)
