"""Monte Carlo check that the mean-gap bounds dominate realized SGD gaps.

Each case runs many independent SGD chains on a stationary noisy quadratic
whose ψ is known exactly and compares the sample-average gap with the
bound. A case passes when mean ≤ bound + 3·SE. With ``falsify`` the chains
run on a loss whose smallest curvature is halved while the bound keeps the
original ψ, which should make some case fail.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from driftk.gap_bounds import BoundKind, FunctionParams, GapBound
from driftk.reporter import write_csv
from driftk.sgd import run_sgd_replicates
from driftk.synth import make_noisy_quadratic
from driftk.types import frozen_slots

DEFAULT_KS = (10, 100, 1000)
DEFAULT_NOISES = (0.01, 0.5)
DEFAULT_CURVATURE = (1.0, 1.2)
DEFAULT_REPLICATES = 1000

# x(0) sits this far from x* along the flattest axis, inside a ball of RADIUS.
START_DISTANCE = 3.0
RADIUS = 4.0

REPORT_COLUMNS = ("kind", "K", "noise", "falsified", "mc_gap", "se", "bound", "passed")


@frozen_slots
class DominanceCase:
    kind: BoundKind
    K: int
    noise: float
    falsified: bool
    mc_gap: float
    se: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.mc_gap <= self.bound + 3.0 * self.se


def _true_params(curvature: Sequence[float], noise: float) -> FunctionParams:
    h = np.asarray(curvature, dtype=float)
    return FunctionParams(
        m=float(h.min()),
        M=float(h.max()),
        A=noise**2 * float(np.sum(h**2)),
        B=float(h.max() ** 2),
        diam_sq=(2.0 * RADIUS) ** 2,
    )


def dominance_case(
    kind: BoundKind,
    K: int,
    *,
    curvature: Sequence[float] = DEFAULT_CURVATURE,
    noise: float = 0.01,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    falsify: bool = False,
    step_scale: float = 0.5,
    alpha: float = 0.75,
) -> DominanceCase:
    """Compare b(d0, K) with the Monte Carlo mean gap of ``replicates`` chains."""
    h = np.asarray(curvature, dtype=float)
    flattest = int(np.argmin(h))
    params = _true_params(h, noise)
    bound = GapBound.for_params(kind, params, step_scale, alpha)

    h_run = h.copy()
    if falsify:
        h_run[flattest] /= 2.0
    task = make_noisy_quadratic(tuple(h_run), noise, 0.0, 1, margin=RADIUS)

    x0 = np.zeros(h.size)
    x0[flattest] = START_DISTANCE
    rng = np.random.default_rng([seed, K, list(BoundKind).index(kind)])
    x_hat, _ = run_sgd_replicates(
        task.model,
        lambda k, g: task.sample(1, k, g),
        x0,
        K,
        bound.schedule,
        bound.averaging,
        task.feasible_set,
        rng,
        replicates,
        m=params.m,
        B=params.B,
    )
    gaps = 0.5 * np.einsum("rj,j,rj->r", x_hat, h_run, x_hat)
    se = float(gaps.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else 0.0
    return DominanceCase(
        kind=kind,
        K=K,
        noise=noise,
        falsified=falsify,
        mc_gap=float(gaps.mean()),
        se=se,
        bound=bound(START_DISTANCE**2, K),
    )


def dominance_suite(
    Ks: Sequence[int] = DEFAULT_KS,
    kinds: Sequence[BoundKind] = tuple(BoundKind),
    noises: Sequence[float] = DEFAULT_NOISES,
    *,
    curvature: Sequence[float] = DEFAULT_CURVATURE,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    falsify: bool = False,
) -> list[DominanceCase]:
    """One case per (kind, K, noise); an empty grid gives no cases."""
    return [
        dominance_case(
            kind,
            K,
            curvature=curvature,
            noise=noise,
            replicates=replicates,
            seed=seed,
            falsify=falsify,
        )
        for kind in kinds
        for K in Ks
        for noise in noises
    ]


def report_frame(cases: Sequence[DominanceCase]) -> pd.DataFrame:
    rows = [
        (c.kind.value, c.K, c.noise, c.falsified, c.mc_gap, c.se, c.bound, c.passed)
        for c in cases
    ]
    return pd.DataFrame(rows, columns=list(REPORT_COLUMNS))


def write_dominance_report(cases: Sequence[DominanceCase], path: Path) -> Path:
    """Write the pass/fail table; an empty suite writes the header only."""
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_csv(report_frame(cases), path)
