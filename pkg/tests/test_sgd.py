"""Tests for driftk.sgd: schedules, averaging weights and projected SGD."""

from __future__ import annotations

import numpy as np
import pytest

from driftk.objective import FeasibleSet, NoisyQuadraticLoss
from driftk.sgd import (
    AveragingScheme,
    ScheduleError,
    StepKind,
    StepSchedule,
    averaging_weights,
    gamma_ratio,
    run_sgd,
    run_sgd_replicates,
)


def _point_sampler(z):
    z = np.asarray(z, dtype=float)
    return lambda k, rng: np.tile(z, (k, 1))


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


class TestStepSchedule:
    def test_constant(self) -> None:
        np.testing.assert_allclose(StepSchedule.constant(0.3).steps(3), [0.3] * 3)

    def test_power(self) -> None:
        steps = StepSchedule.power(1.0, 0.5).steps(4)
        np.testing.assert_allclose(steps, [1.0, 1 / np.sqrt(2), 1 / np.sqrt(3), 0.5])

    def test_inverse_strong(self) -> None:
        np.testing.assert_allclose(
            StepSchedule.inverse_strong(2.0).steps(3), [0.5, 0.25, 1 / 6]
        )

    def test_step_zero_is_one(self) -> None:
        assert StepSchedule.power(0.1, 1.0).step(0) == 1.0
        assert StepSchedule.power(0.1, 1.0).step(2) == pytest.approx(0.05)

    def test_zero_constant_allowed(self) -> None:
        assert StepSchedule.constant(0.0).kind is StepKind.CONSTANT

    def test_invalid_values(self) -> None:
        with pytest.raises(ScheduleError):
            StepSchedule.constant(-0.1)
        with pytest.raises(ScheduleError, match="exponent"):
            StepSchedule.power(1.0, 1.5)
        with pytest.raises(ScheduleError, match="m > 0"):
            StepSchedule.inverse_strong(0.0)


# ---------------------------------------------------------------------------
# Averaging
# ---------------------------------------------------------------------------


class TestAveragingWeights:
    @pytest.mark.parametrize("scheme", list(AveragingScheme))
    def test_weights_are_convex(self, scheme: AveragingScheme) -> None:
        schedule = StepSchedule.constant(0.1)
        w = averaging_weights(scheme, schedule, 25, m=1.0, B=1.0)
        assert w.shape == (26,)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0)

    def test_last_iterate(self) -> None:
        w = averaging_weights(
            AveragingScheme.LAST_ITERATE, StepSchedule.constant(0.1), 3
        )
        np.testing.assert_array_equal(w, [0, 0, 0, 1])

    def test_uniform_skips_start(self) -> None:
        w = averaging_weights(AveragingScheme.UNIFORM, StepSchedule.constant(0.1), 4)
        np.testing.assert_allclose(w, [0, 0.25, 0.25, 0.25, 0.25])

    def test_gamma_weights_grow_geometrically(self) -> None:
        schedule = StepSchedule.constant(0.5)
        w = averaging_weights(AveragingScheme.GAMMA, schedule, 3, m=1.0, B=0.0)
        ratio = gamma_ratio(0.5, 1.0, 0.0)
        assert w[0] == 0.0
        assert w[2] / w[1] == pytest.approx(1.0 / ratio)
        assert w[3] / w[2] == pytest.approx(1.0 / ratio)

    def test_gamma_large_K_is_finite(self) -> None:
        w = averaging_weights(
            AveragingScheme.GAMMA, StepSchedule.constant(0.5), 100_000, m=1.0, B=0.0
        )
        assert np.all(np.isfinite(w))
        assert w[-1] == pytest.approx(0.5)

    def test_inverse_step_includes_start(self) -> None:
        w = averaging_weights(
            AveragingScheme.INVERSE_STEP, StepSchedule.inverse_strong(1.0), 2
        )
        np.testing.assert_allclose(w, np.array([1.0, 1.0, 2.0]) / 4.0)

    def test_gamma_needs_constant_steps(self) -> None:
        with pytest.raises(ScheduleError, match="constant step"):
            averaging_weights(
                AveragingScheme.GAMMA, StepSchedule.power(1.0, 0.5), 3, m=1.0, B=0.0
            )

    def test_gamma_needs_constants(self) -> None:
        with pytest.raises(ScheduleError, match="needs m and B"):
            averaging_weights(AveragingScheme.GAMMA, StepSchedule.constant(0.1), 3)

    def test_K_zero_rejected(self) -> None:
        with pytest.raises(ScheduleError, match="K >= 1"):
            averaging_weights(AveragingScheme.UNIFORM, StepSchedule.constant(0.1), 0)


# ---------------------------------------------------------------------------
# run_sgd
# ---------------------------------------------------------------------------


class TestRunSgd:
    def setup_method(self) -> None:
        self.model = NoisyQuadraticLoss((1.0,))
        self.ball = FeasibleSet.ball([0.0], 10.0)

    def test_deterministic_contraction(self) -> None:
        # x ← x − 0.5(x − 0) halves each step
        result = run_sgd(
            self.model,
            _point_sampler([0.0]),
            np.array([8.0]),
            3,
            StepSchedule.constant(0.5),
            AveragingScheme.LAST_ITERATE,
            self.ball,
            np.random.default_rng(0),
            record_path=True,
        )
        np.testing.assert_allclose(result.x_last, [1.0])
        np.testing.assert_allclose(result.path[:, 0], [8.0, 4.0, 2.0, 1.0])
        assert result.samples_used == 3

    def test_uniform_average(self) -> None:
        result = run_sgd(
            self.model,
            _point_sampler([0.0]),
            np.array([8.0]),
            3,
            StepSchedule.constant(0.5),
            AveragingScheme.UNIFORM,
            self.ball,
            np.random.default_rng(0),
        )
        np.testing.assert_allclose(result.x_hat, [7.0 / 3.0])

    def test_zero_step_freezes(self) -> None:
        result = run_sgd(
            self.model,
            _point_sampler([5.0]),
            np.array([1.0]),
            4,
            StepSchedule.constant(0.0),
            AveragingScheme.UNIFORM,
            self.ball,
            np.random.default_rng(0),
        )
        np.testing.assert_allclose(result.x_hat, [1.0])

    def test_projection_keeps_iterates_feasible(self) -> None:
        ball = FeasibleSet.ball([0.0], 1.0)
        result = run_sgd(
            self.model,
            _point_sampler([5.0]),
            np.array([0.0]),
            5,
            StepSchedule.constant(1.0),
            AveragingScheme.LAST_ITERATE,
            ball,
            np.random.default_rng(0),
            record_path=True,
        )
        assert np.all(np.abs(result.path) <= 1.0 + 1e-12)
        np.testing.assert_allclose(result.x_last, [1.0])

    def test_infeasible_start_rejected(self) -> None:
        with pytest.raises(ValueError, match="outside the feasible set"):
            run_sgd(
                self.model,
                _point_sampler([0.0]),
                np.array([20.0]),
                2,
                StepSchedule.constant(0.1),
                AveragingScheme.LAST_ITERATE,
                self.ball,
                np.random.default_rng(0),
            )

    def test_zero_budget_rejected(self) -> None:
        with pytest.raises(ScheduleError, match="K >= 1"):
            run_sgd(
                self.model,
                _point_sampler([0.0]),
                np.array([1.0]),
                0,
                StepSchedule.constant(0.1),
                AveragingScheme.LAST_ITERATE,
                self.ball,
                np.random.default_rng(0),
            )

    def test_short_sampler_rejected(self) -> None:
        with pytest.raises(ScheduleError, match="sampler returned 1 samples"):
            run_sgd(
                self.model,
                lambda k, rng: np.zeros((1, 1)),
                np.array([1.0]),
                3,
                StepSchedule.constant(0.1),
                AveragingScheme.LAST_ITERATE,
                self.ball,
                np.random.default_rng(0),
            )

    def test_same_rng_same_result(self) -> None:
        def sampler(k, rng):
            return rng.standard_normal((k, 1))

        args = (
            self.model,
            sampler,
            np.array([1.0]),
            50,
            StepSchedule.power(0.5, 0.75),
            AveragingScheme.UNIFORM,
            self.ball,
        )
        a = run_sgd(*args, np.random.default_rng(3))
        b = run_sgd(*args, np.random.default_rng(3))
        np.testing.assert_array_equal(a.x_hat, b.x_hat)


class TestRunSgdReplicates:
    def test_shapes_and_deterministic_limit(self) -> None:
        model = NoisyQuadraticLoss((1.0, 2.0))
        ball = FeasibleSet.ball([0.0, 0.0], 5.0)
        x_hat, x_last = run_sgd_replicates(
            model,
            lambda k, rng: np.zeros((k, 2)),
            np.array([1.0, 1.0]),
            2,
            StepSchedule.constant(0.25),
            AveragingScheme.LAST_ITERATE,
            ball,
            np.random.default_rng(0),
            6,
        )
        assert x_hat.shape == (6, 2)
        # factors (1 − 0.25h)² per coordinate
        np.testing.assert_allclose(x_last, np.tile([0.5625, 0.25], (6, 1)))
