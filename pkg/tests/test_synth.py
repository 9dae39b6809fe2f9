"""Tests for driftk.synth: synthetic drifting task families."""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from driftk.drift import ChangeModel
from driftk.objective import empirical_gradient, empirical_loss
from driftk.synth import (
    SynthError,
    make_classification,
    make_noisy_quadratic,
    make_regression,
    to_frame,
)


class TestRegression:
    def setup_method(self) -> None:
        self.task = make_regression(3, 0.9, 0.1, 0.5, 6, seed=4)

    def test_minimizers_move_exactly_rho(self) -> None:
        steps = [
            np.linalg.norm(self.task.minimizer(n + 1) - self.task.minimizer(n))
            for n in range(1, 6)
        ]
        np.testing.assert_allclose(steps, 0.5)

    def test_minimizers_are_feasible(self) -> None:
        fs = self.task.feasible_set
        assert all(fs.contains(self.task.minimizer(n)) for n in range(1, 7))

    def test_gap_is_objective_excess(self) -> None:
        x_star = self.task.minimizer(3)
        x = x_star + np.array([0.3, -0.2, 0.1])
        assert self.task.gap(3, x_star) == 0.0
        excess = self.task.objective(3, x) - self.task.objective(3, x_star)
        assert excess == pytest.approx(self.task.gap(3, x))

    def test_sample_gradient_vanishes_at_minimizer(self) -> None:
        batch = self.task.sample(4, 200_000, np.random.default_rng(0))
        grad = empirical_gradient(self.task.model, self.task.minimizer(4), batch)
        np.testing.assert_allclose(grad, 0.0, atol=0.05)

    def test_known_params(self) -> None:
        psi = self.task.known_params()
        assert psi.m == pytest.approx(1.0)
        assert psi.M == pytest.approx(1.0)
        assert psi.A > 0 and psi.B > 0
        assert psi.diam_sq == pytest.approx(self.task.feasible_set.diameter ** 2)
        assert self.task.change is ChangeModel.CONSTANT

    def test_same_seed_same_direction(self) -> None:
        other = make_regression(3, 0.9, 0.1, 0.5, 6, seed=4)
        assert other.direction == self.task.direction

    def test_invalid_variance(self) -> None:
        with pytest.raises(SynthError, match="feature variance"):
            make_regression(3, 0.0, 0.1, 0.5, 6)

    def test_invalid_horizon(self) -> None:
        with pytest.raises(SynthError, match="horizon"):
            make_regression(3, 1.0, 0.1, 0.5, 0)


class TestClassification:
    def setup_method(self) -> None:
        self.task = make_classification(4, 0.5, 0.1, 10, 0.05, seed=1)

    def test_means_rotate_by_arc_step(self) -> None:
        mu1, neg1 = self.task.means(1)
        mu2, _ = self.task.means(2)
        assert np.linalg.norm(mu1) == pytest.approx(1.0)
        np.testing.assert_allclose(neg1, -mu1)
        assert float(mu1 @ mu2) == pytest.approx(math.cos(0.05))

    def test_labels_and_shape(self) -> None:
        batch = self.task.sample(1, 500, np.random.default_rng(0))
        assert batch.shape == (500, 5)
        assert set(np.unique(batch[:, -1])) == {-1.0, 1.0}

    def test_no_closed_form(self) -> None:
        assert self.task.minimizer(1) is None
        assert self.task.gap(1, np.zeros(4)) is None
        assert self.task.rho is None
        assert self.task.change is ChangeModel.BOUNDED

    def test_feasible_radius(self) -> None:
        assert self.task.feasible_set.diameter == pytest.approx(2.0 / math.sqrt(0.1))

    def test_mean_direction_scores_separate_classes(self) -> None:
        batch = self.task.sample(3, 1000, np.random.default_rng(2))
        mu, _ = self.task.means(3)
        scores = self.task.scores(mu, batch)
        accuracy = float(np.mean(np.sign(scores) == batch[:, -1]))
        assert accuracy > 0.8

    def test_needs_two_dimensions(self) -> None:
        with pytest.raises(SynthError, match="d >= 2"):
            make_classification(1, 0.5, 0.1, 10, 0.05)


class TestNoisyQuadratic:
    def setup_method(self) -> None:
        self.task = make_noisy_quadratic((1.0, 2.0), 0.5, 0.3, 5, seed=2)

    def test_known_params_are_exact(self) -> None:
        psi = self.task.known_params()
        assert (psi.m, psi.M) == (1.0, 2.0)
        assert psi.A == pytest.approx(0.25 * 5.0)
        assert psi.B == 4.0

    def test_objective_is_expected_loss(self) -> None:
        x = self.task.minimizer(2) + np.array([1.0, 0.0])
        batch = self.task.sample(2, 200_000, np.random.default_rng(0))
        empirical = empirical_loss(self.task.model, x, batch)
        assert empirical == pytest.approx(self.task.objective(2, x), rel=0.02)
        assert self.task.gap(2, x) == pytest.approx(0.5)

    def test_stationary_family(self) -> None:
        task = make_noisy_quadratic((1.0,), 0.1, 0.0, 3)
        np.testing.assert_allclose(task.minimizer(3), [0.0])
        assert task.feasible_set.diameter == pytest.approx(2.0)

    def test_invalid_curvature(self) -> None:
        with pytest.raises(SynthError, match="curvatures"):
            make_noisy_quadratic((1.0, 0.0), 0.1, 0.1, 3)


class TestToFrame:
    def test_layout(self) -> None:
        task = make_regression(2, 1.0, 0.1, 0.2, 3)
        frame = to_frame(task, 4, seed=1)
        assert list(frame.columns) == ["period", "w1", "w2", "y"]
        assert len(frame) == 12
        assert frame["period"].tolist() == [1] * 4 + [2] * 4 + [3] * 4

    def test_deterministic(self) -> None:
        task = make_regression(2, 1.0, 0.1, 0.2, 3)
        pd.testing.assert_frame_equal(
            to_frame(task, 5, seed=7), to_frame(task, 5, seed=7)
        )

    def test_rejects_targetless_samples(self) -> None:
        task = make_noisy_quadratic((1.0, 2.0), 0.1, 0.1, 3)
        with pytest.raises(SynthError, match="exported"):
            to_frame(task, 2)
