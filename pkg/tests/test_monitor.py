"""Shift estimator and event trigger: geometry oracles and the recurrence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmlo import monitor
from cmlo.errors import DegenerateBase, DegenerateCloud
from conftest import brute_force_hull_area


class FakeModel:
    """Scripted one-step errors for trigger tests."""

    def __init__(self, errors):
        self.errors = list(errors)
        self.calls = 0

    def one_step_error(self, _):
        value = self.errors[min(self.calls, len(self.errors) - 1)]
        self.calls += 1
        if isinstance(value, Exception):
            raise value
        return value


class TestPcaProject:
    def test_axis_aligned_line(self):
        pts = np.zeros((10, 3))
        pts[:, 0] = np.linspace(-2, 2, 10)
        projected, basis, variance = monitor.pca_project(pts)
        np.testing.assert_allclose(basis[0], [1, 0, 0], atol=1e-12)
        assert variance[1] == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(projected[:, 0], pts[:, 0], atol=1e-12)

    def test_isotropic_cloud_eigenvalues_close(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(4000, 2))
        _, _, variance = monitor.pca_project(pts)
        # compare against a directly computed covariance eigen-solve
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / (len(pts) - 1)
        eigs = np.sort(np.linalg.eigvalsh(cov))[::-1]
        np.testing.assert_allclose(variance, eigs[:2], rtol=1e-10)
        assert abs(variance[0] - variance[1]) < 0.15

    def test_two_points_preserve_distance(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]])
        projected, _, _ = monitor.pca_project(pts)
        dist = np.linalg.norm(projected[0] - projected[1])
        assert dist == pytest.approx(3.0, abs=1e-9)

    def test_identical_points_degenerate(self):
        with pytest.raises(DegenerateCloud):
            monitor.pca_project(np.ones((5, 3)))

    def test_sign_convention(self):
        pts = np.zeros((6, 2))
        pts[:, 0] = [-3, -2, -1, 1, 2, 3]
        _, basis, _ = monitor.pca_project(pts)
        assert basis[0, 0] > 0


class TestConvexHullArea:
    def test_unit_square(self):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
        assert monitor.convex_hull_area(pts) == pytest.approx(1.0, abs=1e-12)

    def test_triangle(self):
        pts = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
        assert monitor.convex_hull_area(pts) == pytest.approx(0.5, abs=1e-12)

    def test_against_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            pts = rng.normal(size=(rng.integers(3, 80), 2))
            assert monitor.convex_hull_area(pts) == pytest.approx(
                brute_force_hull_area(pts), abs=1e-9
            )

    @given(st.integers(0, 2**32 - 1), st.integers(3, 40))
    @settings(max_examples=40, deadline=None)
    def test_adding_points_never_decreases_area(self, seed, n):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-1, 1, size=(n, 2))
        base = monitor.convex_hull_area(pts)
        extra = np.concatenate([pts, rng.uniform(-1, 1, size=(3, 2))])
        assert monitor.convex_hull_area(extra) >= base - 1e-12


class TestCoverageVolume:
    def _config(self, **kw):
        defaults = dict(alpha=1.0, check_frequency=1, t_min=1, t_max=10,
                        hull_sample_size=1000)
        defaults.update(kw)
        return monitor.TriggerConfig(**defaults)

    def test_repeated_state_gives_zero_flagged(self):
        est = monitor.coverage_volume(np.ones((50, 3)), self._config())
        assert est.volume == 0.0
        assert est.degenerate

    def test_known_square_area(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 1, size=(4000, 2))
        est = monitor.coverage_volume(pts, self._config(), rng)
        assert 0.93 <= est.volume <= 1.0 + 1e-9

    def test_no_subsampling_is_deterministic(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(200, 3))
        a = monitor.coverage_volume(pts, self._config(), np.random.default_rng(1))
        b = monitor.coverage_volume(pts, self._config(), np.random.default_rng(2))
        assert a.volume == b.volume


class TestRawCondition:
    def test_boundary(self):
        assert monitor.raw_condition(1.0, 1.0, 2.5) == pytest.approx(2.5)

    def test_zero_error_never_triggers_alone(self):
        assert monitor.raw_condition(5.0, 1.0, 0.0) == 0.0

    def test_direct_multiplication(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            v_new, v_base, err = rng.uniform(0.1, 5.0, size=3)
            assert monitor.raw_condition(v_new, v_base, err) == pytest.approx(
                v_new / v_base * err
            )

    def test_degenerate_base(self):
        with pytest.raises(DegenerateBase):
            monitor.raw_condition(1.0, 0.0, 1.0)


def _square_states(n=64, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 2))


class TestTriggerStep:
    def _config(self, **kw):
        defaults = dict(alpha=0.5, beta=1.0, check_frequency=5, t_min=10, t_max=30,
                        hull_sample_size=1000)
        defaults.update(kw)
        return monitor.TriggerConfig(**defaults)

    def test_validation(self):
        with pytest.raises(ValueError, match="multiples"):
            self._config(t_min=7)
        with pytest.raises(ValueError):
            self._config(alpha=0.0)
        with pytest.raises(ValueError):
            self._config(t_min=40)

    def test_zero_contributions_fire_only_at_t_max(self):
        config = self._config(alpha=1e-9)
        state = monitor.TriggerState(base_hull_volume=1.0)
        # perfect model: error 0 -> term log(0 + 1) = 0 -> accumulator stays 0
        model = FakeModel([0.0] * 20)
        states = _square_states()
        fired_at = None
        for i in range(6):
            decision, state = monitor.trigger_step(state, config, None, model, states)
            if decision == "train":
                fired_at = (i + 1) * config.check_frequency
                break
        assert fired_at == config.t_max

    def test_single_estimate_boundary_fires_at_t_min(self):
        # one term log(ratio * err + beta) = alpha exactly at the t_min grid point
        alpha = 0.8
        config = self._config(alpha=alpha, check_frequency=10, t_min=10, t_max=50)
        state = monitor.TriggerState(base_hull_volume=0.0)  # ratio falls back to 1
        err = math.exp(alpha) - 1.0  # log(err + 1) == alpha
        decision, state = monitor.trigger_step(
            state, config, None, FakeModel([err]), _square_states()
        )
        assert decision == "train"

    def test_scripted_sequence_matches_hand_trace(self):
        # hand-simulated accumulator with ratio pinned to 1 (base volume 0)
        errors = [0.2, 0.1, 0.9, 0.05]
        beta = 1.0
        alpha = math.log(1.2) + math.log(1.1) + math.log(1.9) - 1e-9
        config = self._config(
            alpha=alpha, beta=beta, check_frequency=5, t_min=5, t_max=100
        )
        state = monitor.TriggerState(base_hull_volume=0.0)
        model = FakeModel(errors)
        states = _square_states()
        expected_acc = 0.0
        decisions = []
        for err in errors:
            expected_acc += math.log(err + beta)
            decision, state = monitor.trigger_step(state, config, None, model, states)
            decisions.append(decision)
            if decision == "train":
                expected_acc = 0.0
            assert state.accumulator == pytest.approx(expected_acc, abs=1e-12)
        assert decisions == ["hold", "hold", "train", "hold"]

    def test_estimator_failure_is_zero_term_logged(self):
        config = self._config()
        state = monitor.TriggerState(base_hull_volume=1.0)
        model = FakeModel([RuntimeError("boom")])
        decision, state = monitor.trigger_step(
            state, config, None, model, _square_states()
        )
        assert decision == "hold"
        assert state.accumulator == 0.0
        assert state.estimates_log[-1]["failed"]

    def test_no_model_counts_as_failure_until_forced(self):
        config = self._config(check_frequency=10, t_min=10, t_max=30)
        state = monitor.TriggerState()
        decision, state = monitor.trigger_step(
            state, config, None, None, _square_states(), force=True
        )
        assert decision == "train"
        assert state.base_hull_volume > 0.0  # anchored from the coverage estimate

    def test_reset_and_reanchor_on_train(self):
        config = self._config(alpha=1e-6, check_frequency=10, t_min=10, t_max=30)
        state = monitor.TriggerState(base_hull_volume=0.5)
        decision, state = monitor.trigger_step(
            state, config, None, FakeModel([5.0]), _square_states()
        )
        assert decision == "train"
        assert state.accumulator == 0.0
        assert state.steps_since_training == 0
        assert state.base_hull_volume != 0.5

    def test_trace_csv(self, tmp_path):
        config = self._config()
        state = monitor.TriggerState(base_hull_volume=1.0)
        model = FakeModel([0.3, 0.4])
        for _ in range(2):
            _, state = monitor.trigger_step(state, config, None, model, _square_states())
        path = tmp_path / "trace.csv"
        monitor.write_trigger_trace(state, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,ratio,pred_error,term,accumulator,decision"
        assert len(lines) == 3
