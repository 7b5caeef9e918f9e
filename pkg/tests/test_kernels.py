"""Backend parity and hull correctness for the hot kernels."""

import numpy as np
import pytest

from cmlo import kernels
from cmlo.kernels import py_core
from conftest import brute_force_hull_area, hull_case_corpus


def _random_stack(rng, k=3, i=5, h=16, d=4):
    return dict(
        w1=rng.normal(size=(k, i, h)),
        b1=rng.normal(size=(k, h)),
        w2=rng.normal(size=(k, h, h)) * 0.5,
        b2=rng.normal(size=(k, h)),
        w3=rng.normal(size=(k, h, 2 * d)),
        b3=rng.normal(size=(k, 2 * d)),
        in_mu=rng.normal(size=i),
        in_sigma=rng.uniform(0.5, 2.0, size=i),
        out_mu=rng.normal(size=d),
        out_sigma=rng.uniform(0.5, 2.0, size=d),
    )


@pytest.mark.parametrize("backend_name", sorted(kernels.backends()))
def test_members_forward_matches_reference(backend_name):
    mod = kernels.backends()[backend_name]
    rng = np.random.default_rng(0)
    s = _random_stack(rng)
    obs = rng.normal(size=(7, 4))
    act = rng.normal(size=(7, 1))
    got_m, got_lv = mod.ensemble_members_forward(
        s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
        s["in_mu"], s["in_sigma"], obs, act, -10.0, 2.0,
    )
    ref_m, ref_lv = py_core.ensemble_members_forward(
        s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
        s["in_mu"], s["in_sigma"], obs, act, -10.0, 2.0,
    )
    np.testing.assert_allclose(got_m, ref_m, atol=1e-12)
    np.testing.assert_allclose(got_lv, ref_lv, atol=1e-12)
    assert np.all(got_lv > -10.0) and np.all(got_lv < 2.0)


@pytest.mark.parametrize("backend_name", sorted(kernels.backends()))
@pytest.mark.parametrize("predict_delta", [True, False])
def test_rollout_matches_reference(backend_name, predict_delta):
    mod = kernels.backends()[backend_name]
    rng = np.random.default_rng(1)
    s = _random_stack(rng)
    start = rng.normal(size=(9, 4))
    actions = rng.normal(size=(9, 6, 1))
    args = (
        s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
        s["in_mu"], s["in_sigma"], s["out_mu"], s["out_sigma"],
        -10.0, 2.0, predict_delta, start, actions,
    )
    np.testing.assert_allclose(
        mod.ensemble_rollout(*args), py_core.ensemble_rollout(*args), atol=1e-10
    )


@pytest.mark.parametrize("backend_name", sorted(kernels.backends()))
def test_rollout_is_iterated_step(backend_name):
    mod = kernels.backends()[backend_name]
    rng = np.random.default_rng(2)
    s = _random_stack(rng)
    start = rng.normal(size=(3, 4))
    actions = rng.normal(size=(3, 5, 1))
    traj = mod.ensemble_rollout(
        s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
        s["in_mu"], s["in_sigma"], s["out_mu"], s["out_sigma"],
        -10.0, 2.0, True, start, actions,
    )
    obs = start
    for t in range(actions.shape[1]):
        obs, _, _ = mod.ensemble_step(
            s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
            s["in_mu"], s["in_sigma"], s["out_mu"], s["out_sigma"],
            -10.0, 2.0, True, obs, actions[:, t, :],
        )
        np.testing.assert_allclose(traj[:, t, :], obs, atol=1e-12)


@pytest.mark.parametrize("backend_name", sorted(kernels.backends()))
def test_hull_area_simple_shapes(backend_name):
    hull_area = kernels.backends()[backend_name].hull_area
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert hull_area(square) == pytest.approx(1.0, abs=1e-12)
    triangle = np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    assert hull_area(triangle) == pytest.approx(0.5, abs=1e-12)
    assert hull_area(np.array([[0.0, 0.0], [1.0, 1.0]])) == 0.0
    collinear = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    assert hull_area(collinear) == 0.0
    assert hull_area(np.tile([[2.0, 3.0]], (5, 1))) == 0.0


@pytest.mark.parametrize("backend_name", sorted(kernels.backends()))
def test_hull_area_against_brute_force(backend_name):
    hull_area = kernels.backends()[backend_name].hull_area
    rng = np.random.default_rng(3)
    for pts in hull_case_corpus(rng, 60):
        assert hull_area(pts) == pytest.approx(
            brute_force_hull_area(pts), abs=1e-9
        )


@pytest.mark.parametrize("backend_name", sorted(kernels.backends()))
def test_hull_area_permutation_invariant(backend_name):
    hull_area = kernels.backends()[backend_name].hull_area
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(40, 2))
    base = hull_area(pts)
    for _ in range(5):
        assert hull_area(rng.permutation(pts)) == pytest.approx(base, abs=1e-12)
