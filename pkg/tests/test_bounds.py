"""Bound calculators and campaigns against direct arithmetic and enumeration."""

import math

import numpy as np
import pytest

from cmlo import bounds, envs
from cmlo import mdp as tab
from cmlo.errors import InfeasibleInterval, InvalidLipschitz


def _inputs(
    gamma=0.9,
    reward_bound=1.0,
    eps_opt=0.0,
    eps1=0.0,
    eps2=0.0,
    v1=0.0,
    v2=0.0,
    sigma=0.0,
    lipschitz=None,
):
    if lipschitz is None:
        lipschitz = reward_bound / (1 - gamma)
    return bounds.BoundInputs(
        kappa=bounds.kappa(gamma, reward_bound),
        lipschitz=lipschitz,
        eps_opt=eps_opt,
        eps_m1_pi1=eps1,
        eps_m2_pi2=eps2,
        ceiling_v1=v1,
        ceiling_v2=v2,
        sigma=sigma,
        gamma=gamma,
        reward_bound=reward_bound,
    )


class TestKappa:
    def test_arithmetic(self):
        assert bounds.kappa(0.9, 1.0) == pytest.approx(180.0, abs=1e-9)
        assert bounds.kappa(0.99, 1.0) == pytest.approx(19800.0, rel=1e-12)

    def test_zero_reward_bound(self):
        assert bounds.kappa(0.5, 0.0) == 0.0

    def test_gamma_out_of_range(self):
        with pytest.raises(ValueError):
            bounds.kappa(1.0, 1.0)


class TestBoundInputs:
    def test_kappa_consistency_enforced(self):
        with pytest.raises(ValueError, match="kappa"):
            bounds.BoundInputs(
                kappa=1.0, lipschitz=10.0, eps_opt=0.0, eps_m1_pi1=0.0,
                eps_m2_pi2=0.0, ceiling_v1=0.0, ceiling_v2=0.0, sigma=0.0,
                gamma=0.9, reward_bound=1.0,
            )

    def test_lipschitz_floor_enforced(self):
        with pytest.raises(InvalidLipschitz):
            _inputs(lipschitz=1.0)


class TestTheorem41:
    def test_identical_arguments_give_zero(self):
        c, conservative = bounds.theorem41_bound(_inputs(eps1=0.2, eps2=0.2))
        assert c == pytest.approx(0.0, abs=1e-12)
        assert conservative == pytest.approx(-2 * 180.0 * 0.2, abs=1e-9)

    def test_arithmetic(self):
        c, _ = bounds.theorem41_bound(_inputs(v2=1.0, eps_opt=0.1))
        assert c == pytest.approx(0.9, abs=1e-12)

    def test_conservative_sound_on_random_pairs(self):
        config = bounds.CampaignConfig(n_trials=60, n_states=8, n_actions=3, seed=4)
        for r in bounds.verify_gap_campaign(config):
            assert r.conservative_ok
            assert r.actual_gap >= r.conservative_c - 1e-9


class TestCeilingGap:
    def test_identical_models(self):
        mdp = envs.random_mdp(6, 2, seed=0)
        assert bounds.ceiling_gap_bound(
            mdp, mdp, mdp.reward_bound / (1 - mdp.gamma), mdp.gamma
        ) == pytest.approx(0.0, abs=1e-12)

    def test_single_state_degenerate(self):
        t = np.ones((1, 2, 1))
        m1 = tab.TabularMdp(t, np.array([[0.1, -0.2]]), 0.9, 1.0)
        m2 = tab.TabularMdp(t, np.array([[0.3, 0.0]]), 0.9, 1.0)
        assert bounds.ceiling_gap_bound(m1, m2, 10.0, 0.9) == 0.0

    def test_invalid_lipschitz(self):
        mdp = envs.random_mdp(4, 2, seed=1)
        with pytest.raises(InvalidLipschitz):
            bounds.ceiling_gap_bound(mdp, mdp, 0.5, mdp.gamma)

    def test_bounds_exact_ceiling_difference(self):
        rng = np.random.default_rng(2)
        ctx = tab.EvalContext.uniform(6)
        for _ in range(60):
            true_mdp = envs.random_mdp(6, 2, seed=rng)
            sampler = envs.GenerativeSampler(true_mdp, rng)
            m1 = tab.build_empirical_model(
                sampler.draw_all(15), true_mdp.reward, true_mdp.gamma, 1.0
            )
            m2 = tab.build_empirical_model(
                sampler.draw_all(30), true_mdp.reward, true_mdp.gamma, 1.0
            )
            lipschitz = 1.0 / (1 - true_mdp.gamma)
            bound = bounds.ceiling_gap_bound(m1, m2, lipschitz, true_mdp.gamma)
            _, pi1, _ = tab.value_iteration(m1, 1e-12)
            _, pi2, _ = tab.value_iteration(m2, 1e-12)
            _, v1 = tab.policy_evaluation(m1, pi1, ctx)
            _, v2 = tab.policy_evaluation(m2, pi2, ctx)
            assert abs(v2 - v1) <= bound + 1e-9


class TestTheorem43:
    def test_identical_models_satisfy_any_sigma(self):
        mdp = envs.random_mdp(5, 2, seed=3)
        report = bounds.theorem43_refined_bound(_inputs(sigma=0.0), mdp, mdp)
        assert report.constraint_lhs == 0.0
        assert report.constraint_satisfied

    def test_zero_sigma_violated_when_models_differ(self):
        m1 = envs.random_mdp(5, 2, seed=4)
        m2 = envs.random_mdp(5, 2, seed=5)
        report = bounds.theorem43_refined_bound(_inputs(sigma=0.0), m1, m2)
        assert not report.constraint_satisfied

    def test_sigma_at_exact_lhs_and_hand_enumeration(self):
        m1 = envs.random_mdp(5, 3, seed=6)
        m2 = envs.random_mdp(5, 3, seed=7)
        lhs = 0.0
        for s in range(5):
            for a in range(3):
                lhs = max(lhs, tab.tv_distance(m1.transition[s, a], m2.transition[s, a]))
        report = bounds.theorem43_refined_bound(_inputs(sigma=lhs), m1, m2)
        assert report.constraint_lhs == pytest.approx(lhs, abs=1e-12)
        assert report.constraint_satisfied

    def test_constraint_monotone_in_sigma(self):
        m1 = envs.random_mdp(4, 2, seed=8)
        m2 = envs.random_mdp(4, 2, seed=9)
        lhs = bounds.theorem43_refined_bound(_inputs(sigma=0.0), m1, m2).constraint_lhs
        satisfied = [
            bounds.theorem43_refined_bound(_inputs(sigma=s), m1, m2).constraint_satisfied
            for s in np.linspace(0, 2 * lhs + 0.01, 9)
        ]
        # once satisfied, stays satisfied as sigma grows
        first = satisfied.index(True)
        assert all(satisfied[first:])


class TestR1:
    def test_zero_new_bias_with_positive_budget(self):
        assert bounds.check_r1(_inputs(eps1=0.5), eps_m2_pi2=0.0)

    def test_equal_bias_with_positive_sigma_fails(self):
        inp = _inputs(eps1=0.3, sigma=0.05)
        assert not bounds.check_r1(inp, eps_m2_pi2=0.3)

    def test_agrees_with_direct_inequality(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            gamma = float(rng.uniform(0.5, 0.95))
            r = float(rng.uniform(0.5, 2.0))
            lipschitz = r / (1 - gamma) * float(rng.uniform(1.0, 2.0))
            inp = _inputs(
                gamma=gamma,
                reward_bound=r,
                lipschitz=lipschitz,
                eps1=float(rng.uniform(0, 0.5)),
                eps2=float(rng.uniform(0, 0.5)),
                sigma=float(rng.uniform(0, 0.2)),
                eps_opt=float(rng.uniform(0, 0.05)),
            )
            direct = 2 * inp.eps_m2_pi2 <= (
                2 * inp.eps_m1_pi1
                - (1 - gamma) * lipschitz / r * 2 * inp.sigma
                - 2 / inp.kappa * inp.eps_opt
            )
            assert bounds.check_r1(inp) == direct


class TestCorollaryIntervalK:
    def _query(self, delta=0.5, sigma=0.0, eps_opt=0.0, vol_s=4, xi=0.05, n=100):
        return bounds.IntervalQuery(
            delta_m1=delta, sigma=sigma, eps_opt=eps_opt,
            lipschitz=10.0, reward_bound=1.0, gamma=0.9,
            vol_s=vol_s, xi=xi, n_existing=n,
        )

    def test_documented_value(self):
        # eps = 0.1, xi = 0.05, vol_s = 4, N = 100
        q = self._query(delta=0.1, n=100)
        assert q.derived_epsilon() == pytest.approx(0.1)
        assert bounds.corollary_interval_k(q) == 1027

    def test_boundary_gives_zero(self):
        threshold = 2.0 / 0.1**2 * math.log((2**4 - 2) / 0.05)
        q = self._query(delta=0.1, n=math.ceil(threshold))
        assert bounds.corollary_interval_k(q) == 0

    def test_monotone_in_model_bias(self):
        ks = [
            bounds.corollary_interval_k(self._query(delta=d, n=10))
            for d in (0.5, 0.4, 0.3, 0.2, 0.1)
        ]
        assert all(k2 > k1 for k1, k2 in zip(ks, ks[1:]))

    def test_infeasible_epsilon(self):
        with pytest.raises(InfeasibleInterval):
            bounds.corollary_interval_k(self._query(delta=0.1, sigma=1.0))

    def test_budget_terms_match_formula(self):
        q = self._query(delta=0.5, sigma=0.02, eps_opt=0.01)
        expected = 0.5 - (0.1 * 10.0 / 1.0) * 0.04 - (0.01 / (1.0 * 0.9)) * 0.01
        assert q.derived_epsilon() == pytest.approx(expected, abs=1e-12)


class TestConcentrationBound:
    def test_two_letter_arithmetic(self):
        assert bounds.l1_concentration_bound(50, 0.2, 2) == pytest.approx(
            2 * math.exp(-1.0), rel=1e-12
        )

    def test_large_epsilon_vanishes(self):
        assert bounds.l1_concentration_bound(1000, 1.5, 2) < 1e-100

    def test_clipped_to_one(self):
        assert bounds.l1_concentration_bound(1, 0.01, 8) == 1.0

    def test_documented_cell(self):
        assert bounds.l1_concentration_bound(200, 0.3, 4) == pytest.approx(
            14 * math.exp(-9.0), rel=1e-12
        )

    def test_monte_carlo_never_exceeds_bound(self):
        cells = bounds.concentration_campaign(4, (50, 200), (0.2, 0.3), 20_000, seed=1)
        for cell in cells:
            assert cell.ok


class TestGapCampaign:
    def test_zero_trials(self):
        assert bounds.verify_gap_campaign(bounds.CampaignConfig(n_trials=0)) == []

    def test_shared_stream_degenerate(self):
        config = bounds.CampaignConfig(
            n_trials=3, n_states=5, n_actions=2, extra_samples=0, seed=2
        )
        for r in bounds.verify_gap_campaign(config):
            assert r.actual_gap == 0.0
            assert r.eps_m1_pi1 == r.eps_m2_pi2
            assert r.bound_c == pytest.approx(-r.eps_opt, abs=1e-12)
            assert r.constraint_lhs == 0.0

    def test_small_campaign_all_sound(self):
        config = bounds.CampaignConfig(n_trials=40, seed=3)
        results = bounds.verify_gap_campaign(config)
        assert len(results) == 40
        assert all(r.conservative_ok for r in results)
        assert all(r.ceiling_ok for r in results)
        assert all(r.paper_ok for r in results)

    def test_corrupted_kappa_is_caught_by_tightness_probes(self):
        honest = bounds.kappa_tightness_probes(kappa_scale=1.0)
        assert all(p.ok for p in honest)
        corrupted = bounds.kappa_tightness_probes(kappa_scale=0.5)
        assert any(not p.ok for p in corrupted)

    def test_csv_round_trip(self, tmp_path):
        results = bounds.verify_gap_campaign(bounds.CampaignConfig(n_trials=5, seed=0))
        path = tmp_path / "campaign.csv"
        bounds.write_campaign_csv(results, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 6
        assert lines[0].split(",") == bounds.TrialResult.CSV_FIELDS


class TestIntervalCampaign:
    def test_success_fraction_within_slack(self):
        trials = bounds.interval_campaign(60, xi=0.1, target_eps=0.5, seed=5)
        fraction = np.mean([t.ok for t in trials])
        slack = 3 * math.sqrt(0.1 * 0.9 / len(trials))
        assert fraction >= 1 - 0.1 - slack

    def test_k_matches_formula(self):
        trials = bounds.interval_campaign(3, xi=0.1, target_eps=0.5, seed=6)
        for t in trials:
            threshold = 2.0 / t.eps**2 * math.log((2**4 - 2) / t.xi)
            assert t.k == max(0, math.ceil(threshold - t.n_existing))
