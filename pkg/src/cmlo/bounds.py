"""Bound calculators and numerical verification campaigns.

Implements the performance-difference bound C, its unconditionally sound
conservative variant, the ceiling return-gap bound under model shifts,
the R1/R2 requirement checks, the sample-interval corollary k, and the
L1 concentration bound for empirical distributions; plus the Monte-Carlo
campaigns that check all of them on exactly solvable tabular instances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmlo import envs
from cmlo import mdp as tab
from cmlo.errors import InfeasibleInterval, InvalidLipschitz


def kappa(gamma: float, reward_bound: float) -> float:
    """Discrepancy-to-return conversion constant 2*R*gamma/(1-gamma)^2."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if reward_bound < 0:
        raise ValueError("reward_bound must be nonnegative")
    return 2.0 * reward_bound * gamma / (1.0 - gamma) ** 2


@dataclass(frozen=True)
class BoundInputs:
    """Scalar ingredients of the performance-difference bounds.

    eps_m1_pi1 / eps_m2_pi2 are the occupancy-weighted TV inconsistencies
    of each model under its own policy; ceiling_v1 / ceiling_v2 the model
    ceiling returns; sigma the per-pair TV shift threshold. gamma and
    reward_bound are carried so that requirement checks can recover the
    (1-gamma)L/R style coefficients.
    """

    kappa: float
    lipschitz: float
    eps_opt: float
    eps_m1_pi1: float
    eps_m2_pi2: float
    ceiling_v1: float
    ceiling_v2: float
    sigma: float
    gamma: float
    reward_bound: float

    def __post_init__(self):
        expected = kappa(self.gamma, self.reward_bound)
        if not math.isclose(self.kappa, expected, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("kappa inconsistent with gamma and reward_bound")
        if self.lipschitz < self.reward_bound / (1.0 - self.gamma) - 1e-12:
            raise InvalidLipschitz("lipschitz constant below R/(1-gamma)")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass
class BoundReport:
    """Evaluated bound plus the exactly computed quantities it claims to bound."""

    bound_c: float
    conservative_c: float
    actual_gap: float = math.nan
    constraint_satisfied: bool = True
    constraint_lhs: float = math.nan


def theorem41_bound(inputs: BoundInputs) -> tuple[float, float]:
    """Performance-difference bound C and its conservative variant.

    C uses the signed inconsistency difference; the conservative variant
    flips both kappa terms negative, which makes it sound without the
    equality approximation behind C.
    """
    base = inputs.ceiling_v2 - inputs.ceiling_v1 - inputs.eps_opt
    c = inputs.kappa * (inputs.eps_m1_pi1 - inputs.eps_m2_pi2) + base
    conservative = -inputs.kappa * (inputs.eps_m1_pi1 + inputs.eps_m2_pi2) + base
    return c, conservative


def max_l1_shift(m1: tab.TabularMdp, m2: tab.TabularMdp) -> float:
    """max over (s, a) of ||P_M2(.|s,a) - P_M1(.|s,a)||_1."""
    if m1.transition.shape != m2.transition.shape:
        raise ValueError("models must share state/action spaces")
    return float(np.abs(m2.transition - m1.transition).sum(axis=2).max())


def ceiling_gap_bound(
    m1: tab.TabularMdp, m2: tab.TabularMdp, lipschitz: float, gamma: float
) -> float:
    """Upper bound on |V*_M2(mu) - V*_M1(mu)| via the worst-case L1 shift.

    The max over (s, a) dominates any occupancy-weighted expectation, so
    this is an upper bound on the sup-over-policies form.
    """
    r_bound = max(m1.reward_bound, m2.reward_bound)
    if lipschitz < r_bound / (1.0 - gamma) - 1e-12:
        raise InvalidLipschitz("lipschitz constant below R/(1-gamma)")
    return gamma / (1.0 - gamma) * lipschitz * max_l1_shift(m1, m2)


def theorem43_refined_bound(
    inputs: BoundInputs, m1: tab.TabularMdp, m2: tab.TabularMdp
) -> BoundReport:
    """Refined performance-difference bound under the model-shift constraint.

    constraint_lhs is the exact max-over-(s,a) TV distance between the
    two models (the R2 requirement); the bound replaces the ceiling gap
    with the -(gamma/(1-gamma)) * L * 2*sigma penalty.
    """
    lhs = 0.5 * max_l1_shift(m1, m2)
    shift_penalty = inputs.gamma / (1.0 - inputs.gamma) * inputs.lipschitz * 2.0 * inputs.sigma
    c = (
        inputs.kappa * (inputs.eps_m1_pi1 - inputs.eps_m2_pi2)
        - shift_penalty
        - inputs.eps_opt
    )
    conservative = (
        -inputs.kappa * (inputs.eps_m1_pi1 + inputs.eps_m2_pi2)
        - shift_penalty
        - inputs.eps_opt
    )
    return BoundReport(
        bound_c=c,
        conservative_c=conservative,
        constraint_satisfied=bool(lhs <= inputs.sigma + 1e-12),
        constraint_lhs=lhs,
    )


def check_r1(inputs: BoundInputs, eps_m2_pi2: float | None = None) -> bool:
    """R1 requirement: the new model's L1 bias fits the remaining budget.

    Stated with L1 expectations (= 2x the TV expectations). eps_m2_pi2
    defaults to the value carried by inputs but can be overridden to test
    a candidate model bias.
    """
    if eps_m2_pi2 is None:
        eps_m2_pi2 = inputs.eps_m2_pi2
    rhs = (
        2.0 * inputs.eps_m1_pi1
        - (1.0 - inputs.gamma) * inputs.lipschitz / inputs.reward_bound * 2.0 * inputs.sigma
        - 2.0 / inputs.kappa * inputs.eps_opt
    )
    return bool(2.0 * eps_m2_pi2 <= rhs)


def _log_pow2_minus_2(vol_s: int) -> float:
    """log(2**vol_s - 2), stable for large vol_s."""
    if vol_s < 2:
        raise ValueError("vol_s must be at least 2")
    return vol_s * math.log(2.0) + math.log1p(-(2.0 ** (1 - vol_s)))


@dataclass(frozen=True)
class IntervalQuery:
    """Inputs of the sample-interval formula.

    delta_m1 is the current one-step L1 model error; vol_s the number of
    distinct next-state outcomes (the alphabet size in the concentration
    bound); n_existing the samples per pair already consumed.
    """

    delta_m1: float
    sigma: float
    eps_opt: float
    lipschitz: float
    reward_bound: float
    gamma: float
    vol_s: int
    xi: float
    n_existing: int

    def derived_epsilon(self) -> float:
        return (
            self.delta_m1
            - (1.0 - self.gamma) * self.lipschitz / self.reward_bound * 2.0 * self.sigma
            - (1.0 - self.gamma) ** 2 / (self.reward_bound * self.gamma) * self.eps_opt
        )


def corollary_interval_k(query: IntervalQuery) -> int:
    """Additional samples per pair needed for a non-negative bound.

    k = max(0, ceil((2/eps^2) * ln((2^vol_s - 2)/xi) - N)) with natural
    logarithms. Raises InfeasibleInterval when the derived eps <= 0 (the
    current model bias is already consumed by the shift/eps_opt budget).
    """
    if not 0.0 < query.xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    if query.vol_s < 2:
        raise ValueError("vol_s must be at least 2")
    eps = query.derived_epsilon()
    if eps <= 0:
        raise InfeasibleInterval(f"derived epsilon {eps:g} <= 0")
    raw = 2.0 / eps**2 * (_log_pow2_minus_2(query.vol_s) - math.log(query.xi))
    return max(0, math.ceil(raw - query.n_existing))


def l1_concentration_bound(m: int, eps: float, alphabet: int) -> float:
    """(2^alphabet - 2) * exp(-m * eps^2 / 2), clipped to [0, 1]."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if alphabet < 2:
        raise ValueError("alphabet must be at least 2")
    log_bound = _log_pow2_minus_2(alphabet) - m * eps**2 / 2.0
    if log_bound >= 0.0:
        return 1.0
    return math.exp(log_bound)


# ---------------------------------------------------------------------------
# Verification campaigns
# ---------------------------------------------------------------------------

# Slack for assertions that hold in exact arithmetic.
EXACT_TOL = 1e-9
# A trial qualifies for the unconditioned bound_c check only when the
# equality-approximation residual is negligible relative to kappa*eps.
PAPER_RESIDUAL_REL = 1e-6


@dataclass(frozen=True)
class CampaignConfig:
    """Random-instance family for the gap-verification campaign."""

    n_trials: int
    n_states: int = 8
    n_actions: int = 3
    gamma: float = 0.9
    n_samples: int = 40
    extra_samples: int = 40
    sparsity: float = 1.0
    seed: int = 0
    vi_tol: float = 1e-12
    # fault-injection knob for the verification harness: scales kappa so a
    # corrupted constant is caught by the soundness checks (1.0 = honest).
    kappa_scale: float = 1.0


@dataclass
class TrialResult:
    trial: int
    seed: int
    n_samples: int
    extra_samples: int
    kappa: float
    eps_opt: float
    eps_m1_pi1: float
    eps_m2_pi2: float
    v1_model: float
    v2_model: float
    actual_gap: float
    bound_c: float
    conservative_c: float
    sigma: float
    constraint_lhs: float
    ceiling_bound: float
    residual_m1: float
    residual_allow: float
    conservative_ok: bool
    ceiling_ok: bool
    paper_qualified: bool
    paper_ok: bool

    CSV_FIELDS = (
        "trial seed n_samples extra_samples kappa eps_opt eps_m1_pi1 eps_m2_pi2 "
        "v1_model v2_model actual_gap bound_c conservative_c sigma constraint_lhs "
        "ceiling_bound residual_m1 residual_allow conservative_ok ceiling_ok "
        "paper_qualified paper_ok"
    ).split()


def run_gap_trial(config: CampaignConfig, trial: int, seed: int) -> TrialResult:
    """One exactly-evaluated trial of the gap campaign.

    Builds a true MDP, draws empirical models from N and N+k generative
    samples on a shared stream, fetches certified policies by value
    iteration, and computes every bound term by exact evaluation.
    """
    rng = np.random.default_rng(seed)
    true_mdp = envs.random_mdp(
        config.n_states, config.n_actions, seed=rng, sparsity=config.sparsity
    )
    sampler = envs.GenerativeSampler(true_mdp, rng)
    counts = sampler.draw_all(config.n_samples)
    m1 = tab.build_empirical_model(
        counts, true_mdp.reward, true_mdp.gamma, true_mdp.reward_bound
    )
    if config.extra_samples > 0:
        counts = counts + sampler.draw_all(config.extra_samples)
    m2 = tab.build_empirical_model(
        counts, true_mdp.reward, true_mdp.gamma, true_mdp.reward_bound
    )

    ctx = tab.EvalContext.uniform(config.n_states)
    _, pi1, cert1 = tab.value_iteration(m1, config.vi_tol)
    _, pi2, cert2 = tab.value_iteration(m2, config.vi_tol)
    eps_opt = max(cert1, cert2)

    # model ceilings via exact evaluation of the greedy policies
    _, v1_model = tab.policy_evaluation(m1, pi1, ctx)
    _, v2_model = tab.policy_evaluation(m2, pi2, ctx)
    # true returns of both policies
    _, v1_true = tab.policy_evaluation(true_mdp, pi1, ctx)
    _, v2_true = tab.policy_evaluation(true_mdp, pi2, ctx)
    actual_gap = v2_true - v1_true

    eps1 = tab.model_inconsistency(true_mdp, m1, pi1, ctx)
    eps2 = tab.model_inconsistency(true_mdp, m2, pi2, ctx)
    kap = config.kappa_scale * kappa(true_mdp.gamma, true_mdp.reward_bound)

    lipschitz = true_mdp.reward_bound / (1.0 - true_mdp.gamma)
    base = v2_model - v1_model - eps_opt
    bound_c = kap * (eps1 - eps2) + base
    conservative_c = -kap * (eps1 + eps2) + base

    constraint_lhs = 0.5 * max_l1_shift(m1, m2)
    sigma = constraint_lhs  # threshold chosen exactly at the realized shift
    ceiling_bound = gamma_over(true_mdp.gamma) * lipschitz * max_l1_shift(m1, m2)

    residual_m1 = abs((v1_model - v1_true) - kap * eps1)
    residual_allow = PAPER_RESIDUAL_REL * kap * eps1
    paper_qualified = residual_m1 <= residual_allow

    return TrialResult(
        trial=trial,
        seed=seed,
        n_samples=config.n_samples,
        extra_samples=config.extra_samples,
        kappa=kap,
        eps_opt=eps_opt,
        eps_m1_pi1=eps1,
        eps_m2_pi2=eps2,
        v1_model=v1_model,
        v2_model=v2_model,
        actual_gap=actual_gap,
        bound_c=bound_c,
        conservative_c=conservative_c,
        sigma=sigma,
        constraint_lhs=constraint_lhs,
        ceiling_bound=ceiling_bound,
        residual_m1=residual_m1,
        residual_allow=residual_allow,
        conservative_ok=bool(actual_gap >= conservative_c - EXACT_TOL),
        ceiling_ok=bool(abs(v2_model - v1_model) <= ceiling_bound + EXACT_TOL),
        paper_qualified=paper_qualified,
        paper_ok=bool(
            (not paper_qualified)
            or actual_gap >= bound_c - residual_allow - EXACT_TOL
        ),
    )


def gamma_over(gamma: float) -> float:
    return gamma / (1.0 - gamma)


def verify_gap_campaign(config: CampaignConfig) -> list[TrialResult]:
    """Run the full campaign; one exactly-verified TrialResult per trial."""
    seeds = np.random.SeedSequence(config.seed).generate_state(max(config.n_trials, 1))
    return [
        run_gap_trial(config, trial, int(seeds[trial]))
        for trial in range(config.n_trials)
    ]


def write_campaign_csv(results: list[TrialResult], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TrialResult.CSV_FIELDS)
        for r in results:
            writer.writerow([getattr(r, f) for f in TrialResult.CSV_FIELDS])


# ---------------------------------------------------------------------------
# Concentration and sample-interval campaigns
# ---------------------------------------------------------------------------


@dataclass
class KappaProbe:
    p: float
    gap: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.gap <= self.bound + EXACT_TOL


def kappa_tightness_probes(
    gamma: float = 0.9,
    reward_bound: float = 1.0,
    kappa_scale: float = 1.0,
    p_values: tuple[float, ...] = (0.01, 0.02, 0.05),
) -> list[KappaProbe]:
    """Near-tight instances of the return/model-return relation.

    Two states: the truth keeps the chain at s0 (reward +R); the model
    leaks to an absorbing -R state with probability p. The exact return
    gap approaches kappa * p as p -> 0, so any deflated kappa (e.g. a
    corrupted constant) fails the |gap| <= kappa * eps check here even
    though it may survive slack random instances.
    """
    probes = []
    kap = kappa_scale * kappa(gamma, reward_bound)
    for p in p_values:
        transition = np.zeros((2, 1, 2))
        transition[0, 0, 0] = 1.0
        transition[1, 0, 1] = 1.0
        reward = np.array([[reward_bound], [-reward_bound]])
        true_mdp = tab.TabularMdp(transition, reward, gamma, reward_bound)
        leaky = transition.copy()
        leaky[0, 0] = [1.0 - p, p]
        model = tab.TabularMdp(leaky, reward, gamma, reward_bound)
        policy = tab.TabularPolicy(np.ones((2, 1)))
        ctx = tab.EvalContext(np.array([1.0, 0.0]))
        _, v_true = tab.policy_evaluation(true_mdp, policy, ctx)
        _, v_model = tab.policy_evaluation(model, policy, ctx)
        eps = tab.model_inconsistency(true_mdp, model, policy, ctx)
        probes.append(KappaProbe(p=p, gap=abs(v_true - v_model), bound=kap * eps))
    return probes


@dataclass
class ConcentrationCell:
    m: int
    eps: float
    alphabet: int
    n_draws: int
    violation_freq: float
    analytic_bound: float
    stderr: float

    @property
    def ok(self) -> bool:
        return self.violation_freq <= self.analytic_bound + 3.0 * self.stderr


def concentration_campaign(
    alphabet: int,
    m_values: tuple[int, ...],
    eps_values: tuple[float, ...],
    n_draws: int,
    seed: int = 0,
) -> list[ConcentrationCell]:
    """Empirical L1-deviation violation frequencies vs the analytic bound.

    Uses the uniform distribution on the alphabet (the worst case for
    concentration) and one multinomial block per cell.
    """
    rng = np.random.default_rng(seed)
    p = np.full(alphabet, 1.0 / alphabet)
    cells = []
    for m in m_values:
        counts = rng.multinomial(m, p, size=n_draws)
        l1 = np.abs(counts / m - p).sum(axis=1)
        for eps in eps_values:
            freq = float(np.mean(l1 >= eps))
            stderr = math.sqrt(freq * (1.0 - freq) / n_draws)
            cells.append(
                ConcentrationCell(
                    m=m,
                    eps=eps,
                    alphabet=alphabet,
                    n_draws=n_draws,
                    violation_freq=freq,
                    analytic_bound=l1_concentration_bound(m, eps, alphabet),
                    stderr=stderr,
                )
            )
    return cells


@dataclass
class IntervalTrial:
    trial: int
    seed: int
    eps: float
    xi: float
    n_existing: int
    k: int
    max_l1_error: float
    ok: bool


def interval_campaign(
    n_trials: int,
    n_states: int = 4,
    n_actions: int = 3,
    gamma: float = 0.9,
    target_eps: float = 0.5,
    xi: float = 0.1,
    n_existing: int = 10,
    sigma: float = 0.01,
    eps_opt: float = 1e-3,
    seed: int = 0,
) -> list[IntervalTrial]:
    """Draw N+k samples per pair and check the per-pair L1 guarantee.

    delta_m1 is synthesized so the derived eps equals target_eps; the
    success indicator asks for max-over-(s,a) L1 error <= eps, i.e. the
    strongest per-trial reading of the guarantee.
    """
    seeds = np.random.SeedSequence(seed).generate_state(max(n_trials, 1))
    reward_bound = 1.0
    lipschitz = reward_bound / (1.0 - gamma)
    budget = (1.0 - gamma) * lipschitz / reward_bound * 2.0 * sigma + (
        1.0 - gamma
    ) ** 2 / (reward_bound * gamma) * eps_opt
    trials = []
    for trial in range(n_trials):
        rng = np.random.default_rng(int(seeds[trial]))
        true_mdp = envs.random_mdp(n_states, n_actions, seed=rng, sparsity=1.0)
        query = IntervalQuery(
            delta_m1=target_eps + budget,
            sigma=sigma,
            eps_opt=eps_opt,
            lipschitz=lipschitz,
            reward_bound=reward_bound,
            gamma=gamma,
            vol_s=n_states,
            xi=xi,
            n_existing=n_existing,
        )
        k = corollary_interval_k(query)
        sampler = envs.GenerativeSampler(true_mdp, rng)
        counts = sampler.draw_all(n_existing + k)
        empirical = counts / counts.sum(axis=2, keepdims=True)
        max_l1 = float(np.abs(empirical - true_mdp.transition).sum(axis=2).max())
        trials.append(
            IntervalTrial(
                trial=trial,
                seed=int(seeds[trial]),
                eps=query.derived_epsilon(),
                xi=xi,
                n_existing=n_existing,
                k=k,
                max_l1_error=max_l1,
                ok=bool(max_l1 <= target_eps),
            )
        )
    return trials
