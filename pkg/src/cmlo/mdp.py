"""Exact finite-MDP machinery.

Everything in here is deterministic, side-effect free, and exact to
floating-point/reporting precision: empirical-model construction from
generative sample counts, policy evaluation by linear solve, value
iteration with a suboptimality certificate, discounted visitation
distributions, and total-variation based inconsistency measures. These
are the primitives the bound-verification suite leans on, so precision
tolerances are deliberately tight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from cmlo.errors import ConvergenceFailure, MissingSamples

ROW_SUM_TOL = 1e-12
LINEAR_SOLVE_MAX_STATES = 512
ITERATIVE_RESIDUAL = 1e-12
VISITATION_TAIL_MASS = 1e-12


@dataclass(frozen=True)
class TabularMdp:
    """Finite discounted MDP with explicit transition and reward tensors.

    transition has shape (S, A, S) with rows summing to 1; reward has
    shape (S, A) bounded by reward_bound in absolute value.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    reward_bound: float

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError("transition must have shape (S, A, S)")
        if r.shape != t.shape[:2]:
            raise ValueError("reward must have shape (S, A)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.reward_bound < 0:
            raise ValueError("reward_bound must be nonnegative")
        if np.any(t < 0):
            raise ValueError("transition entries must be nonnegative")
        row_sums = t.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > ROW_SUM_TOL:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if np.max(np.abs(r)) > self.reward_bound + 1e-12:
            raise ValueError("|reward| exceeds the declared reward bound")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_json(self) -> str:
        doc = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
            "gamma": self.gamma,
            "reward_bound": self.reward_bound,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        doc = json.loads(text)
        s, a = doc["n_states"], doc["n_actions"]
        return cls(
            transition=np.array(doc["transition"], dtype=np.float64).reshape(s, a, s),
            reward=np.array(doc["reward"], dtype=np.float64).reshape(s, a),
            gamma=float(doc["gamma"]),
            reward_bound=float(doc["reward_bound"]),
        )


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy as an (S, A) row-stochastic matrix."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("policy probs must be 2-D")
        if np.any(p < 0):
            raise ValueError("policy probabilities must be nonnegative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("policy rows must sum to 1 within 1e-12")

    @classmethod
    def greedy(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class EvalContext:
    """Starting-state distribution for returns and visitation."""

    mu: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mu, dtype=np.float64)
        object.__setattr__(self, "mu", m)
        if m.ndim != 1 or np.any(m < 0) or abs(m.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("mu must be a probability vector (sum 1 within 1e-12)")

    @classmethod
    def uniform(cls, n_states: int) -> "EvalContext":
        return cls(np.full(n_states, 1.0 / n_states))


@dataclass(frozen=True)
class ValueTable:
    values: np.ndarray
    residual: float


@dataclass(frozen=True)
class Visitation:
    """Normalized discounted state-action occupancy, (S, A)."""

    density: np.ndarray


def build_empirical_model(
    sample_counts: np.ndarray, reward: np.ndarray, gamma: float, reward_bound: float
) -> TabularMdp:
    """Empirical MDP from per-(s, a) next-state sample counts.

    Transition rows are the observed frequencies; reward and gamma are
    copied unchanged (the model differs from the truth only in its
    transitions). Raises MissingSamples for any pair with zero draws.
    """
    counts = np.asarray(sample_counts, dtype=np.float64)
    totals = counts.sum(axis=2)
    if np.any(totals < 1):
        s, a = np.argwhere(totals < 1)[0]
        raise MissingSamples(int(s), int(a))
    transition = counts / totals[:, :, None]
    return TabularMdp(transition, np.asarray(reward, dtype=np.float64), gamma, reward_bound)


def _policy_kernel(mdp: TabularMdp, policy: TabularPolicy):
    """P_pi (S, S) and r_pi (S,) under the given policy."""
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return p_pi, r_pi


def policy_evaluation(
    mdp: TabularMdp, policy: TabularPolicy, ctx: EvalContext
) -> tuple[ValueTable, float]:
    """Exact solution of the Bellman evaluation equation.

    Direct linear solve for up to LINEAR_SOLVE_MAX_STATES states, else
    value iteration driven to a 1e-12 residual. Returns the table and
    the mu-weighted scalar return.
    """
    p_pi, r_pi = _policy_kernel(mdp, policy)
    n = mdp.n_states
    if n <= LINEAR_SOLVE_MAX_STATES:
        values = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi, r_pi)
        residual = float(np.max(np.abs(r_pi + mdp.gamma * p_pi @ values - values)))
    else:
        values = np.zeros(n)
        residual = np.inf
        for _ in range(2_000_000):
            new = r_pi + mdp.gamma * p_pi @ values
            residual = float(np.max(np.abs(new - values)))
            values = new
            if residual <= ITERATIVE_RESIDUAL:
                break
        else:
            raise ConvergenceFailure("policy evaluation failed to converge")
    return ValueTable(values, residual), float(ctx.mu @ values)


def value_iteration(
    mdp: TabularMdp, tol: float, max_iters: int = 5_000_000
) -> tuple[ValueTable, TabularPolicy, float]:
    """Value iteration to Bellman residual <= tol, with a certificate.

    The greedy policy extracted at the stopping iterate is guaranteed
    to be eps_opt-optimal with eps_opt = 2 * gamma * tol / (1 - gamma).
    Ties in the greedy argmax break toward the lowest action index.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q_r = mdp.reward  # (S, A)
    values = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = q_r + mdp.gamma * mdp.transition @ values
        new = q.max(axis=1)
        residual = float(np.max(np.abs(new - values)))
        values = new
        if residual <= tol:
            break
    else:
        raise ConvergenceFailure(f"value iteration residual {residual:g} > tol after cap")
    q = q_r + mdp.gamma * mdp.transition @ values
    greedy = TabularPolicy.greedy(q.argmax(axis=1), mdp.n_actions)
    certificate = 2.0 * mdp.gamma * tol / (1.0 - mdp.gamma)
    return ValueTable(values, residual), greedy, certificate


def visitation_distribution(
    mdp: TabularMdp, policy: TabularPolicy, ctx: EvalContext
) -> Visitation:
    """Normalized discounted occupancy d(s, a) = (1-gamma) sum_h gamma^h Pr_h(s) pi(a|s).

    The state-distribution recursion is truncated once the discarded
    tail mass gamma^H drops below 1e-12, which keeps the occupancy exact
    to reporting precision.
    """
    p_pi, _ = _policy_kernel(mdp, policy)
    horizon = int(np.ceil(np.log(VISITATION_TAIL_MASS) / np.log(mdp.gamma))) + 1
    state_dist = ctx.mu.copy()
    acc = np.zeros(mdp.n_states)
    weight = 1.0 - mdp.gamma
    for _ in range(horizon):
        acc += weight * state_dist
        weight *= mdp.gamma
        state_dist = state_dist @ p_pi
    return Visitation(acc[:, None] * policy.probs)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Total variation distance, exactly half the L1 distance."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have equal length")
    return 0.5 * float(np.sum(np.abs(p - q)))


def model_inconsistency(
    true_mdp: TabularMdp, model_mdp: TabularMdp, policy: TabularPolicy, ctx: EvalContext
) -> float:
    """Occupancy-weighted TV distance between true and model transitions.

    The occupancy is taken under the *true* dynamics; this is the
    quantity the return-gap bounds are stated in.
    """
    if true_mdp.transition.shape != model_mdp.transition.shape:
        raise ValueError("models must share state/action spaces")
    d = visitation_distribution(true_mdp, policy, ctx).density
    tv = 0.5 * np.abs(true_mdp.transition - model_mdp.transition).sum(axis=2)
    return float(np.sum(d * tv))
