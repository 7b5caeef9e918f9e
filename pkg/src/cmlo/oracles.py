"""Policy-optimization oracles.

Three realizations of the eps_opt oracle contract: exact value iteration
on tabular models (with a certified suboptimality bound), cross-entropy
method MPC on dynamics ensembles, and iLQR on linearizable models. The
planners carry no certificate and are recorded as uncertified.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cmlo import mdp as tab
from cmlo.errors import InvalidCost, PlannerFailure

VALUE_ITERATION = "value_iteration"
CEM_MPC = "cem_mpc"
ILQR = "ilqr"


@dataclass(frozen=True)
class OracleSpec:
    """Oracle selection plus planner parameters.

    tolerance is the value-iteration Bellman residual target; horizon,
    population, elites, iterations parameterize CEM; max_iterations caps
    iLQR sweeps.
    """

    kind: str
    tolerance: float = 1e-10
    horizon: int = 15
    population: int = 200
    elites: int = 20
    iterations: int = 5
    max_iterations: int = 100
    seed: int = 0
    warm_start: bool = True
    replan_stride: int = 1  # env steps executed from each receding-horizon plan

    def __post_init__(self):
        if self.kind not in (VALUE_ITERATION, CEM_MPC, ILQR):
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.elites > self.population:
            raise ValueError("elites cannot exceed population")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class OracleResult:
    policy: object
    eps_opt: float | None  # None for uncertified planners
    diagnostics: dict = field(default_factory=dict)


class VIPolicy:
    """Greedy tabular policy from value iteration, with its certificate."""

    def __init__(self, policy: tab.TabularPolicy, certificate: float):
        self.policy = policy
        self.certificate = certificate
        self._greedy = policy.probs.argmax(axis=1)

    def act(self, obs, rng=None):
        state = int(np.argmax(obs)) if np.ndim(obs) > 0 else int(obs)
        return int(self._greedy[state])


class CemMpcPolicy:
    """Receding-horizon CEM planner over an ensemble's mean dynamics.

    act() replans from the queried state each call; a warm start shifts
    the previous solution by one step. All emitted actions are clipped
    to the environment bounds. Deterministic given the construction seed
    and call sequence.
    """

    def __init__(self, ensemble, env, spec: OracleSpec):
        self.ensemble = ensemble
        self.env = env
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self._prev_mean = None
        self._cached_plan = None
        self._cursor = 0
        low, high = env.spec.action_low, env.spec.action_high
        self._mid = 0.5 * (low + high)
        self._span = 0.5 * (high - low)
        self._act_dim = env.spec.action_dim

    def reset(self):
        """Drop the cached plan and warm start (call on episode boundaries)."""
        self._prev_mean = None
        self._cached_plan = None
        self._cursor = 0

    def act(self, obs, rng=None):
        if self._cached_plan is not None and self._cursor < self.spec.replan_stride:
            action = self._cached_plan[self._cursor].copy()
            self._cursor += 1
            return action
        if self.spec.warm_start and self._cached_plan is not None:
            # align the previous solution with the actions already executed
            shifted = np.roll(self._cached_plan, -self._cursor, axis=0)
            shifted[-self._cursor :] = self._mid
            self._prev_mean = shifted
        plan = self.plan_batch(np.asarray(obs, dtype=np.float64)[None, :])[0]
        self._cached_plan = plan
        self._cursor = 1
        return plan[0].copy()

    def act_batch(self, obs_batch):
        plans = self.plan_batch(np.asarray(obs_batch, dtype=np.float64))
        return plans[:, 0, :].copy()

    def plan_batch(self, obs_batch):
        """CEM plans for a batch of start states; returns (B, H, A) means."""
        spec = self.spec
        b = obs_batch.shape[0]
        h, a, pop = spec.horizon, self._act_dim, spec.population
        low = self._mid - self._span
        high = self._mid + self._span

        mean = np.full((b, h, a), self._mid, dtype=np.float64)
        if b == 1 and spec.warm_start and self._prev_mean is not None:
            mean[0] = self._prev_mean
        std = np.full((b, h, a), self._span, dtype=np.float64)

        starts = np.repeat(obs_batch, pop, axis=0)
        best_actions = None
        best_scores = np.full(b, -np.inf)
        self.last_iteration_best = []
        for it in range(spec.iterations):
            noise = self.rng.standard_normal(size=(b, pop, h, a))
            cands = np.clip(mean[:, None] + std[:, None] * noise, low, high)
            if it > 0:
                cands[:, 0] = best_actions  # running best stays in the population
            scores = self._score(starts, cands.reshape(b * pop, h, a)).reshape(b, pop)
            if not np.any(np.isfinite(scores)):
                raise PlannerFailure("no finite candidate plans")
            elite_idx = np.argpartition(-scores, spec.elites - 1, axis=1)[
                :, : spec.elites
            ]
            rows = np.arange(b)[:, None]
            elites = cands[rows, elite_idx]  # (B, E, H, A)
            mean = elites.mean(axis=1)
            std = np.maximum(elites.std(axis=1), 1e-3 * self._span)
            it_best = scores.max(axis=1)
            best_idx = scores.argmax(axis=1)
            if best_actions is None:
                best_actions = cands[rows[:, 0], best_idx].copy()
                best_scores = it_best
            else:
                improve = it_best > best_scores
                best_actions[improve] = cands[np.flatnonzero(improve), best_idx[improve]]
                best_scores = np.maximum(best_scores, it_best)
            self.last_iteration_best.append(it_best.copy())
        return np.clip(mean, low, high)

    def _score(self, starts, actions):
        """Sum of model rewards along ensemble-mean rollouts, masked at termination."""
        traj = self.ensemble.rollout(starts, actions)
        obs_in = np.concatenate([starts[:, None, :], traj[:, :-1, :]], axis=1)
        rewards = self.env.reward_from_obs(obs_in, actions)
        done = self.env.done_from_obs(traj)
        if np.any(done):
            dead_before = np.concatenate(
                [np.zeros((done.shape[0], 1), dtype=bool), done[:, :-1]], axis=1
            )
            alive = np.cumprod(~dead_before, axis=1)
            rewards = rewards * alive
        return rewards.sum(axis=1)


def cem_plan(ensemble, state, spec: OracleSpec, env, rng_seed: int | None = None):
    """One-off CEM plan for a single state; returns the (H, A) sequence."""
    plan_spec = spec if rng_seed is None else _reseeded(spec, rng_seed)
    policy = CemMpcPolicy(ensemble, env, plan_spec)
    return policy.plan_batch(np.asarray(state, dtype=np.float64)[None, :])[0]


def _reseeded(spec: OracleSpec, seed: int) -> OracleSpec:
    kwargs = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
    kwargs["seed"] = seed
    return OracleSpec(**kwargs)


# ---------------------------------------------------------------------------
# iLQR on linearizable models
# ---------------------------------------------------------------------------


class LinearModel:
    """Exact linear dynamics s' = A s + B a (Jacobians are constants)."""

    def __init__(self, a_mat, b_mat):
        self.a_mat = np.asarray(a_mat, dtype=np.float64)
        self.b_mat = np.asarray(b_mat, dtype=np.float64)

    def f(self, s, a):
        return self.a_mat @ s + self.b_mat @ a

    def jacobians(self, s, a):
        return self.a_mat, self.b_mat


class FiniteDifferenceModel:
    """Jacobians by central differences around (s, a) for any step function."""

    def __init__(self, step_fn, eps: float = 1e-6):
        self.step_fn = step_fn
        self.eps = eps

    def f(self, s, a):
        return np.asarray(self.step_fn(s, a), dtype=np.float64)

    def jacobians(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        n, m = s.size, a.size
        a_mat = np.empty((n, n))
        b_mat = np.empty((n, m))
        for i in range(n):
            d = np.zeros(n)
            d[i] = self.eps
            a_mat[:, i] = (self.f(s + d, a) - self.f(s - d, a)) / (2 * self.eps)
        for j in range(m):
            d = np.zeros(m)
            d[j] = self.eps
            b_mat[:, j] = (self.f(s, a + d) - self.f(s, a - d)) / (2 * self.eps)
        return a_mat, b_mat


class EnsembleLinearization(FiniteDifferenceModel):
    """Finite-difference linearization of an ensemble's mean prediction."""

    def __init__(self, ensemble, eps: float = 1e-5):
        def step(s, a):
            mean, _, _ = ensemble.predict(s, a)
            return mean

        super().__init__(step, eps)


def pendulum_linearization(constants=None):
    """Analytic Jacobians of the semi-implicit pendulum update (no clipping)."""
    from cmlo import envs

    c = dict(envs.ENV_CONSTANTS["pendulum"])
    if constants:
        c.update(constants)
    g, length, m, dt = c["gravity"], c["length"], c["mass"], c["dt"]

    class _Pend:
        def f(self, s, a):
            theta, theta_dot = s
            accel = g / length * np.sin(theta) + a[0] / (m * length**2)
            new_dot = theta_dot + dt * accel
            return np.array([theta + dt * new_dot, new_dot])

        def jacobians(self, s, a):
            theta = s[0]
            dad = dt * g / length * np.cos(theta)
            a_mat = np.array([[1.0 + dt * dad, dt], [dad, 1.0]])
            b_mat = np.array([[dt**2 / (m * length**2)], [dt / (m * length**2)]])
            return a_mat, b_mat

    return _Pend()


@dataclass(frozen=True)
class QuadraticCost:
    """Stage cost 0.5 (x-g)'Q(x-g) + 0.5 a'R a, terminal 0.5 (x-g)'Qf(x-g)."""

    q: np.ndarray
    r: np.ndarray
    x_goal: np.ndarray
    q_final: np.ndarray | None = None

    def qf(self):
        return self.q if self.q_final is None else self.q_final

    def stage(self, x, a):
        dx = x - self.x_goal
        return 0.5 * (dx @ self.q @ dx + a @ self.r @ a)

    def terminal(self, x):
        dx = x - self.x_goal
        return 0.5 * dx @ self.qf() @ dx


def _trajectory_cost(model, cost, x0, us):
    x = np.asarray(x0, dtype=np.float64)
    total = 0.0
    xs = [x]
    for u in us:
        total += cost.stage(x, u)
        x = model.f(x, u)
        xs.append(x)
    total += cost.terminal(x)
    return total, xs


def ilqr_plan(model, x0, spec: OracleSpec, cost: QuadraticCost):
    """iLQR: backward Riccati recursion for time-varying gains, forward
    rollout with backtracking line search.

    Returns (open-loop action sequence (H, m), feedback gains list of
    (m, n)). Raises InvalidCost when the control cost is not positive
    definite and PlannerFailure when the sweep cap is exhausted without
    convergence.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    m = cost.r.shape[0]
    try:
        np.linalg.cholesky(cost.r)
    except np.linalg.LinAlgError:
        raise InvalidCost("control cost matrix must be positive definite")

    horizon = spec.horizon
    us = np.zeros((horizon, m))
    total, xs = _trajectory_cost(model, cost, x0, us)
    gains = [np.zeros((m, n)) for _ in range(horizon)]
    converged = False
    for _ in range(spec.max_iterations):
        # backward pass on the quadratic expansion along (xs, us)
        vx = cost.qf() @ (xs[-1] - cost.x_goal)
        vxx = cost.qf().copy()
        ks = np.empty((horizon, m))
        gains = []
        for t in range(horizon - 1, -1, -1):
            a_mat, b_mat = model.jacobians(xs[t], us[t])
            qx = cost.q @ (xs[t] - cost.x_goal) + a_mat.T @ vx
            qu = cost.r @ us[t] + b_mat.T @ vx
            qxx = cost.q + a_mat.T @ vxx @ a_mat
            quu = cost.r + b_mat.T @ vxx @ b_mat
            qux = b_mat.T @ vxx @ a_mat
            try:
                quu_inv = np.linalg.inv(quu)
            except np.linalg.LinAlgError:
                raise PlannerFailure("singular Quu in backward pass")
            k_open = -quu_inv @ qu
            k_fb = -quu_inv @ qux
            ks[t] = k_open
            gains.append(k_fb)
            vx = qx + k_fb.T @ quu @ k_open + k_fb.T @ qu + qux.T @ k_open
            vxx = qxx + k_fb.T @ quu @ k_fb + k_fb.T @ qux + qux.T @ k_fb
            vxx = 0.5 * (vxx + vxx.T)
        gains.reverse()

        improved = False
        for alpha in (1.0, 0.5, 0.25, 0.1, 0.03, 0.01):
            new_us = np.empty_like(us)
            x = x0.copy()
            for t in range(horizon):
                new_us[t] = us[t] + alpha * ks[t] + gains[t] @ (x - xs[t])
                x = model.f(x, new_us[t])
            new_total, new_xs = _trajectory_cost(model, cost, x0, new_us)
            if new_total < total - 1e-14:
                improvement = total - new_total
                us, xs, total = new_us, new_xs, new_total
                improved = True
                if improvement < 1e-10 * max(1.0, abs(total)):
                    converged = True
                break
        if not improved:
            converged = True  # local minimum: no step improves the cost
        if converged:
            break
    else:
        raise PlannerFailure("iLQR iteration cap exhausted without convergence")
    return us, gains


class IlqrPolicy:
    """Receding-horizon iLQR wrapper for linearizable models."""

    def __init__(self, model, spec: OracleSpec, cost: QuadraticCost):
        self.model = model
        self.spec = spec
        self.cost = cost

    def act(self, obs, rng=None):
        us, _ = ilqr_plan(self.model, np.asarray(obs, dtype=np.float64), self.spec, self.cost)
        return us[0].copy()


def optimize(model, spec: OracleSpec, *, ctx=None, env=None, cost=None) -> OracleResult:
    """Dispatch to the oracle named by the spec.

    Value iteration takes a TabularMdp and certifies its eps_opt; the
    planners take an ensemble (CEM) or linearizable model (iLQR) and are
    returned uncertified.
    """
    if spec.kind == VALUE_ITERATION:
        if not isinstance(model, tab.TabularMdp):
            raise ValueError("value_iteration oracle requires a TabularMdp")
        table, greedy, certificate = tab.value_iteration(model, spec.tolerance)
        ctx = ctx or tab.EvalContext.uniform(model.n_states)
        _, v_greedy = tab.policy_evaluation(model, greedy, ctx)
        return OracleResult(
            policy=VIPolicy(greedy, certificate),
            eps_opt=certificate,
            diagnostics={
                "v_star_table": float(ctx.mu @ table.values),
                "v_star_greedy": v_greedy,
                "residual": table.residual,
            },
        )
    if spec.kind == CEM_MPC:
        if env is None or not hasattr(model, "rollout"):
            raise ValueError("cem_mpc oracle requires an ensemble model and an env")
        return OracleResult(
            policy=CemMpcPolicy(model, env, spec),
            eps_opt=None,
            diagnostics={"certified": False},
        )
    if not hasattr(model, "jacobians"):
        raise ValueError("ilqr oracle requires a linearizable model")
    if cost is None:
        raise ValueError("ilqr oracle requires a QuadraticCost")
    return OracleResult(
        policy=IlqrPolicy(model, spec, cost),
        eps_opt=None,
        diagnostics={"certified": False},
    )
