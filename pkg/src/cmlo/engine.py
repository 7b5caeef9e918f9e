"""The event-triggered training loop, end to end.

Collect transitions with the current policy, estimate model shift every
F steps, retrain the dynamics model when the trigger fires (or on the
fixed-interval schedule), generate fresh-model rollouts into the model
buffer, and refresh the policy through the oracle. Every random draw
flows from the run seed; a (config, seed) pair reproduces the full
RunRecord bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from cmlo import dynamics, envs, monitor, oracles
from cmlo import mdp as tab
from cmlo.errors import EmptySlice

SCHEMA_VERSION = 1


class RingBuffer:
    """FIFO transition store over preallocated arrays."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.empty((capacity, obs_dim))
        self.act = np.empty((capacity, act_dim))
        self.next_obs = np.empty((capacity, obs_dim))
        self.reward = np.empty(capacity)
        self.version = np.empty(capacity, dtype=np.int64)
        self._n = 0
        self._ptr = 0

    def __len__(self):
        return self._n

    def append(self, obs, act, next_obs, reward, version=0):
        i = self._ptr
        self.obs[i] = obs
        self.act[i] = act
        self.next_obs[i] = next_obs
        self.reward[i] = reward
        self.version[i] = version
        self._ptr = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def _order(self):
        if self._n < self.capacity:
            return np.arange(self._n)
        return np.roll(np.arange(self.capacity), -self._ptr)

    def arrays(self):
        idx = self._order()
        return self.obs[idx], self.act[idx], self.next_obs[idx], self.reward[idx]

    def states(self):
        return self.obs[self._order()]

    def versions(self):
        return self.version[self._order()]


class FreshSlice:
    """Transitions collected since the last model training."""

    def __init__(self):
        self.rows = []

    def __len__(self):
        return len(self.rows)

    def append(self, obs, act, next_obs, reward):
        self.rows.append((np.array(obs), np.array(act), np.array(next_obs), reward))

    def arrays(self):
        if not self.rows:
            raise EmptySlice("fresh slice is empty")
        obs = np.stack([r[0] for r in self.rows])
        act = np.stack([r[1] for r in self.rows])
        nxt = np.stack([r[2] for r in self.rows])
        return obs, act, nxt

    def clear(self):
        self.rows = []


@dataclass
class ReplayBuffers:
    env_buffer: RingBuffer
    model_buffer: RingBuffer
    fresh: FreshSlice


@dataclass(frozen=True)
class RolloutConfig:
    """Fresh-model rollout settings.

    length may ramp linearly across training events when a schedule
    (start_len, end_len, start_event, end_event) is given.
    """

    length: int = 1
    per_training: int = 64
    member_sampling: bool = False
    schedule: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("rollout length must be at least 1")

    def length_for(self, event_idx: int) -> int:
        if self.schedule is None:
            return self.length
        lo, hi, e0, e1 = self.schedule
        if e1 <= e0:
            return hi
        frac = min(max((event_idx - e0) / (e1 - e0), 0.0), 1.0)
        return int(round(lo + frac * (hi - lo)))


class EnsembleDynamics:
    """Engine-facing wrapper: a retrainable Gaussian ensemble."""

    def __init__(self, config: dynamics.TrainConfig):
        self.config = config
        self.ensemble = None
        self.version = 0

    @property
    def current(self):
        return self.ensemble

    def train(self, buffer_arrays) -> dict:
        obs, act, nxt, _ = buffer_arrays
        self.version += 1
        seed = int(
            np.random.SeedSequence([self.config.seed, self.version]).generate_state(1)[0]
        )
        cfg = replace(self.config, seed=seed, member_seeds=None)
        self.ensemble = dynamics.train_ensemble((obs, act, nxt), cfg, version=self.version)
        return {
            "final_losses": self.ensemble.diagnostics["final_losses"],
            "monotone": self.ensemble.diagnostics["monotone"],
        }

    def one_step_error(self, data):
        if self.ensemble is None:
            raise EmptySlice("no model trained yet")
        return self.ensemble.one_step_error(data)

    def predict_mean(self, obs, act):
        mean, _, _ = self.ensemble.predict(obs, act)
        return mean


class TabularDynamics:
    """Empirical tabular model rebuilt from transition counts.

    Observations are one-hot state vectors; unvisited state-action pairs
    fall back to a uniform row so the empirical model is always a valid
    MDP. The reward table and gamma come from the environment spec.
    """

    def __init__(self, mdp: tab.TabularMdp):
        self.reward = mdp.reward
        self.gamma = mdp.gamma
        self.reward_bound = mdp.reward_bound
        self.n_states = mdp.n_states
        self.n_actions = mdp.n_actions
        self.model = None
        self.version = 0

    @property
    def current(self):
        return self.model

    def train(self, buffer_arrays) -> dict:
        obs, act, nxt, _ = buffer_arrays
        s = obs.argmax(axis=1)
        a = act[:, 0].astype(int)
        s2 = nxt.argmax(axis=1)
        counts = np.zeros((self.n_states, self.n_actions, self.n_states))
        np.add.at(counts, (s, a, s2), 1.0)
        unvisited = counts.sum(axis=2) == 0
        transition = np.where(
            unvisited[:, :, None],
            1.0 / self.n_states,
            counts / np.maximum(counts.sum(axis=2, keepdims=True), 1.0),
        )
        self.version += 1
        self.model = tab.TabularMdp(transition, self.reward, self.gamma, self.reward_bound)
        return {"unvisited_pairs": int(unvisited.sum())}

    def one_step_error(self, data):
        """Mean L2 distance between one-hot outcomes and model rows."""
        if self.model is None:
            raise EmptySlice("no model trained yet")
        if isinstance(data, tuple):
            obs, act, nxt = data
        else:
            obs, act, nxt = dynamics.batch_arrays(data)
        if len(obs) == 0:
            raise EmptySlice("no transitions provided")
        s = obs.argmax(axis=1)
        a = act[:, 0].astype(int)
        rows = self.model.transition[s, a]
        return float(np.linalg.norm(nxt - rows, axis=1).mean())

    def sample_next(self, state: int, action: int, rng) -> int:
        return int(rng.choice(self.n_states, p=self.model.transition[state, action]))


def rollout_model(model, policy, start_obs, length, rng, env=None, member_sampling=False):
    """h-step rollouts through the (fresh) model; returns transition arrays.

    Continuous models step through the ensemble mean (or a per-step
    sampled member when member_sampling is set); rewards come from the
    environment spec. Deterministic given rng state.
    """
    start_obs = np.atleast_2d(np.asarray(start_obs, dtype=np.float64))
    if start_obs.shape[0] == 0:
        raise EmptySlice("no start states")
    obs_rows, act_rows, nxt_rows, rew_rows = [], [], [], []
    obs = start_obs.copy()
    for _ in range(length):
        if hasattr(policy, "act_batch"):
            acts = np.atleast_2d(policy.act_batch(obs))
        else:
            acts = np.stack([np.atleast_1d(policy.act(o, rng)) for o in obs]).astype(
                np.float64
            )
        mean, member_means, _ = model.ensemble.predict(obs, acts)
        if member_sampling:
            pick = rng.integers(model.ensemble.size, size=obs.shape[0])
            nxt = member_means[pick, np.arange(obs.shape[0]), :]
        else:
            nxt = mean
        rewards = (
            env.reward_from_obs(obs, acts)
            if env is not None
            else np.zeros(obs.shape[0])
        )
        obs_rows.append(obs.copy())
        act_rows.append(acts.copy())
        nxt_rows.append(nxt.copy())
        rew_rows.append(np.atleast_1d(rewards))
        obs = nxt
    return (
        np.concatenate(obs_rows),
        np.concatenate(act_rows),
        np.concatenate(nxt_rows),
        np.concatenate(rew_rows),
    )


@dataclass
class RunRecord:
    """Everything a run produces, persistable as manifest + CSV traces."""

    mode: str
    seed: int
    budget: int
    steps: int = 0
    episode_returns: list = field(default_factory=list)  # (episode, end_step, steps, ret)
    trigger_events: list = field(default_factory=list)  # (event, step, gap)
    trigger_trace: list = field(default_factory=list)
    stages: list = field(default_factory=list)  # (stage, end_step, coverage, pred_err, ret)
    train_diagnostics: list = field(default_factory=list)
    n_trainings: int = 0
    clip_count: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def interevent_gaps(self):
        return [e[2] for e in self.trigger_events]

    def final_return(self, last_episodes: int = 5) -> float:
        if not self.episode_returns:
            return float("nan")
        tail = self.episode_returns[-last_episodes:]
        return float(np.mean([r[3] for r in tail]))

    def save(self, run_dir: Path | str):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "seed": self.seed,
            "budget": self.budget,
            "steps": self.steps,
            "n_trainings": self.n_trainings,
            "interevent_gaps": self.interevent_gaps,
            "clip_count": self.clip_count,
            "extra": self.extra,
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        with open(run_dir / "returns.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "end_step", "steps", "return"])
            w.writerows(
                [ep, end, n, repr(ret)] for ep, end, n, ret in self.episode_returns
            )
        with open(run_dir / "events.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["event", "step", "gap"])
            w.writerows(self.trigger_events)
        with open(run_dir / "trigger.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "ratio", "pred_error", "term", "accumulator", "decision"])
            for row in self.trigger_trace:
                w.writerow(
                    [
                        row["step"],
                        repr(row["ratio"]),
                        repr(row["pred_error"]),
                        repr(row["term"]),
                        repr(row["accumulator"]),
                        row.get("decision", "hold"),
                    ]
                )
        with open(run_dir / "stages.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "end_step", "coverage_volume", "pred_error_mean", "mean_return"])
            for stage in self.stages:
                w.writerow(
                    [stage[0], stage[1], repr(stage[2]), repr(stage[3]), repr(stage[4])]
                )

    @classmethod
    def load(cls, run_dir: Path | str) -> "RunRecord":
        run_dir = Path(run_dir)
        manifest = json.loads((run_dir / "manifest.json").read_text())
        if manifest["schema_version"] != SCHEMA_VERSION:
            raise ValueError(
                f"schema version mismatch: {manifest['schema_version']} != {SCHEMA_VERSION}"
            )
        record = cls(mode=manifest["mode"], seed=manifest["seed"], budget=manifest["budget"])
        record.steps = manifest["steps"]
        record.n_trainings = manifest["n_trainings"]
        record.clip_count = manifest.get("clip_count", 0)
        record.extra = manifest.get("extra", {})
        with open(run_dir / "returns.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                record.episode_returns.append(
                    (int(row[0]), int(row[1]), int(row[2]), float(row[3]))
                )
        with open(run_dir / "events.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                record.trigger_events.append((int(row[0]), int(row[1]), int(row[2])))
        with open(run_dir / "stages.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                record.stages.append(
                    (int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4]))
                )
        with open(run_dir / "trigger.csv", newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                record.trigger_trace.append(
                    dict(
                        step=int(row[0]),
                        ratio=float(row[1]),
                        pred_error=float(row[2]),
                        term=float(row[3]),
                        accumulator=float(row[4]),
                        decision=row[5],
                    )
                )
        return record


class _StageCoverage:
    """Exact hull volume of the full buffer in a projection plane frozen
    at the first stage, so cumulative coverage is comparable (and
    monotone) across stages."""

    def __init__(self):
        self.basis = None

    def __call__(self, states: np.ndarray) -> float:
        if self.basis is None:
            try:
                projected, basis, _ = monitor.pca_project(states, 2)
            except Exception:
                return 0.0
            self.basis = basis
            return monitor.convex_hull_area(projected)
        return monitor.convex_hull_area(states @ self.basis.T)


def run_cmlo(
    env,
    oracle_spec: oracles.OracleSpec,
    trigger_config: monitor.TriggerConfig,
    rollout_config: RolloutConfig,
    train_config: dynamics.TrainConfig,
    budget: int,
    seed: int,
    exploration_std: float = 0.1,
    exploration_eps: float = 0.1,
    buffer_capacity: int | None = None,
    n_stages: int = 4,
    mode: str = "cmlo",
) -> RunRecord:
    """Event-triggered loop for the given budget of environment steps.

    Works with continuous envs (ensemble dynamics + planner oracle) and
    tabular envs (empirical model + value-iteration oracle). The initial
    model fit happens after a t_min warm-up of random actions.
    """
    record = RunRecord(mode=mode, seed=seed, budget=budget)
    if budget <= 0:
        return record

    ss = np.random.SeedSequence(seed)
    rng_env, rng_expl, rng_hull, rng_roll = [
        np.random.default_rng(s) for s in ss.spawn(4)
    ]

    tabular = isinstance(env, envs.TabularEnv)
    obs_dim = env.spec.obs_dim
    act_dim = 1 if tabular else env.spec.action_dim
    capacity = buffer_capacity or budget
    buffers = ReplayBuffers(
        env_buffer=RingBuffer(capacity, obs_dim, act_dim),
        model_buffer=RingBuffer(max(capacity, 1), obs_dim, act_dim),
        fresh=FreshSlice(),
    )
    model = (
        TabularDynamics(env.mdp) if tabular else EnsembleDynamics(train_config)
    )
    trigger_state = monitor.TriggerState()
    policy = None
    last_train_step = 0
    span = 0.5 * (env.spec.action_high - env.spec.action_low)

    def choose_action(obs):
        if policy is None:
            if tabular:
                return int(rng_expl.integers(env.mdp.n_actions))
            return rng_expl.uniform(env.spec.action_low, env.spec.action_high, size=act_dim)
        if tabular:
            if rng_expl.random() < exploration_eps:
                return int(rng_expl.integers(env.mdp.n_actions))
            return policy.act(obs)
        action = np.atleast_1d(policy.act(obs))
        noisy = action + rng_expl.normal(0.0, exploration_std * span, size=act_dim)
        return np.clip(noisy, env.spec.action_low, env.spec.action_high)

    def refresh_policy():
        if tabular:
            result = oracles.optimize(
                model.model,
                oracles.OracleSpec(kind=oracles.VALUE_ITERATION, tolerance=oracle_spec.tolerance),
            )
        else:
            result = oracles.optimize(model.ensemble, oracle_spec, env=env)
        return result.policy

    stage_bounds = [
        int(round(budget * (i + 1) / n_stages)) for i in range(n_stages)
    ] if n_stages > 0 else []
    stage_idx = 0
    stage_trace_start = 0
    stage_return_start = 0
    stage_coverage = _StageCoverage()

    obs = env.reset(rng_env)
    episode_return = 0.0
    episode_steps = 0
    episode_idx = 0

    for step in range(1, budget + 1):
        action = choose_action(obs)
        next_obs, reward, done = env.step(action)
        act_arr = np.atleast_1d(np.asarray(action, dtype=np.float64))
        buffers.env_buffer.append(obs, act_arr, next_obs, reward)
        buffers.fresh.append(obs, act_arr, next_obs, reward)
        episode_return += reward
        episode_steps += 1
        obs = next_obs

        if done or episode_steps >= env.spec.horizon:
            record.episode_returns.append(
                (episode_idx, step, episode_steps, episode_return)
            )
            episode_idx += 1
            episode_return = 0.0
            episode_steps = 0
            obs = env.reset(rng_env)
            if policy is not None and hasattr(policy, "reset"):
                policy.reset()

        if step % trigger_config.check_frequency == 0:
            force = (
                model.current is None
                and trigger_state.steps_since_training + trigger_config.check_frequency
                >= trigger_config.t_min
            )
            fresh_data = (
                buffers.fresh.arrays() if len(buffers.fresh) else None
            )
            decision, trigger_state = monitor.trigger_step(
                trigger_state,
                trigger_config,
                fresh_data,
                model if model.current is not None else None,
                buffers.env_buffer.states(),
                rng_hull,
                force=force,
            )
            if decision == "train":
                diag = model.train(buffers.env_buffer.arrays())
                record.train_diagnostics.append(diag)
                record.n_trainings += 1
                gap = step - last_train_step
                record.trigger_events.append((record.n_trainings, step, gap))
                last_train_step = step
                buffers.fresh.clear()
                policy = refresh_policy()
                if not tabular and rollout_config.per_training > 0:
                    starts_pool = buffers.env_buffer.states()
                    pick = rng_roll.choice(
                        len(starts_pool),
                        size=min(rollout_config.per_training, len(starts_pool)),
                        replace=False,
                    )
                    h = rollout_config.length_for(record.n_trainings - 1)
                    ro, ra, rn, rr = rollout_model(
                        model,
                        policy,
                        starts_pool[pick],
                        h,
                        rng_roll,
                        env=env,
                        member_sampling=rollout_config.member_sampling,
                    )
                    for i in range(len(ro)):
                        buffers.model_buffer.append(
                            ro[i], ra[i], rn[i], rr[i], version=model.version
                        )
                elif tabular and rollout_config.per_training > 0:
                    _tabular_rollouts(
                        model, policy, buffers, rollout_config, rng_roll, env
                    )

        while stage_idx < len(stage_bounds) and step == stage_bounds[stage_idx]:
            coverage = stage_coverage(buffers.env_buffer.states())
            trace_rows = trigger_state.estimates_log[stage_trace_start:]
            errors = [r["pred_error"] for r in trace_rows if not r["failed"]]
            pred_err = float(np.mean(errors)) if errors else float("nan")
            rets = [r[3] for r in record.episode_returns[stage_return_start:]]
            mean_ret = float(np.mean(rets)) if rets else float("nan")
            record.stages.append((stage_idx, step, coverage, pred_err, mean_ret))
            stage_trace_start = len(trigger_state.estimates_log)
            stage_return_start = len(record.episode_returns)
            stage_idx += 1

    record.steps = budget
    record.trigger_trace = trigger_state.estimates_log
    record.clip_count = getattr(env, "clip_count", 0)
    record.extra = {
        "env_buffer_size": len(buffers.env_buffer),
        "model_buffer_size": len(buffers.model_buffer),
        "fresh_slice_size": len(buffers.fresh),
        "model_version": model.version,
        "model_buffer_versions": np.unique(buffers.model_buffer.versions()).tolist()
        if len(buffers.model_buffer)
        else [],
    }
    return record


def _tabular_rollouts(model, policy, buffers, rollout_config, rng, env):
    """Sampled model rollouts for the tabular engine path."""
    states_pool = buffers.env_buffer.states()
    pick = rng.choice(
        len(states_pool),
        size=min(rollout_config.per_training, len(states_pool)),
        replace=False,
    )
    h = rollout_config.length_for(model.version - 1)
    for row in states_pool[pick]:
        state = int(row.argmax())
        for _ in range(h):
            action = policy.act(row)
            nxt = model.sample_next(state, int(action), rng)
            one_hot = np.zeros(model.n_states)
            one_hot[nxt] = 1.0
            buffers.model_buffer.append(
                row,
                np.atleast_1d(float(action)),
                one_hot,
                float(model.reward[state, int(action)]),
                version=model.version,
            )
            state = nxt
            row = one_hot


def run_fixed_interval(
    env,
    oracle_spec: oracles.OracleSpec,
    trigger_config: monitor.TriggerConfig,
    rollout_config: RolloutConfig,
    train_config: dynamics.TrainConfig,
    budget: int,
    seed: int,
    interval: int,
    **kwargs,
) -> RunRecord:
    """Fixed-interval baseline: the identical loop with t_min = t_max = k.

    Collapsing the interevent bounds makes the trigger fire exactly every
    k steps, so this shares every code path (and random draw) with
    run_cmlo by construction.
    """
    if interval < 1:
        raise ValueError("interval must be at least 1")
    if interval % trigger_config.check_frequency:
        raise ValueError("interval must be a multiple of check_frequency")
    fixed = monitor.TriggerConfig(
        alpha=trigger_config.alpha,
        beta=trigger_config.beta,
        check_frequency=trigger_config.check_frequency,
        t_min=interval,
        t_max=interval,
        hull_sample_size=trigger_config.hull_sample_size,
        pca_dims=trigger_config.pca_dims,
    )
    return run_cmlo(
        env,
        oracle_spec,
        fixed,
        rollout_config,
        train_config,
        budget,
        seed,
        mode=f"fixed-{interval}",
        **kwargs,
    )
