"""Ground-truth environments.

Seeded tabular MDP generators, a generative sampler for building
empirical models, and two deterministic continuous systems (pendulum
swing-up, cart-pole) with analytic dynamics. The continuous constants
live in env_constants.json so results stay comparable across builds;
the step functions are pure in (state, action, constants).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmlo import mdp as tab

_CONSTANTS_PATH = Path(__file__).parent / "env_constants.json"
ENV_CONSTANTS = json.loads(_CONSTANTS_PATH.read_text())


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment surface."""

    name: str
    state_dim: int
    obs_dim: int
    action_dim: int
    action_low: float
    action_high: float
    horizon: int
    gamma: float
    reward_bound: float
    terminal: str


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Tabular generators and the generative-model sampler
# ---------------------------------------------------------------------------


def random_mdp(
    n_states: int,
    n_actions: int,
    seed,
    sparsity: float = 1.0,
    gamma: float = 0.9,
) -> tab.TabularMdp:
    """Random MDP with Dirichlet transition rows and uniform [-1, 1] rewards.

    sparsity in (0, 1] sets the fraction of states present in each row's
    support (at least one). Deterministic in the seed.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("state and action counts must be positive")
    if not 0.0 < sparsity <= 1.0:
        raise ValueError("sparsity must lie in (0, 1]")
    rng = _as_rng(seed)
    support = max(1, int(round(sparsity * n_states)))
    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            idx = (
                np.arange(n_states)
                if support == n_states
                else rng.choice(n_states, size=support, replace=False)
            )
            transition[s, a, idx] = rng.dirichlet(np.ones(support))
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return tab.TabularMdp(transition, reward, gamma, reward_bound=1.0)


def chain_mdp(n_states: int, gamma: float = 0.9, slip: float = 0.1) -> tab.TabularMdp:
    """Left/right chain: action 1 advances (with slip), action 0 retreats.

    Reward 1 for taking action 1 in the last state, -0.01 step cost
    elsewhere; a small exactly-solvable exploration testbed.
    """
    transition = np.zeros((n_states, 2, n_states))
    reward = np.full((n_states, 2), -0.01)
    for s in range(n_states):
        back = max(s - 1, 0)
        fwd = min(s + 1, n_states - 1)
        transition[s, 0, back] = 1.0
        transition[s, 1, fwd] = 1.0 - slip
        transition[s, 1, back] += slip
    reward[n_states - 1, 1] = 1.0
    return tab.TabularMdp(transition, reward, gamma, reward_bound=1.0)


class GenerativeSampler:
    """i.i.d. next-state draws from a true tabular MDP's rows."""

    def __init__(self, mdp: tab.TabularMdp, seed):
        self.mdp = mdp
        self.rng = _as_rng(seed)

    def draw(self, s: int, a: int, n: int) -> np.ndarray:
        """n draws from P(.|s, a) returned as a next-state count vector."""
        if n < 1:
            raise ValueError("n must be at least 1")
        if not (0 <= s < self.mdp.n_states and 0 <= a < self.mdp.n_actions):
            raise ValueError(f"invalid state-action pair ({s}, {a})")
        return self.rng.multinomial(n, self.mdp.transition[s, a])

    def draw_all(self, n: int) -> np.ndarray:
        """n draws for every pair, as an (S, A, S) count tensor."""
        if n < 1:
            raise ValueError("n must be at least 1")
        s_n, a_n = self.mdp.n_states, self.mdp.n_actions
        counts = np.empty((s_n, a_n, s_n), dtype=np.int64)
        for s in range(s_n):
            for a in range(a_n):
                counts[s, a] = self.rng.multinomial(n, self.mdp.transition[s, a])
        return counts


# ---------------------------------------------------------------------------
# Pendulum swing-up (deterministic, never terminal)
# ---------------------------------------------------------------------------

_PEND = ENV_CONSTANTS["pendulum"]


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(-theta + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def pendulum_reward(theta, theta_dot, torque, constants=_PEND):
    return -(
        constants["angle_cost"] * wrap_angle(theta) ** 2
        + constants["speed_cost"] * theta_dot**2
        + constants["torque_cost"] * torque**2
    )


def pendulum_step(state, torque, constants=_PEND, dt=None):
    """Semi-implicit Euler step of theta'' = (g/l) sin(theta) + u/(m l^2).

    theta = 0 is upright; the hanging state (pi, 0) is a fixed point.
    Torque is clipped to the documented bound, speed to max_speed; the
    reward is evaluated at the incoming state and applied torque.
    """
    theta, theta_dot = float(state[0]), float(state[1])
    g, length, m = constants["gravity"], constants["length"], constants["mass"]
    dt = constants["dt"] if dt is None else dt
    u = float(np.clip(torque, -constants["max_torque"], constants["max_torque"]))
    reward = pendulum_reward(theta, theta_dot, u, constants)
    accel = g / length * math.sin(theta) + u / (m * length**2)
    new_dot = theta_dot + dt * accel
    new_dot = float(np.clip(new_dot, -constants["max_speed"], constants["max_speed"]))
    new_theta = float(wrap_angle(theta + dt * new_dot))
    return np.array([new_theta, new_dot]), float(reward), False


def pendulum_energy(state, constants=_PEND):
    """Mechanical energy: 0.5 m l^2 w^2 + m g l cos(theta)."""
    theta, theta_dot = float(state[0]), float(state[1])
    m, length, g = constants["mass"], constants["length"], constants["gravity"]
    return 0.5 * m * length**2 * theta_dot**2 + m * g * length * math.cos(theta)


class PendulumEnv:
    """Episodic wrapper; observations are (cos theta, sin theta, theta_dot)."""

    def __init__(self, constants=None):
        c = dict(_PEND)
        if constants:
            c.update(constants)
        self.constants = c
        max_r = (
            c["angle_cost"] * math.pi**2
            + c["speed_cost"] * c["max_speed"] ** 2
            + c["torque_cost"] * c["max_torque"] ** 2
        )
        self.spec = EnvSpec(
            name="pendulum",
            state_dim=2,
            obs_dim=3,
            action_dim=1,
            action_low=-c["max_torque"],
            action_high=c["max_torque"],
            horizon=int(c["horizon"]),
            gamma=c["gamma"],
            reward_bound=max_r,
            terminal="never",
        )
        self.state = np.array([math.pi, 0.0])
        self.clip_count = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        theta = math.pi + rng.uniform(
            -self.constants["reset_angle_spread"], self.constants["reset_angle_spread"]
        )
        theta_dot = rng.uniform(
            -self.constants["reset_speed_spread"], self.constants["reset_speed_spread"]
        )
        self.state = np.array([float(wrap_angle(theta)), theta_dot])
        return self.observe(self.state)

    def step(self, action):
        u = float(np.asarray(action).ravel()[0])
        if abs(u) > self.constants["max_torque"]:
            self.clip_count += 1
        self.state, reward, done = pendulum_step(self.state, u, self.constants)
        return self.observe(self.state), reward, done

    def observe(self, state) -> np.ndarray:
        theta, theta_dot = state
        return np.array([math.cos(theta), math.sin(theta), theta_dot])

    def reward_from_obs(self, obs, action):
        """Vectorized reward for planner rollouts; obs (..., 3), action (..., 1)."""
        obs = np.asarray(obs)
        act = np.asarray(action)
        theta = np.arctan2(obs[..., 1], obs[..., 0])
        theta_dot = obs[..., 2]
        u = np.clip(
            act[..., 0], -self.constants["max_torque"], self.constants["max_torque"]
        )
        return pendulum_reward(theta, theta_dot, u, self.constants)

    def done_from_obs(self, obs):
        return np.zeros(np.asarray(obs).shape[:-1], dtype=bool)


# ---------------------------------------------------------------------------
# Cart-pole (continuous force, terminal thresholds)
# ---------------------------------------------------------------------------

_CART = ENV_CONSTANTS["cartpole"]


def cartpole_step(state, force, constants=_CART):
    """Semi-implicit Euler step of the classic cart-pole equations.

    State (x, x_dot, theta, theta_dot); done when |theta| exceeds the
    angle threshold or |x| the track bound; reward 1 per surviving step.
    """
    x, x_dot, theta, theta_dot = (float(v) for v in state)
    f = float(np.clip(force, -constants["max_force"], constants["max_force"]))
    g = constants["gravity"]
    mc, mp = constants["cart_mass"], constants["pole_mass"]
    lp = constants["pole_half_length"]
    dt = constants["dt"]
    total = mc + mp
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    temp = (f + mp * lp * theta_dot**2 * sin_t) / total
    theta_acc = (g * sin_t - cos_t * temp) / (
        lp * (4.0 / 3.0 - mp * cos_t**2 / total)
    )
    x_acc = temp - mp * lp * theta_acc * cos_t / total
    x_dot = x_dot + dt * x_acc
    x = x + dt * x_dot
    theta_dot = theta_dot + dt * theta_acc
    theta = theta + dt * theta_dot
    new_state = np.array([x, x_dot, theta, theta_dot])
    done = bool(
        abs(theta) > constants["theta_threshold"] or abs(x) > constants["x_threshold"]
    )
    return new_state, 1.0, done


class CartpoleEnv:
    """Episodic wrapper; the observation is the raw 4-D state."""

    def __init__(self, constants=None):
        c = dict(_CART)
        if constants:
            c.update(constants)
        self.constants = c
        self.spec = EnvSpec(
            name="cartpole",
            state_dim=4,
            obs_dim=4,
            action_dim=1,
            action_low=-c["max_force"],
            action_high=c["max_force"],
            horizon=int(c["horizon"]),
            gamma=c["gamma"],
            reward_bound=1.0,
            terminal="|theta| > theta_threshold or |x| > x_threshold",
        )
        self.state = np.zeros(4)
        self.clip_count = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        spread = self.constants["reset_spread"]
        self.state = rng.uniform(-spread, spread, size=4)
        return self.observe(self.state)

    def step(self, action):
        f = float(np.asarray(action).ravel()[0])
        if abs(f) > self.constants["max_force"]:
            self.clip_count += 1
        self.state, reward, done = cartpole_step(self.state, f, self.constants)
        return self.observe(self.state), reward, done

    def observe(self, state) -> np.ndarray:
        return np.asarray(state, dtype=np.float64).copy()

    def reward_from_obs(self, obs, action):
        return np.where(self.done_from_obs(obs), 0.0, 1.0)

    def done_from_obs(self, obs):
        obs = np.asarray(obs)
        return (np.abs(obs[..., 2]) > self.constants["theta_threshold"]) | (
            np.abs(obs[..., 0]) > self.constants["x_threshold"]
        )


# ---------------------------------------------------------------------------
# Tabular environment wrapper (integer states, one-hot observations)
# ---------------------------------------------------------------------------


class TabularEnv:
    """Episodic wrapper around a TabularMdp with one-hot observations.

    One-hot observations give discrete states a geometry the coverage
    estimator and ensemble-free trigger machinery can work with.
    """

    def __init__(self, mdp: tab.TabularMdp, horizon: int = 50, start_state: int = 0):
        self.mdp = mdp
        self.horizon = horizon
        self.start_state = start_state
        self.state = start_state
        self.spec = EnvSpec(
            name="tabular",
            state_dim=1,
            obs_dim=mdp.n_states,
            action_dim=mdp.n_actions,
            action_low=0.0,
            action_high=float(mdp.n_actions - 1),
            horizon=horizon,
            gamma=mdp.gamma,
            reward_bound=mdp.reward_bound,
            terminal="never",
        )
        self._rng = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._rng = rng
        self.state = self.start_state
        return self.observe(self.state)

    def step(self, action):
        a = int(np.asarray(action).ravel()[0])
        reward = float(self.mdp.reward[self.state, a])
        self.state = int(
            self._rng.choice(self.mdp.n_states, p=self.mdp.transition[self.state, a])
        )
        return self.observe(self.state), reward, False

    def observe(self, state) -> np.ndarray:
        one_hot = np.zeros(self.mdp.n_states)
        one_hot[int(state)] = 1.0
        return one_hot


def export_trajectory(path, rows):
    """CSV trajectory export: (t, state..., action..., reward, done) rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "state", "action", "reward", "done"])
        for t, state, action, reward, done in rows:
            writer.writerow(
                [
                    t,
                    " ".join(f"{v!r}" for v in np.atleast_1d(state)),
                    " ".join(f"{v!r}" for v in np.atleast_1d(action)),
                    repr(float(reward)),
                    int(done),
                ]
            )
