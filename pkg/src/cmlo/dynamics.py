"""Probabilistic dynamics ensemble trained by negative log likelihood.

Small two-hidden-layer perceptrons with diagonal-Gaussian heads, written
directly on numpy with hand-derived reverse-mode gradients (checked
against central finite differences in the test suite). Members share the
replay data but use member-specific shuffle/init seeds; prediction is
the ensemble mean. Inputs and targets are normalized by buffer
statistics stored with the ensemble.

The networks predict the state *delta* s' - s by default (better
conditioned than absolute next states); the choice is recorded in the
`predict_delta` flag and round-trips through checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from cmlo import kernels
from cmlo.errors import EmptySlice, NumericalFailure

LOGVAR_MIN = -10.0
LOGVAR_MAX = 2.0
PARAM_KEYS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class TransitionTuple:
    """One environment transition in observation space."""

    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float


def batch_arrays(tuples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a sequence of TransitionTuple into (obs, act, next_obs) arrays."""
    if len(tuples) == 0:
        raise EmptySlice("no transitions provided")
    obs = np.stack([np.atleast_1d(t.state) for t in tuples]).astype(np.float64)
    act = np.stack([np.atleast_1d(t.action) for t in tuples]).astype(np.float64)
    nxt = np.stack([np.atleast_1d(t.next_state) for t in tuples]).astype(np.float64)
    return obs, act, nxt


def _softsign(z):
    return z / (1.0 + np.abs(z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Normalization:
    in_mu: np.ndarray
    in_sigma: np.ndarray
    out_mu: np.ndarray
    out_sigma: np.ndarray

    @classmethod
    def identity(cls, in_dim: int, out_dim: int) -> "Normalization":
        return cls(
            np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim)
        )

    @classmethod
    def from_data(cls, x: np.ndarray, targets: np.ndarray) -> "Normalization":
        floor = 1e-8
        return cls(
            x.mean(axis=0),
            np.maximum(x.std(axis=0), floor),
            targets.mean(axis=0),
            np.maximum(targets.std(axis=0), floor),
        )


class GaussianNet:
    """One MLP member: mean and clamped log-variance heads.

    Layer widths are (in, hidden, hidden, 2*out); the log-variance head
    is kept inside (LOGVAR_MIN, LOGVAR_MAX) by a smooth two-sided
    softplus clamp, so NLL gradients stay well defined everywhere.
    """

    def __init__(self, obs_dim, act_dim, hidden, rng, norm=None,
                 predict_delta=True, lv_min=LOGVAR_MIN, lv_max=LOGVAR_MAX):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.hidden = hidden
        self.predict_delta = predict_delta
        self.lv_min = lv_min
        self.lv_max = lv_max
        self.norm = norm or Normalization.identity(obs_dim + act_dim, obs_dim)
        in_dim = obs_dim + act_dim
        out2 = 2 * obs_dim

        def glorot(n_in, n_out):
            s = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-s, s, size=(n_in, n_out))

        self.params = {
            "w1": glorot(in_dim, hidden),
            "b1": np.zeros(hidden),
            "w2": glorot(hidden, hidden),
            "b2": np.zeros(hidden),
            "w3": glorot(hidden, out2),
            "b3": np.zeros(out2),
        }
        # start with small predicted variances
        self.params["b3"][obs_dim:] = -1.0

    def _forward_raw(self, obs, act):
        """Normalized forward pass; returns intermediates for backprop.

        The softsign slopes 1/(1+|z|) are cached so the backward pass
        reuses them instead of recomputing the activation derivative.
        """
        x = np.concatenate([obs, act], axis=1)
        xn = (x - self.norm.in_mu) / self.norm.in_sigma
        p = self.params
        z1 = xn @ p["w1"] + p["b1"]
        s1 = 1.0 / (1.0 + np.abs(z1))
        h1 = z1 * s1
        z2 = h1 @ p["w2"] + p["b2"]
        s2 = 1.0 / (1.0 + np.abs(z2))
        h2 = z2 * s2
        z3 = h2 @ p["w3"] + p["b3"]
        d = self.obs_dim
        mean_n = z3[:, :d]
        lv_raw = z3[:, d:]
        a = self.lv_max - _softplus(self.lv_max - lv_raw)
        logvar = self.lv_min + _softplus(a - self.lv_min)
        cache = (xn, s1, h1, s2, h2, lv_raw, a)
        return mean_n, logvar, cache

    def forward(self, obs, act):
        """Denormalized member prediction (next-state mean, delta variance)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        act = np.atleast_2d(np.asarray(act, dtype=np.float64))
        mean_n, logvar, _ = self._forward_raw(obs, act)
        target = mean_n * self.norm.out_sigma + self.norm.out_mu
        nxt = obs + target if self.predict_delta else target
        var = np.exp(logvar) * self.norm.out_sigma**2
        return nxt, var

    def targets_normalized(self, obs, next_obs):
        raw = next_obs - obs if self.predict_delta else next_obs
        return (raw - self.norm.out_mu) / self.norm.out_sigma

    def nll_loss(self, obs, act, next_obs):
        """Gaussian NLL and its parameter gradients on a batch.

        loss = mean over the batch of
            (mu - t)^T Sigma^-1 (mu - t) + log det Sigma
        computed in normalized target space. Gradients are accumulated
        by hand in reverse through the clamp, heads, and hidden layers.
        """
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        act = np.atleast_2d(np.asarray(act, dtype=np.float64))
        next_obs = np.atleast_2d(np.asarray(next_obs, dtype=np.float64))
        if obs.shape[0] == 0:
            raise EmptySlice("empty batch")
        t_n = self.targets_normalized(obs, next_obs)
        mean_n, logvar, cache = self._forward_raw(obs, act)
        xn, s1, h1, s2, h2, lv_raw, a = cache
        if not (np.all(np.isfinite(mean_n)) and np.all(np.isfinite(logvar))):
            raise NumericalFailure("non-finite forward values")

        b = obs.shape[0]
        inv_var = np.exp(-logvar)
        diff = mean_n - t_n
        loss = float(np.mean(np.sum(diff**2 * inv_var + logvar, axis=1)))

        # reverse pass
        d_mean = 2.0 * diff * inv_var / b
        d_logvar = (1.0 - diff**2 * inv_var) / b
        # clamp chain: logvar = lv_min + softplus(a - lv_min),
        #              a = lv_max - softplus(lv_max - lv_raw)
        d_a = d_logvar * _sigmoid(a - self.lv_min)
        d_lv_raw = d_a * _sigmoid(self.lv_max - lv_raw)
        d_z3 = np.concatenate([d_mean, d_lv_raw], axis=1)

        p = self.params
        grads = {}
        grads["w3"] = h2.T @ d_z3
        grads["b3"] = d_z3.sum(axis=0)
        d_h2 = d_z3 @ p["w3"].T
        d_z2 = d_h2 * s2 * s2
        grads["w2"] = h1.T @ d_z2
        grads["b2"] = d_z2.sum(axis=0)
        d_h1 = d_z2 @ p["w2"].T
        d_z1 = d_h1 * s1 * s1
        grads["w1"] = xn.T @ d_z1
        grads["b1"] = d_z1.sum(axis=0)
        return loss, grads

    def clone_params(self):
        return {k: v.copy() for k, v in self.params.items()}


class Adam:
    """Adaptive-moment optimizer over a GaussianNet's parameter dict."""

    def __init__(self, params, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k in params:
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grads[k]
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grads[k] ** 2
            params[k] -= (
                self.step_size
                * (self.m[k] / b1c)
                / (np.sqrt(self.v[k] / b2c) + self.eps)
            )


@dataclass
class TrainConfig:
    """Ensemble training settings; member_seeds defaults to distinct spawns.

    max_updates, when set, caps the minibatch updates per member per
    training call so retraining cost stays bounded as the buffer grows
    (the epoch count is the contract; the cap is a desk-scale budget).
    """

    ensemble_size: int = 5
    hidden: int = 64
    epochs: int = 40
    batch_size: int = 128
    step_size: float = 1e-3
    seed: int = 0
    member_seeds: list[int] | None = None
    predict_delta: bool = True
    lv_min: float = LOGVAR_MIN
    lv_max: float = LOGVAR_MAX
    max_updates: int | None = None

    def resolved_member_seeds(self) -> list[int]:
        if self.member_seeds is not None:
            if len(self.member_seeds) != self.ensemble_size:
                raise ValueError("member_seeds length must equal ensemble_size")
            return list(self.member_seeds)
        state = np.random.SeedSequence(self.seed).generate_state(self.ensemble_size)
        return [int(s) for s in state]


class GaussianEnsemble:
    """K probabilistic members sharing normalization; immutable once built."""

    def __init__(self, members: list[GaussianNet], version: int = 0):
        if not members:
            raise ValueError("ensemble needs at least one member")
        dims = {(m.obs_dim, m.act_dim, m.hidden) for m in members}
        if len(dims) != 1:
            raise ValueError("members must share dimensions")
        self.members = members
        self.version = version
        self.diagnostics: dict = {}
        self._stack = None

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def obs_dim(self) -> int:
        return self.members[0].obs_dim

    @property
    def act_dim(self) -> int:
        return self.members[0].act_dim

    def stacked(self):
        """Contiguous (K, ...) parameter stacks consumed by the kernels."""
        if self._stack is None:
            m0 = self.members[0]
            self._stack = dict(
                w1=np.ascontiguousarray([m.params["w1"] for m in self.members]),
                b1=np.ascontiguousarray([m.params["b1"] for m in self.members]),
                w2=np.ascontiguousarray([m.params["w2"] for m in self.members]),
                b2=np.ascontiguousarray([m.params["b2"] for m in self.members]),
                w3=np.ascontiguousarray([m.params["w3"] for m in self.members]),
                b3=np.ascontiguousarray([m.params["b3"] for m in self.members]),
                in_mu=m0.norm.in_mu,
                in_sigma=m0.norm.in_sigma,
                out_mu=m0.norm.out_mu,
                out_sigma=m0.norm.out_sigma,
                lv_min=m0.lv_min,
                lv_max=m0.lv_max,
                predict_delta=m0.predict_delta,
            )
        return self._stack

    def invalidate_cache(self):
        self._stack = None

    def predict(self, obs, act):
        """Ensemble-mean next state plus per-member means and variances.

        Accepts a single (obs, act) pair or batches; batch outputs are
        (B, D), (K, B, D), (K, B, D).
        """
        obs = np.asarray(obs, dtype=np.float64)
        act = np.asarray(act, dtype=np.float64)
        single = obs.ndim == 1
        obs2 = np.atleast_2d(obs)
        act2 = np.atleast_2d(act)
        if obs2.shape[1] != self.obs_dim or act2.shape[1] != self.act_dim:
            raise ValueError("dimension mismatch with the ensemble")
        s = self.stacked()
        mean, member_means, member_vars = kernels.ensemble_step(
            s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
            s["in_mu"], s["in_sigma"], s["out_mu"], s["out_sigma"],
            s["lv_min"], s["lv_max"], s["predict_delta"],
            obs2, act2,
        )
        if single:
            return mean[0], member_means[:, 0, :], member_vars[:, 0, :]
        return mean, member_means, member_vars

    def rollout(self, start_obs, actions):
        """Ensemble-mean trajectories for pre-sampled action tensors."""
        s = self.stacked()
        return kernels.ensemble_rollout(
            s["w1"], s["b1"], s["w2"], s["b2"], s["w3"], s["b3"],
            s["in_mu"], s["in_sigma"], s["out_mu"], s["out_sigma"],
            s["lv_min"], s["lv_max"], s["predict_delta"],
            np.asarray(start_obs, dtype=np.float64),
            np.asarray(actions, dtype=np.float64),
        )

    def one_step_error(self, tuples_or_arrays) -> float:
        """Mean over tuples of the member-averaged Euclidean prediction error."""
        if isinstance(tuples_or_arrays, tuple):
            obs, act, nxt = tuples_or_arrays
        else:
            obs, act, nxt = batch_arrays(tuples_or_arrays)
        if len(obs) == 0:
            raise EmptySlice("no transitions provided")
        _, member_means, _ = self.predict(obs, act)
        errors = np.linalg.norm(member_means - nxt[None, :, :], axis=2)
        return float(errors.mean())

    def to_json(self) -> str:
        m0 = self.members[0]
        doc = {
            "format_version": 1,
            "obs_dim": m0.obs_dim,
            "act_dim": m0.act_dim,
            "hidden": m0.hidden,
            "predict_delta": m0.predict_delta,
            "lv_min": m0.lv_min,
            "lv_max": m0.lv_max,
            "version": self.version,
            "norm": {
                "in_mu": m0.norm.in_mu.tolist(),
                "in_sigma": m0.norm.in_sigma.tolist(),
                "out_mu": m0.norm.out_mu.tolist(),
                "out_sigma": m0.norm.out_sigma.tolist(),
            },
            "members": [
                {k: m.params[k].tolist() for k in PARAM_KEYS} for m in self.members
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "GaussianEnsemble":
        doc = json.loads(text)
        norm = Normalization(
            np.array(doc["norm"]["in_mu"]),
            np.array(doc["norm"]["in_sigma"]),
            np.array(doc["norm"]["out_mu"]),
            np.array(doc["norm"]["out_sigma"]),
        )
        members = []
        rng = np.random.default_rng(0)
        for saved in doc["members"]:
            net = GaussianNet(
                doc["obs_dim"], doc["act_dim"], doc["hidden"], rng, norm=norm,
                predict_delta=doc["predict_delta"],
                lv_min=doc["lv_min"], lv_max=doc["lv_max"],
            )
            net.params = {k: np.array(saved[k], dtype=np.float64) for k in PARAM_KEYS}
            members.append(net)
        return cls(members, version=doc["version"])


def train_ensemble(data, config: TrainConfig, version: int = 0) -> GaussianEnsemble:
    """Fit K members on the full buffer with member-specific seeds.

    data is (obs, act, next_obs) arrays or a sequence of TransitionTuple.
    Deterministic given config seeds. Diagnostics carry per-member
    epoch-end losses and a monotonicity flag (losses non-increasing
    after the first epoch, 1e-6 tolerance).
    """
    if isinstance(data, tuple):
        obs, act, nxt = data
    else:
        obs, act, nxt = batch_arrays(data)
    if len(obs) == 0:
        raise EmptySlice("empty training buffer")
    x = np.concatenate([obs, act], axis=1)
    raw_target = nxt - obs if config.predict_delta else nxt
    norm = Normalization.from_data(x, raw_target)

    members = []
    epoch_losses = []
    monotone = []
    n = len(obs)
    for seed in config.resolved_member_seeds():
        rng = np.random.default_rng(seed)
        net = GaussianNet(
            obs.shape[1], act.shape[1], config.hidden, rng, norm=norm,
            predict_delta=config.predict_delta,
            lv_min=config.lv_min, lv_max=config.lv_max,
        )
        opt = Adam(net.params, step_size=config.step_size)
        losses = []
        updates = 0
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                if config.max_updates is not None and updates >= config.max_updates:
                    break
                idx = order[start : start + config.batch_size]
                _, grads = net.nll_loss(obs[idx], act[idx], nxt[idx])
                opt.update(net.params, grads)
                updates += 1
            losses.append(net.nll_loss(obs, act, nxt)[0])
            if config.max_updates is not None and updates >= config.max_updates:
                break
        members.append(net)
        epoch_losses.append(losses)
        drops = np.diff(losses) if len(losses) > 1 else np.array([])
        monotone.append(bool(np.all(drops <= 1e-6)))

    ensemble = GaussianEnsemble(members, version=version)
    ensemble.diagnostics = {
        "epoch_losses": epoch_losses,
        "final_losses": [ls[-1] if ls else None for ls in epoch_losses],
        "monotone": monotone,
    }
    return ensemble
