"""Model-shift estimation and the event-triggered mechanism.

Coverage volume = area of the 2-D convex hull of (PCA-projected) buffer
states; model divergence = mean ensemble prediction error on the fresh
slice. Each estimation contributes log(ratio * error + beta) to an
accumulator; training triggers when the accumulator crosses alpha,
subject to minimal/maximal interevent times.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cmlo import kernels
from cmlo.errors import DegenerateBase, DegenerateCloud, EmptySlice

DEGENERATE_EIGENVALUE = 1e-24


def pca_project(states: np.ndarray, dims: int = 2):
    """Mean-centered projection onto the top principal directions.

    Eigenvectors of the sample covariance in descending eigenvalue
    order, each sign-fixed so its first non-negligible coordinate is
    positive. Returns (projected (N, dims), basis (dims, D), explained
    variance (dims,)). Raises DegenerateCloud when all points coincide.
    """
    pts = np.asarray(states, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two points in a 2-D array")
    if pts.shape[1] < dims:
        raise ValueError("state dimension below projection dimension")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / (pts.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    if eigvals[0] <= DEGENERATE_EIGENVALUE:
        raise DegenerateCloud("all points coincide")
    basis = np.empty((dims, pts.shape[1]))
    for i in range(dims):
        v = eigvecs[:, i]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        basis[i] = v
    return centered @ basis.T, basis, eigvals[:dims].copy()


def convex_hull_area(points2d: np.ndarray) -> float:
    """Convex hull area by scan + shoelace; degenerate sets give 0."""
    return kernels.hull_area(np.asarray(points2d, dtype=np.float64))


@dataclass(frozen=True)
class TriggerConfig:
    """Event-trigger thresholds and cadence.

    check_frequency F is the number of environment steps between
    estimations; t_min/t_max bound the realized interevent times and
    must be multiples of F so the decision grid can honor them exactly.
    """

    alpha: float
    beta: float = 1.0
    check_frequency: int = 25
    t_min: int = 125
    t_max: int = 500
    hull_sample_size: int = 1000
    pca_dims: int = 2

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.check_frequency < 1:
            raise ValueError("check_frequency must be at least 1")
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")
        if self.t_min % self.check_frequency or self.t_max % self.check_frequency:
            raise ValueError("t_min and t_max must be multiples of check_frequency")


@dataclass
class HullEstimate:
    volume: float
    n_points: int
    pca_basis: np.ndarray | None
    degenerate: bool = False


@dataclass
class TriggerState:
    """Accumulator state advanced once per estimation."""

    accumulator: float = 0.0
    steps_since_training: int = 0
    base_hull_volume: float = 0.0
    total_steps: int = 0
    estimates_log: list = field(default_factory=list)


def coverage_volume(
    states: np.ndarray, config: TriggerConfig, rng: np.random.Generator | None = None
) -> HullEstimate:
    """Hull volume of (a sample of) the buffered states.

    Samples hull_sample_size states uniformly without replacement when
    the buffer is larger (all states otherwise, so the result is then
    deterministic); projects to pca_dims and takes the hull area.
    Degenerate clouds yield volume 0 with the degenerate flag set.
    """
    pts = np.asarray(states, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("states must be a nonempty (N, D) array")
    if pts.shape[0] > config.hull_sample_size:
        if rng is None:
            rng = np.random.default_rng(0)
        idx = rng.choice(pts.shape[0], size=config.hull_sample_size, replace=False)
        pts = pts[idx]
    try:
        projected, basis, _ = pca_project(pts, config.pca_dims)
    except (DegenerateCloud, ValueError):
        return HullEstimate(0.0, pts.shape[0], None, degenerate=True)
    area = convex_hull_area(projected)
    return HullEstimate(area, pts.shape[0], basis, degenerate=(area == 0.0))


def raw_condition(vol_new: float, vol_base: float, pred_error: float) -> float:
    """Diagnostic product form of the trigger condition."""
    if vol_base <= 0.0:
        raise DegenerateBase("base hull volume is zero")
    return vol_new / vol_base * pred_error


def trigger_step(
    state: TriggerState,
    config: TriggerConfig,
    fresh_slice,
    ensemble,
    buffer_states: np.ndarray,
    rng: np.random.Generator | None = None,
    force: bool = False,
):
    """One estimation round; returns ("hold" | "train", updated state).

    Adds log(coverage ratio * fresh prediction error + beta) to the
    accumulator. Training fires when the accumulator reaches alpha and
    at least t_min steps have passed, or unconditionally at t_max (the
    engine also forces the initial fit after its warm-up via `force`).
    Estimator failures contribute a zero term (logged) instead of
    raising. On "train" the accumulator and counters reset and the base
    hull volume is re-anchored to the current coverage.
    """
    state.steps_since_training += config.check_frequency
    state.total_steps += config.check_frequency

    vol_new = state.base_hull_volume
    ratio = 1.0
    pred_error = 0.0
    term = 0.0
    failed = False
    try:
        vol_new = coverage_volume(buffer_states, config, rng).volume
    except Exception:
        failed = True
    try:
        if ensemble is None:
            raise EmptySlice("no model trained yet")
        pred_error = ensemble.one_step_error(fresh_slice)
        if state.base_hull_volume > 0.0:
            ratio = vol_new / state.base_hull_volume
            value = raw_condition(vol_new, state.base_hull_volume, pred_error)
        else:
            value = pred_error  # degenerate base: ratio falls back to 1
        term = math.log(value + config.beta)
    except Exception:
        failed = True
        term = 0.0

    state.accumulator += term
    state.estimates_log.append(
        dict(
            step=state.total_steps,
            ratio=ratio,
            pred_error=pred_error,
            term=term,
            accumulator=state.accumulator,
            failed=failed,
        )
    )

    fire = (
        force
        or (
            state.accumulator >= config.alpha
            and state.steps_since_training >= config.t_min
        )
        or state.steps_since_training >= config.t_max
    )
    if fire:
        state.accumulator = 0.0
        state.steps_since_training = 0
        state.base_hull_volume = vol_new
        state.estimates_log[-1]["decision"] = "train"
        return "train", state
    state.estimates_log[-1]["decision"] = "hold"
    return "hold", state


def write_trigger_trace(state: TriggerState, path: Path | str) -> None:
    """Trace CSV: one row per estimation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ratio", "pred_error", "term", "accumulator", "decision"])
        for row in state.estimates_log:
            writer.writerow(
                [
                    row["step"],
                    repr(row["ratio"]),
                    repr(row["pred_error"]),
                    repr(row["term"]),
                    repr(row["accumulator"]),
                    row.get("decision", "hold"),
                ]
            )
