"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; `cmlo.kernels._core` (Cython) mirrors
them exactly and is preferred at import time when compiled. Keep both in
lockstep — the parity tests compare the two backends element-wise.
"""

import numpy as np

BACKEND = "python"


def _softsign(x):
    return x / (1.0 + np.abs(x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _clamp_logvar(lv, lv_min, lv_max):
    # smooth two-sided clamp; stays strictly inside (lv_min, lv_max)
    lv = lv_max - _softplus(lv_max - lv)
    return lv_min + _softplus(lv - lv_min)


def ensemble_members_forward(
    w1, b1, w2, b2, w3, b3,
    in_mu, in_sigma, obs, act,
    lv_min, lv_max,
):
    """Forward all K members on a batch.

    Shapes: w1 (K,I,H), b1 (K,H), w2 (K,H,H), b2 (K,H), w3 (K,H,2D),
    b3 (K,2D); obs (B,D), act (B,A) with I = D + A. Returns normalized
    member means (K,B,D) and clamped log-variances (K,B,D).
    """
    x = np.concatenate([obs, act], axis=1)
    xn = (x - in_mu) / in_sigma
    h1 = _softsign(np.einsum("bi,kij->kbj", xn, w1, optimize=True) + b1[:, None, :])
    h2 = _softsign(h1 @ w2 + b2[:, None, :])
    raw = h2 @ w3 + b3[:, None, :]
    d = raw.shape[2] // 2
    mean_n = raw[:, :, :d]
    logvar = _clamp_logvar(raw[:, :, d:], lv_min, lv_max)
    return mean_n, logvar


def ensemble_step(
    w1, b1, w2, b2, w3, b3,
    in_mu, in_sigma, out_mu, out_sigma,
    lv_min, lv_max, predict_delta,
    obs, act,
):
    """One-step prediction through every member plus the ensemble mean.

    Returns (mean_next (B,D), member_next (K,B,D), member_var (K,B,D));
    variances are reported in denormalized target space.
    """
    mean_n, logvar = ensemble_members_forward(
        w1, b1, w2, b2, w3, b3, in_mu, in_sigma, obs, act, lv_min, lv_max
    )
    target = mean_n * out_sigma + out_mu
    member_next = obs[None, :, :] + target if predict_delta else target
    member_var = np.exp(logvar) * out_sigma**2
    return member_next.mean(axis=0), member_next, member_var


def ensemble_rollout(
    w1, b1, w2, b2, w3, b3,
    in_mu, in_sigma, out_mu, out_sigma,
    lv_min, lv_max, predict_delta,
    start_obs, actions,
):
    """Roll the ensemble-mean dynamics for a pre-sampled action tensor.

    start_obs (B,D), actions (B,H,A) -> predicted observations (B,H,D),
    where entry [:, t] is the state after applying actions[:, t].
    """
    b, horizon, _ = actions.shape
    d = start_obs.shape[1]
    traj = np.empty((b, horizon, d), dtype=np.float64)
    obs = start_obs
    for t in range(horizon):
        obs, _, _ = ensemble_step(
            w1, b1, w2, b2, w3, b3,
            in_mu, in_sigma, out_mu, out_sigma,
            lv_min, lv_max, predict_delta,
            obs, actions[:, t, :],
        )
        traj[:, t, :] = obs
    return traj


def hull_area(points):
    """Area of the 2-D convex hull (Graham-style scan over sorted points).

    Degenerate clouds (fewer than 3 distinct points, collinear sets)
    return 0. Input (N,2) float64.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("hull_area expects an (N, 2) array")
    n = pts.shape[0]
    if n < 3:
        return 0.0
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[order]

    def scan(seq):
        stack = []
        for q in seq:
            while len(stack) > 1:
                ox, oy = stack[-2]
                ax, ay = stack[-1]
                if (ax - ox) * (q[1] - oy) - (q[0] - ox) * (ay - oy) <= 0.0:
                    stack.pop()
                else:
                    break
            stack.append((q[0], q[1]))
        return stack

    upper = scan(p)
    lower = scan(p[::-1])
    hull = upper[:-1] + lower[:-1]
    if len(hull) < 3:
        return 0.0
    area2 = 0.0
    for i in range(len(hull)):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % len(hull)]
        area2 += x0 * y1 - x1 * y0
    return abs(area2) / 2.0
