# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled mirrors of cmlo.kernels.py_core (same signatures, same semantics).

The ensemble forward/rollout kernels fuse the member loops that dominate
CEM planning time; hull_area removes Python overhead from the scan stack.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log1p

cnp.import_array()

BACKEND = "cython"


cdef inline double _softplus(double x) nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _clamp_lv(double lv, double lv_min, double lv_max) nogil:
    lv = lv_max - _softplus(lv_max - lv)
    return lv_min + _softplus(lv - lv_min)


cdef void _members_forward_c(
    double[:, :, ::1] w1t, double[:, ::1] b1,
    double[:, :, ::1] w2t, double[:, ::1] b2,
    double[:, :, ::1] w3t, double[:, ::1] b3,
    double[::1] in_mu, double[::1] in_sigma,
    double[:, ::1] obs, double[:, ::1] act,
    double lv_min, double lv_max,
    double[:, :, ::1] mean_n, double[:, :, ::1] logvar,
    double[::1] xn, double[::1] h1, double[::1] h2,
) nogil:
    # weights are pre-transposed: w1t (K,H,I), w2t (K,H,H), w3t (K,2D,H)
    cdef Py_ssize_t K = w1t.shape[0]
    cdef Py_ssize_t H = w1t.shape[1]
    cdef Py_ssize_t I = w1t.shape[2]
    cdef Py_ssize_t D2 = w3t.shape[1]
    cdef Py_ssize_t D = D2 // 2
    cdef Py_ssize_t B = obs.shape[0]
    cdef Py_ssize_t A = act.shape[1]
    cdef Py_ssize_t k, b, i, j
    cdef double acc
    for b in range(B):
        for i in range(D):
            xn[i] = (obs[b, i] - in_mu[i]) / in_sigma[i]
        for i in range(A):
            xn[D + i] = (act[b, i] - in_mu[D + i]) / in_sigma[D + i]
        for k in range(K):
            for j in range(H):
                acc = b1[k, j]
                for i in range(I):
                    acc += xn[i] * w1t[k, j, i]
                h1[j] = acc / (1.0 + fabs(acc))
            for j in range(H):
                acc = b2[k, j]
                for i in range(H):
                    acc += h1[i] * w2t[k, j, i]
                h2[j] = acc / (1.0 + fabs(acc))
            for j in range(D2):
                acc = b3[k, j]
                for i in range(H):
                    acc += h2[i] * w3t[k, j, i]
                if j < D:
                    mean_n[k, b, j] = acc
                else:
                    logvar[k, b, j - D] = _clamp_lv(acc, lv_min, lv_max)


cdef _transposed(w):
    return np.ascontiguousarray(np.transpose(np.asarray(w), (0, 2, 1)))


def ensemble_members_forward(
    w1, b1, w2, b2, w3, b3,
    in_mu, in_sigma, obs, act,
    double lv_min, double lv_max,
):
    """See py_core.ensemble_members_forward."""
    cdef double[:, :, ::1] w1t = _transposed(w1)
    cdef double[:, :, ::1] w2t = _transposed(w2)
    cdef double[:, :, ::1] w3t = _transposed(w3)
    cdef double[:, ::1] b1v = np.ascontiguousarray(b1)
    cdef double[:, ::1] b2v = np.ascontiguousarray(b2)
    cdef double[:, ::1] b3v = np.ascontiguousarray(b3)
    cdef double[::1] imu = np.ascontiguousarray(in_mu)
    cdef double[::1] isg = np.ascontiguousarray(in_sigma)
    cdef double[:, ::1] o = np.ascontiguousarray(obs, dtype=np.float64)
    cdef double[:, ::1] a = np.ascontiguousarray(act, dtype=np.float64)
    cdef Py_ssize_t K = w1t.shape[0], B = o.shape[0]
    cdef Py_ssize_t H = w1t.shape[1], I = w1t.shape[2]
    cdef Py_ssize_t D = w3t.shape[1] // 2
    mean_n = np.empty((K, B, D), dtype=np.float64)
    logvar = np.empty((K, B, D), dtype=np.float64)
    scratch_x = np.empty(I, dtype=np.float64)
    scratch_1 = np.empty(H, dtype=np.float64)
    scratch_2 = np.empty(H, dtype=np.float64)
    cdef double[:, :, ::1] mn = mean_n
    cdef double[:, :, ::1] lv = logvar
    cdef double[::1] sx = scratch_x
    cdef double[::1] s1 = scratch_1
    cdef double[::1] s2 = scratch_2
    with nogil:
        _members_forward_c(w1t, b1v, w2t, b2v, w3t, b3v, imu, isg, o, a,
                           lv_min, lv_max, mn, lv, sx, s1, s2)
    return mean_n, logvar


def ensemble_step(
    w1, b1, w2, b2, w3, b3,
    in_mu, in_sigma, out_mu, out_sigma,
    double lv_min, double lv_max, predict_delta,
    obs, act,
):
    """See py_core.ensemble_step."""
    mean_n, logvar = ensemble_members_forward(
        w1, b1, w2, b2, w3, b3, in_mu, in_sigma, obs, act, lv_min, lv_max
    )
    out_mu = np.asarray(out_mu)
    out_sigma = np.asarray(out_sigma)
    target = mean_n * out_sigma + out_mu
    member_next = np.asarray(obs)[None, :, :] + target if predict_delta else target
    member_var = np.exp(logvar) * out_sigma ** 2
    return member_next.mean(axis=0), member_next, member_var


def ensemble_rollout(
    w1, b1, w2, b2, w3, b3,
    in_mu, in_sigma, out_mu, out_sigma,
    double lv_min, double lv_max, predict_delta,
    start_obs, actions,
):
    """See py_core.ensemble_rollout."""
    cdef double[:, :, ::1] w1t = _transposed(w1)
    cdef double[:, :, ::1] w2t = _transposed(w2)
    cdef double[:, :, ::1] w3t = _transposed(w3)
    cdef double[:, ::1] b1v = np.ascontiguousarray(b1)
    cdef double[:, ::1] b2v = np.ascontiguousarray(b2)
    cdef double[:, ::1] b3v = np.ascontiguousarray(b3)
    cdef double[::1] imu = np.ascontiguousarray(in_mu)
    cdef double[::1] isg = np.ascontiguousarray(in_sigma)
    cdef double[::1] omu = np.ascontiguousarray(out_mu)
    cdef double[::1] osg = np.ascontiguousarray(out_sigma)
    cdef double[:, ::1] obs0 = np.ascontiguousarray(start_obs, dtype=np.float64)
    cdef double[:, :, ::1] acts = np.ascontiguousarray(actions, dtype=np.float64)
    cdef Py_ssize_t K = w1t.shape[0]
    cdef Py_ssize_t HU = w1t.shape[1]
    cdef Py_ssize_t I = w1t.shape[2]
    cdef Py_ssize_t D2 = w3t.shape[1]
    cdef Py_ssize_t D = D2 // 2
    cdef Py_ssize_t B = obs0.shape[0]
    cdef Py_ssize_t A = acts.shape[2]
    cdef Py_ssize_t horizon = acts.shape[1]
    cdef bint delta_mode = bool(predict_delta)
    traj = np.empty((B, horizon, D), dtype=np.float64)
    cdef double[:, :, ::1] tr = traj
    scratch_x = np.empty(I, dtype=np.float64)
    scratch_1 = np.empty(HU, dtype=np.float64)
    scratch_2 = np.empty(HU, dtype=np.float64)
    cur = np.array(obs0, dtype=np.float64)
    cdef double[:, ::1] cv = cur
    cdef double[::1] sx = scratch_x
    cdef double[::1] s1 = scratch_1
    cdef double[::1] s2 = scratch_2
    cdef Py_ssize_t t, b, k, i, j
    cdef double acc, m
    with nogil:
        for t in range(horizon):
            for b in range(B):
                for i in range(D):
                    sx[i] = (cv[b, i] - imu[i]) / isg[i]
                for i in range(A):
                    sx[D + i] = (acts[b, t, i] - imu[D + i]) / isg[D + i]
                for j in range(D):
                    tr[b, t, j] = 0.0
                for k in range(K):
                    for j in range(HU):
                        acc = b1v[k, j]
                        for i in range(I):
                            acc += sx[i] * w1t[k, j, i]
                        s1[j] = acc / (1.0 + fabs(acc))
                    for j in range(HU):
                        acc = b2v[k, j]
                        for i in range(HU):
                            acc += s1[i] * w2t[k, j, i]
                        s2[j] = acc / (1.0 + fabs(acc))
                    for j in range(D):
                        acc = b3v[k, j]
                        for i in range(HU):
                            acc += s2[i] * w3t[k, j, i]
                        tr[b, t, j] += acc
                for j in range(D):
                    m = (tr[b, t, j] / K) * osg[j] + omu[j]
                    if delta_mode:
                        m += cv[b, j]
                    tr[b, t, j] = m
                    cv[b, j] = m
    return traj


def hull_area(points):
    """See py_core.hull_area."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("hull_area expects an (N, 2) array")
    cdef Py_ssize_t n = pts.shape[0]
    if n < 3:
        return 0.0
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    cdef double[:, ::1] p = np.ascontiguousarray(pts[order])
    hull_buf = np.empty((2 * n, 2), dtype=np.float64)
    cdef double[:, ::1] hull = hull_buf
    cdef Py_ssize_t m = 0, start, idx
    cdef double ox, oy, ax, ay, qx, qy, area2
    with nogil:
        # ascending pass
        for idx in range(n):
            qx = p[idx, 0]
            qy = p[idx, 1]
            while m > 1:
                ox = hull[m - 2, 0]
                oy = hull[m - 2, 1]
                ax = hull[m - 1, 0]
                ay = hull[m - 1, 1]
                if (ax - ox) * (qy - oy) - (qx - ox) * (ay - oy) <= 0.0:
                    m -= 1
                else:
                    break
            hull[m, 0] = qx
            hull[m, 1] = qy
            m += 1
        m -= 1  # drop last point of the first chain
        start = m
        # descending pass
        for idx in range(n - 1, -1, -1):
            qx = p[idx, 0]
            qy = p[idx, 1]
            while m > start + 1:
                ox = hull[m - 2, 0]
                oy = hull[m - 2, 1]
                ax = hull[m - 1, 0]
                ay = hull[m - 1, 1]
                if (ax - ox) * (qy - oy) - (qx - ox) * (ay - oy) <= 0.0:
                    m -= 1
                else:
                    break
            hull[m, 0] = qx
            hull[m, 1] = qy
            m += 1
        m -= 1  # drop last point of the second chain (== first point overall)
        area2 = 0.0
        if m >= 3:
            for idx in range(m):
                area2 += (hull[idx, 0] * hull[(idx + 1) % m, 1]
                          - hull[(idx + 1) % m, 0] * hull[idx, 1])
    if m < 3:
        return 0.0
    return fabs(area2) / 2.0
