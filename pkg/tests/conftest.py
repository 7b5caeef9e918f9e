import numpy as np
import pytest

from cmlo import mdp as tab


def random_policy(rng, n_states, n_actions):
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    return tab.TabularPolicy(probs)


def brute_force_hull_area(points):
    """O(n^3) hull-area oracle: an ordered pair (i, j) lies on the hull
    iff every other point sits on one side of the line through it; the
    boundary points are then angle-sorted around their centroid and fed
    to the shoelace formula. Independent of the scan implementation."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    n = len(pts)
    if n < 3:
        return 0.0
    on_hull = set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            d = pts[j] - pts[i]
            cross = d[0] * (pts[:, 1] - pts[i, 1]) - d[1] * (pts[:, 0] - pts[i, 0])
            if np.all(cross >= 0.0) or np.all(cross <= 0.0):
                on_hull.add(i)
                on_hull.add(j)
    hull = pts[sorted(on_hull)]
    if len(hull) < 3:
        return 0.0
    centroid = hull.mean(axis=0)
    rel = hull - centroid
    angles = np.arctan2(rel[:, 1], rel[:, 0])
    radii = np.hypot(rel[:, 0], rel[:, 1])
    order = np.lexsort((radii, angles))
    h = hull[order]
    area2 = 0.0
    for i in range(len(h)):
        x0, y0 = h[i]
        x1, y1 = h[(i + 1) % len(h)]
        area2 += x0 * y1 - x1 * y0
    return abs(area2) / 2.0


def hull_case_corpus(rng, n_cases):
    """Mixed random/degenerate 2-D point sets for hull testing."""
    cases = []
    for i in range(n_cases):
        kind = i % 5
        if kind == 0:
            cases.append(rng.normal(size=(rng.integers(3, 60), 2)))
        elif kind == 1:
            cases.append(rng.uniform(-5, 5, size=(rng.integers(3, 200), 2)))
        elif kind == 2:  # exact collinear (integer coordinates)
            k = int(rng.integers(3, 12))
            ts = rng.integers(-10, 10, size=k).astype(np.float64)
            d = rng.integers(1, 4, size=2).astype(np.float64)
            cases.append(np.stack([ts * d[0], ts * d[1]], axis=1))
        elif kind == 3:  # duplicates
            base = rng.integers(-4, 4, size=(rng.integers(2, 8), 2)).astype(np.float64)
            reps = rng.integers(0, len(base), size=10)
            cases.append(np.concatenate([base, base[reps]]))
        else:  # grid points, many collinear subsets
            g = int(rng.integers(2, 5))
            xs, ys = np.meshgrid(np.arange(g, dtype=np.float64), np.arange(g, dtype=np.float64))
            cases.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return cases


@pytest.fixture(scope="session")
def linear_system_ensemble():
    """Ensemble fitted to a known 2-D linear system, shared across tests."""
    from cmlo import dynamics

    rng = np.random.default_rng(7)
    a_mat = np.array([[0.9, 0.1], [-0.05, 0.95]])
    b_mat = np.array([[0.0], [0.1]])
    n = 1500
    obs = rng.uniform(-1, 1, size=(n, 2))
    act = rng.uniform(-1, 1, size=(n, 1))
    nxt = obs @ a_mat.T + act @ b_mat.T
    config = dynamics.TrainConfig(
        ensemble_size=1, hidden=32, epochs=300, batch_size=128, seed=3
    )
    ensemble = dynamics.train_ensemble((obs, act, nxt), config)
    return dict(ensemble=ensemble, a_mat=a_mat, b_mat=b_mat, rng_seed=7)
