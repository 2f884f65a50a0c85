"""Independent brute-force reference implementations used by the tests."""
import itertools

import numpy as np


def batch_posterior_mean(times, y, F, V, W, mu0, C0):
    """Posterior mean of all states by assembling the joint Gaussian directly.

    theta = m + A z with z = (theta_0 - mu0, w_1, ..., w_{n-1}) ~ N(0, blockdiag(C0, W, ...)),
    y = H theta + v. Conditioning a joint Gaussian, no recursion.
    """
    n = len(times)
    y = np.asarray(y, float).reshape(n, -1)
    d = y.shape[1]
    G = [np.array([[1.0, dt], [0.0, 1.0]]) for dt in np.diff(times)]
    A = np.zeros((2 * n, 2 * n))
    for k in range(n):
        for j in range(k + 1):
            M = np.eye(2)
            for i in range(j, k):
                M = G[i] @ M
            A[2 * k:2 * k + 2, 2 * j:2 * j + 2] = M
    D = np.zeros((2 * n, 2 * n))
    D[:2, :2] = C0
    for k in range(1, n):
        D[2 * k:2 * k + 2, 2 * k:2 * k + 2] = W
    m = A[:, :2] @ mu0
    S = A @ D @ A.T
    H = np.zeros((d * n, 2 * n))
    R = np.zeros((d * n, d * n))
    for k in range(n):
        H[d * k:d * k + d, 2 * k:2 * k + 2] = F[:d]
        R[d * k:d * k + d, d * k:d * k + d] = V[:d, :d]
    K = S @ H.T @ np.linalg.inv(H @ S @ H.T + R)
    return (m + K @ (y.ravel() - H @ m)).reshape(n, 2)


def monotone_paths(n, m):
    """Every boundary-respecting monotone warping path from (0,0) to (n-1,m-1)."""
    def rec(i, j):
        if (i, j) == (n - 1, m - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                for rest in rec(a, b):
                    yield [(i, j)] + rest
    yield from rec(0, 0)


def brute_dtw_cost(a, b):
    return min(sum(abs(a[i] - b[j]) for i, j in p) for p in monotone_paths(len(a), len(b)))


def brute_ks(x, y):
    """D+ = max over pooled points of F_x - F_y, D- the reverse, by direct counting."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    t = np.concatenate([x, y])[:, None]
    fx = (x[None, :] <= t).sum(axis=1) / len(x)
    fy = (y[None, :] <= t).sum(axis=1) / len(y)
    return max(0.0, float(np.max(fx - fy))), max(0.0, float(np.max(fy - fx)))


def brute_viterbi(lattice):
    """Best state sequence by enumerating all of them; None where a step has no candidates."""
    choices = [range(len(s)) if len(s) else [None] for s in lattice.segs]
    best, best_path = -np.inf, None
    for path in itertools.product(*choices):
        sc = 0.0
        for t, k in enumerate(path):
            if k is None:
                continue
            sc += lattice.emissions[t][k]
            if t > 0 and path[t - 1] is not None:
                sc += lattice.transitions[t][path[t - 1], k]
        if sc > best:
            best, best_path = sc, list(path)
    return best_path, best
