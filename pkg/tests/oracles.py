"""Independent reference computations used by several test modules."""
import numpy as np


def xlogx(q):
    q = np.asarray(q, dtype=float)
    return np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)


def clustering_objective(Q, P):
    """KL(Q || P) averaged over rows plus sum_k rho_k log rho_k, written out directly."""
    Q, P = np.asarray(Q, float), np.asarray(P, float)
    n = Q.shape[0]
    kl = (xlogx(Q) - Q * np.log(P)).sum() / n
    return kl + xlogx(Q.mean(axis=0)).sum()


def simplex_grid(k, step=1e-3):
    m = int(round(1 / step))
    if k == 2:
        a = np.arange(m + 1) / m
        return np.stack([a, 1 - a], axis=1)
    if k == 3:
        i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
        keep = i + j <= m
        i, j = i[keep], j[keep]
        return np.stack([i, j, m - i - j], axis=1) / m
    raise ValueError("grid oracle supports K <= 3")


def grid_minimum(P, step=1e-3, sweeps=100):
    """Minimum of the clustering objective over Q with rows on a simplex grid.

    One row, or two rows with K=2, are searched exhaustively.  Otherwise
    rows are minimized in turn, each by exhaustive search over the grid,
    until a sweep no longer lowers the objective; the objective is convex
    in Q, so this settles at the grid minimum up to grid resolution.
    """
    P = np.asarray(P, float)
    n, k = P.shape
    grid = simplex_grid(k, step)
    row_term = lambda i: (xlogx(grid).sum(1) - (grid * np.log(P[i])).sum(1)) / n  # noqa: E731
    if n == 1:
        return float((row_term(0) + xlogx(grid).sum(1)).min())
    if n == 2 and k == 2:
        a, b = row_term(0)[:, None], row_term(1)[None, :]
        rho = 0.5 * (grid[:, None, :] + grid[None, :, :])
        return float((a + b + xlogx(rho).sum(-1)).min())
    Q = np.stack([grid[np.argmin(((grid - P[i]) ** 2).sum(1))] for i in range(n)])
    best = clustering_objective(Q, P)
    for _ in range(sweeps):
        for i in range(n):
            rest = Q.sum(0) - Q[i]
            vals = row_term(i) + xlogx((rest[None, :] + grid) / n).sum(1)
            Q[i] = grid[int(np.argmin(vals))]
        value = clustering_objective(Q, P)
        if value >= best - 1e-15:
            return float(min(best, value))
        best = value
    return float(best)


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g
