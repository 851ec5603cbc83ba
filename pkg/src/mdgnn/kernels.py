"""Hot numeric kernels with numba and numpy implementations.

Each public kernel dispatches to ``*_numba`` or ``*_numpy`` depending on
:data:`mdgnn._accel.USE_NUMBA`.  Both variants are importable directly so
tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# per-transmitter Lagrange multiplier
# ---------------------------------------------------------------------------
#
# Solve for mu >= 0 such that  sum_j e_j / (lam_j + mu)^2 <= p  with equality
# whenever mu > 0.  This is the inner problem of every per-AP power
# constrained quadratic update (WMMSE transmit step, scalar power step).


def multiplier_numpy(lam, energy, p_max, rtol=1e-13, max_iter=200):
    lam = np.asarray(lam, dtype=np.float64)
    energy = np.asarray(energy, dtype=np.float64)
    p_max = np.asarray(p_max, dtype=np.float64)
    R = lam.shape[0]
    mu = np.zeros(R)
    with np.errstate(divide="ignore", invalid="ignore"):
        f0 = np.where(energy > 0.0, energy / lam**2, 0.0).sum(axis=1)
    active = ~(f0 <= p_max)
    if not active.any():
        return mu
    lo = np.zeros(R)
    hi = np.sqrt(energy.sum(axis=1) / p_max)
    todo = active.copy()
    for _ in range(max_iter):
        if not todo.any():
            break
        mid = 0.5 * (lo + hi)
        f = (energy / (lam + mid[:, None]) ** 2).sum(axis=1)
        over = f > p_max
        lo = np.where(todo & over, mid, lo)
        hi = np.where(todo & ~over, mid, hi)
        todo &= (hi - lo) > rtol * hi
    mu[active] = hi[active]
    return mu


@njit
def multiplier_numba(lam, energy, p_max, rtol=1e-13, max_iter=200):
    R, N = lam.shape
    mu = np.zeros(R)
    for r in range(R):
        f0 = 0.0
        tot = 0.0
        for j in range(N):
            tot += energy[r, j]
            if energy[r, j] > 0.0:
                f0 += energy[r, j] / lam[r, j] ** 2
        if f0 <= p_max[r]:
            continue
        lo = 0.0
        hi = np.sqrt(tot / p_max[r])
        for _ in range(max_iter):
            if not (hi - lo) > rtol * hi:
                break
            mid = 0.5 * (lo + hi)
            f = 0.0
            for j in range(N):
                f += energy[r, j] / (lam[r, j] + mid) ** 2
            if f > p_max[r]:
                lo = mid
            else:
                hi = mid
        mu[r] = hi
    return mu


def power_multiplier(lam, energy, p_max, rtol=1e-13, max_iter=200):
    """Smallest feasible multiplier for a batch of separable quadratic problems.

    ``lam``    [R, N] nonnegative curvatures (eigenvalues),
    ``energy`` [R, N] squared projections of the linear term,
    ``p_max``  [R] power budgets.

    Returns ``mu`` [R] with ``sum(energy / (lam + mu)**2) <= p_max``; zero when
    the unconstrained minimiser is already feasible.  Bisection stops at
    relative width ``rtol`` and always reports the upper (feasible) end.
    """
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    energy = np.ascontiguousarray(energy, dtype=np.float64)
    p_max = np.ascontiguousarray(np.broadcast_to(p_max, lam.shape[:1]), dtype=np.float64)
    if USE_NUMBA:
        return multiplier_numba(lam, energy, p_max, rtol, max_iter)
    return multiplier_numpy(lam, energy, p_max, rtol, max_iter)


# ---------------------------------------------------------------------------
# masked neighbour aggregation
# ---------------------------------------------------------------------------
#
# Canonical layout: the aggregated axis has been moved so that
#   x    [B, C, P, D, Q]
#   mask [B, P, D, Q, D]      mask[b, p, i, q, j] weights neighbour j of edge i
# and
#   out[b, c, p, i, q] = sum_j mask[b, p, i, q, j] * x[b, c, p, j, q].


def masked_sum_numpy(mask, x):
    return np.einsum("bpiqj,bcpjq->bcpiq", mask, x, optimize=False)


def masked_outer_numpy(g, x):
    return np.einsum("bcpiq,bcpjq->bpiqj", g, x, optimize=False)


@njit
def masked_sum_numba(mask, x):
    B, C, P, D, Q = x.shape
    out = np.zeros((B, C, P, D, Q))
    for b in range(B):
        for p in range(P):
            for i in range(D):
                for q in range(Q):
                    for j in range(D):
                        m = mask[b, p, i, q, j]
                        if m != 0.0:
                            for c in range(C):
                                out[b, c, p, i, q] += m * x[b, c, p, j, q]
    return out


@njit
def masked_outer_numba(g, x):
    B, C, P, D, Q = x.shape
    out = np.zeros((B, P, D, Q, D))
    for b in range(B):
        for p in range(P):
            for i in range(D):
                for q in range(Q):
                    for j in range(D):
                        acc = 0.0
                        for c in range(C):
                            acc += g[b, c, p, i, q] * x[b, c, p, j, q]
                        out[b, p, i, q, j] = acc
    return out


def masked_sum(mask, x):
    """Neighbour sum ``out[.., i, ..] = sum_j mask[.., i, .., j] x[.., j, ..]``."""
    if USE_NUMBA:
        return masked_sum_numba(np.ascontiguousarray(mask, dtype=np.float64),
                                np.ascontiguousarray(x, dtype=np.float64))
    return masked_sum_numpy(mask, x)


def masked_outer(g, x):
    """Gradient of :func:`masked_sum` with respect to the mask."""
    if USE_NUMBA:
        return masked_outer_numba(np.ascontiguousarray(g, dtype=np.float64),
                                  np.ascontiguousarray(x, dtype=np.float64))
    return masked_outer_numpy(g, x)
