"""Integer least squares: ``argmin_z (r - z)^T S^{-1} (r - z)`` over integer vectors.

The solver follows the usual two-step recipe: decorrelate the covariance with
integer Gauss transformations and pivoting (an LtDL factorization kept
unimodular), then enumerate lattice points depth-first in Schnorr-Euchner
order with a shrinking ellipsoid.  The hot loops are compiled with numba so
Monte-Carlo callers can run thousands of small problems per second.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.linalg import cho_factor, cho_solve

TIE_RTOL = 1e-12


class IlsError(ValueError):
    """Raised for covariances that are not symmetric positive definite."""


@njit(cache=True)
def _round(x):
    return np.floor(x + 0.5)


@njit(cache=True)
def _sgn(x):
    return -1.0 if x <= 0.0 else 1.0


@njit(cache=True)
def _ldl(Q):
    """``Q = L^T diag(d) L`` with ``L`` unit lower triangular."""
    n = Q.shape[0]
    A = Q.copy()
    L = np.zeros((n, n))
    d = np.zeros(n)
    for i in range(n - 1, -1, -1):
        d[i] = A[i, i]
        if d[i] <= 0.0:
            return L, d, False
        a = np.sqrt(d[i])
        for j in range(i + 1):
            L[i, j] = A[i, j] / a
        for j in range(i):
            for k in range(j + 1):
                A[j, k] -= L[i, k] * L[i, j]
        for j in range(i + 1):
            L[i, j] /= L[i, i]
    return L, d, True


@njit(cache=True)
def _gauss(L, Z, Zi, i, j):
    n = L.shape[0]
    mu = _round(L[i, j])
    if mu != 0.0:
        for k in range(i, n):
            L[k, j] -= mu * L[k, i]
        for k in range(n):
            Z[k, j] -= mu * Z[k, i]
            Zi[i, k] += mu * Zi[j, k]


@njit(cache=True)
def _perm(L, d, j, delta, Z, Zi):
    n = L.shape[0]
    eta = d[j] / delta
    lam = d[j + 1] * L[j + 1, j] / delta
    d[j] = eta * d[j + 1]
    d[j + 1] = delta
    for k in range(j):
        a0 = L[j, k]
        a1 = L[j + 1, k]
        L[j, k] = -L[j + 1, j] * a0 + a1
        L[j + 1, k] = eta * a0 + lam * a1
    L[j + 1, j] = lam
    for k in range(j + 2, n):
        t = L[k, j]
        L[k, j] = L[k, j + 1]
        L[k, j + 1] = t
    for k in range(n):
        t = Z[k, j]
        Z[k, j] = Z[k, j + 1]
        Z[k, j + 1] = t
        t = Zi[j, k]
        Zi[j, k] = Zi[j + 1, k]
        Zi[j + 1, k] = t


@njit(cache=True)
def _reduce(Q):
    """Decorrelate ``Q``; returns ``(L, d, Z, Z^{-1}, ok)`` with ``Z^T Q Z = L^T diag(d) L``."""
    n = Q.shape[0]
    L, d, ok = _ldl(Q)
    Z = np.eye(n)
    Zi = np.eye(n)
    if not ok:
        return L, d, Z, Zi, False
    j = n - 2
    k = n - 2
    while j >= 0:
        if j <= k:
            for i in range(j + 1, n):
                _gauss(L, Z, Zi, i, j)
        delta = d[j] + L[j + 1, j] ** 2 * d[j + 1]
        if delta + 1e-6 < d[j + 1]:
            _perm(L, d, j, delta, Z, Zi)
            k = j
            j = n - 2
        else:
            j -= 1
    return L, d, Z, Zi, True


@njit(cache=True)
def _search(L, d, zs, m):
    """Schnorr-Euchner enumeration keeping the ``m`` best lattice points."""
    n = zs.size
    S = np.zeros((n, n))
    dist = np.zeros(n)
    zb = np.zeros(n)
    z = np.zeros(n)
    step = np.zeros(n)
    zn = np.zeros((m, n))
    s = np.full(m, np.inf)
    nn = 0
    imax = 0
    maxdist = np.inf
    nodes = 0
    k = n - 1
    zb[k] = zs[k]
    z[k] = _round(zb[k])
    y = zb[k] - z[k]
    step[k] = _sgn(y)
    while True:
        newdist = dist[k] + y * y / d[k]
        nodes += 1
        if newdist < maxdist:
            if k != 0:
                k -= 1
                dist[k] = newdist
                for i in range(k + 1):
                    S[k, i] = S[k + 1, i] + (z[k + 1] - zb[k + 1]) * L[k + 1, i]
                zb[k] = zs[k] + S[k, k]
                z[k] = _round(zb[k])
                y = zb[k] - z[k]
                step[k] = _sgn(y)
            else:
                if nn < m:
                    if nn == 0 or newdist > s[imax]:
                        imax = nn
                    zn[nn, :] = z
                    s[nn] = newdist
                    nn += 1
                    if nn == m:
                        maxdist = s[imax]
                else:
                    if newdist < s[imax]:
                        zn[imax, :] = z
                        s[imax] = newdist
                        imax = 0
                        for i in range(1, m):
                            if s[i] > s[imax]:
                                imax = i
                    maxdist = s[imax]
                z[0] += step[0]
                y = zb[0] - z[0]
                step[0] = -step[0] - _sgn(step[0])
        else:
            if k == n - 1:
                break
            k += 1
            z[k] += step[k]
            y = zb[k] - z[k]
            step[k] = -step[k] - _sgn(step[k])
    order = np.argsort(s[:nn])
    return zn[order], s[order], nodes


@njit(cache=True)
def _solve_reduced(r, L, d, Z, Zi, m):
    zs = Z.T @ r
    cands, costs, nodes = _search(L, d, zs, m)
    orig = np.empty_like(cands)
    for i in range(cands.shape[0]):
        orig[i] = _round(Zi.T @ cands[i])
    return orig, costs, nodes


@njit(cache=True)
def _pick(orig, costs):
    """Index of the lexicographically smallest candidate among near-ties with the best."""
    best = 0
    tol = TIE_RTOL * max(costs[0], 1e-300)
    for i in range(1, costs.size):
        if costs[i] - costs[0] > tol:
            break
        for j in range(orig.shape[1]):
            if orig[i, j] < orig[best, j]:
                best = i
                break
            if orig[i, j] > orig[best, j]:
                break
    return best


@njit(cache=True)
def _batch_same_cov(R, L, d, Z, Zi, m):
    N, n = R.shape
    out = np.empty((N, n))
    cost = np.empty(N)
    for t in range(N):
        orig, costs, _ = _solve_reduced(R[t], L, d, Z, Zi, m)
        b = _pick(orig, costs)
        out[t] = orig[b]
        cost[t] = costs[b]
    return out, cost


@njit(cache=True)
def _batch_many_cov(R, Ss, m):
    N, n = R.shape
    out = np.empty((N, n))
    cost = np.empty(N)
    ok = np.ones(N, dtype=np.bool_)
    for t in range(N):
        L, d, Z, Zi, good = _reduce(Ss[t])
        if not good:
            ok[t] = False
            out[t] = 0.0
            cost[t] = np.nan
            continue
        orig, costs, _ = _solve_reduced(R[t], L, d, Z, Zi, m)
        b = _pick(orig, costs)
        out[t] = orig[b]
        cost[t] = costs[b]
    return out, cost, ok


# ---------------------------------------------------------------------------
# Public API


@dataclass(frozen=True)
class IlsProblem:
    r: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if r.size == 0:
            S = np.zeros((0, 0))
        elif S.shape != (r.size, r.size):
            raise IlsError(f"covariance shape {S.shape} does not match vector of length {r.size}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "S", S)

    @property
    def n(self) -> int:
        return self.r.size

    def cost(self, z) -> float:
        e = self.r - np.asarray(z, dtype=float)
        return float(e @ cho_solve(_chol(self.S), e))


@dataclass(frozen=True)
class IlsSolution:
    z_hat: np.ndarray
    cost: float
    second_z: Optional[np.ndarray] = None
    second_cost: Optional[float] = None
    nodes: int = 0
    condition_before: float = 1.0
    condition_after: float = 1.0

    @property
    def ratio(self) -> float:
        """Second-best over best cost; large values indicate a reliable fix."""
        if self.second_cost is None:
            return np.inf
        return self.second_cost / max(self.cost, 1e-300)


def _chol(S):
    S = np.asarray(S, dtype=float)
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-14 * max(1.0, np.abs(S).max())):
        raise IlsError("covariance is not symmetric")
    try:
        return cho_factor(0.5 * (S + S.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise IlsError("covariance is not positive definite") from exc


def _sym(S):
    _chol(S)
    return np.ascontiguousarray(0.5 * (S + S.T))


def decorrelate(S):
    """Unimodular ``Z`` and the reduced covariance ``Z^T S Z``.

    ``Z`` is an integer matrix with ``|det Z| = 1`` built from integer Gauss
    transformations and neighbour swaps, so the lattice and the ILS solution
    are preserved while the conditional variances become nearly sorted and the
    correlations shrink.
    """
    S = _sym(S)
    if S.shape[0] == 0:
        return np.zeros((0, 0), dtype=np.int64), S
    _, _, Z, _, ok = _reduce(S)
    if not ok:
        raise IlsError("LtDL factorization failed: covariance is not positive definite")
    Zint = np.rint(Z).astype(np.int64)
    return Zint, Zint.T @ S @ Zint


def solve(problem: IlsProblem, candidates: int = 2) -> IlsSolution:
    """Exact ILS solution; ties go to the lexicographically smallest vector."""
    if problem.n == 0:
        return IlsSolution(z_hat=np.zeros(0, dtype=np.int64), cost=0.0)
    S = _sym(problem.S)
    L, d, Z, Zi, ok = _reduce(S)
    if not ok:
        raise IlsError("LtDL factorization failed: covariance is not positive definite")
    orig, costs, nodes = _solve_reduced(problem.r, L, d, Z, Zi, max(1, candidates))
    best = _pick(orig, costs)
    z_hat = orig[best].astype(np.int64)
    second = [i for i in range(costs.size) if i != best]
    reduced = Z.T @ S @ Z
    return IlsSolution(
        z_hat=z_hat,
        cost=problem.cost(z_hat),
        second_z=orig[second[0]].astype(np.int64) if second else None,
        second_cost=problem.cost(orig[second[0]]) if second else None,
        nodes=int(nodes),
        condition_before=float(np.linalg.cond(S)),
        condition_after=float(np.linalg.cond(reduced)),
    )


def solve_batch(R, S):
    """Solve many problems sharing one covariance; returns ``(Z_hat, costs)``.

    The decorrelation is done once.  Costs are the quadratic forms evaluated in
    the decorrelated basis, equal to the original ones up to rounding.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[1] == 0:
        return np.zeros(R.shape, dtype=np.int64), np.zeros(R.shape[0])
    S = _sym(S)
    L, d, Z, Zi, ok = _reduce(S)
    if not ok:
        raise IlsError("covariance is not positive definite")
    out, cost = _batch_same_cov(np.ascontiguousarray(R), L, d, Z, Zi, 2)
    return out.astype(np.int64), cost


def solve_many(R, Ss):
    """Solve ``R[i]`` under covariance ``Ss[i]``; non-SPD entries come back as NaN cost."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Ss = np.asarray(Ss, dtype=float)
    if R.shape[1] == 0:
        n = R.shape[0]
        return np.zeros(R.shape, dtype=np.int64), np.zeros(n), np.ones(n, dtype=bool)
    Ss = np.ascontiguousarray(0.5 * (Ss + np.swapaxes(Ss, 1, 2)))
    out, cost, ok = _batch_many_cov(np.ascontiguousarray(R), Ss, 2)
    return out.astype(np.int64), cost, ok


MAX_BRUTE_DIM = 8
MAX_BRUTE_POINTS = 20_000_000


def certified_radius(problem: IlsProblem) -> np.ndarray:
    """Per-coordinate box half-widths around ``round(r)`` that must contain the optimum.

    Any minimizer costs no more than the rounded point, and a quadratic form
    bounded by ``chi2`` confines coordinate ``i`` to ``|r_i - z_i| <= sqrt(chi2 S_ii)``.
    """
    z0 = np.floor(problem.r + 0.5)
    chi2 = problem.cost(z0)
    return np.ceil(np.sqrt(chi2 * np.diag(problem.S)) + 0.5).astype(int)


def brute_force(problem: IlsProblem, box_radius=None) -> IlsSolution:
    """Exhaustive minimization over a box centred at ``round(r)``.

    ``box_radius`` may be an integer, a per-coordinate array, or ``None`` for the
    certified radius of :func:`certified_radius`.
    """
    n = problem.n
    if n == 0:
        return IlsSolution(z_hat=np.zeros(0, dtype=np.int64), cost=0.0)
    if n > MAX_BRUTE_DIM:
        raise IlsError(f"brute force limited to n <= {MAX_BRUTE_DIM}, got {n}")
    radius = certified_radius(problem) if box_radius is None else box_radius
    radius = np.broadcast_to(np.asarray(radius, dtype=int), (n,))
    if np.any(radius < 0):
        raise IlsError("box radius must be nonnegative")
    total = float(np.prod(2.0 * radius + 1))
    if total > MAX_BRUTE_POINTS:
        raise IlsError(f"box holds {total:.3g} points, above the {MAX_BRUTE_POINTS} guard")
    center = np.floor(problem.r + 0.5)
    axes = [center[i] + np.arange(-radius[i], radius[i] + 1) for i in range(n)]
    Sinv = np.linalg.inv(_sym(problem.S))
    best_cost = np.inf
    best = None
    chunk = 200_000
    # the first axis varies slowest, so outer chunks are in lexicographic order
    grid = itertools.product(*axes[: max(0, n - 3)])
    tail = np.array(np.meshgrid(*axes[max(0, n - 3):], indexing="ij")).reshape(min(n, 3), -1).T
    for head in grid:
        pts = np.hstack([np.broadcast_to(np.asarray(head, dtype=float), (tail.shape[0], len(head))), tail])
        for start in range(0, pts.shape[0], chunk):
            p = pts[start:start + chunk]
            e = problem.r - p
            c = np.einsum("ij,jk,ik->i", e, Sinv, e)
            i = int(np.argmin(c))
            if c[i] < best_cost * (1 - TIE_RTOL):
                best_cost, best = c[i], p[i]
            elif c[i] <= best_cost * (1 + TIE_RTOL):
                ties = p[c <= best_cost * (1 + TIE_RTOL)]
                cand = np.vstack([best[None], ties])
                best = cand[np.lexsort(cand.T[::-1])[0]]
    z_hat = best.astype(np.int64)
    return IlsSolution(z_hat=z_hat, cost=problem.cost(z_hat), nodes=int(total))
