"""Dense two-phase tableau simplex for small linear programs.

Solves ``min c^T x  s.t.  A x = b, x >= 0`` with Bland's rule (no cycling).
Intended for problems with at most a few hundred variables.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    fun: float | None
    infeasibility: float


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]


def _run(T, basis, ncols, tol, max_iter):
    """Pivot until optimal; ``T``'s last row holds reduced costs. Returns False if unbounded."""
    m = T.shape[0] - 1
    for _ in range(max_iter):
        costs = T[m, :ncols]
        entering = np.flatnonzero(costs < -tol)
        if entering.size == 0:
            return True
        col = int(entering[0])
        column = T[:m, col]
        pos = np.flatnonzero(column > tol)
        if pos.size == 0:
            return False
        ratios = T[pos, -1] / column[pos]
        best = ratios.min()
        ties = pos[ratios <= best + tol * max(1.0, abs(best))]
        row = int(min(ties, key=lambda i: basis[i]))
        _pivot(T, row, col)
        basis[row] = col
    raise RuntimeError("simplex iteration limit reached")


def simplex(c, A_eq, b_eq, tol=1e-9, max_iter=5000):
    c = np.asarray(c, dtype=float)
    A = np.array(A_eq, dtype=float, ndmin=2)
    b = np.array(b_eq, dtype=float).ravel()
    m, n = A.shape
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0

    # phase I: artificials n..n+m-1
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, n:n + m] = 1.0
    T[m] -= T[:m].sum(axis=0)
    basis = list(range(n, n + m))
    _run(T, basis, n + m, tol, max_iter)
    infeas = float(-T[m, -1])
    if infeas > tol:
        return LPResult("infeasible", None, None, infeas)

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= n:
            cand = np.flatnonzero(np.abs(T[i, :n]) > tol)
            if cand.size:
                _pivot(T, i, int(cand[0]))
                basis[i] = int(cand[0])
                keep.append(i)
        else:
            keep.append(i)
    T = np.vstack([T[keep][:, list(range(n)) + [n + m]], np.zeros((1, n + 1))])
    basis = [basis[i] for i in keep]
    mm = len(keep)

    # phase II
    T[mm, :n] = c
    for i, j in enumerate(basis):
        if T[mm, j] != 0.0:
            T[mm] -= T[mm, j] * T[i]
    if not _run(T, basis, n, tol, max_iter):
        return LPResult("unbounded", None, None, infeas)
    x = np.zeros(n)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    return LPResult("optimal", x, float(c @ x), infeas)


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, free=(), tol=1e-9):
    """``min c^T x`` with ``A_ub x <= b_ub``, ``A_eq x = b_eq``; ``x >= 0`` except indices in ``free``.

    Free variables are split into positive and negative parts; inequalities get
    slack columns. Returns an :class:`LPResult` over the original variables.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    free = sorted(set(free))
    blocks_ub = [] if A_ub is None else [np.array(A_ub, dtype=float, ndmin=2)]
    blocks_eq = [] if A_eq is None else [np.array(A_eq, dtype=float, ndmin=2)]

    def expand(M):
        return np.hstack([M, -M[:, free]]) if free else M

    nf = n + len(free)
    rows, rhs = [], []
    k_ub = 0
    if blocks_ub:
        Mu = expand(blocks_ub[0])
        k_ub = Mu.shape[0]
        rows.append(np.hstack([Mu, np.eye(k_ub)]))
        rhs.append(np.asarray(b_ub, dtype=float).ravel())
    if blocks_eq:
        Me = expand(blocks_eq[0])
        rows.append(np.hstack([Me, np.zeros((Me.shape[0], k_ub))]))
        rhs.append(np.asarray(b_eq, dtype=float).ravel())
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    cc = np.concatenate([c, -c[free], np.zeros(k_ub)])
    res = simplex(cc, A, b, tol=tol)
    if res.x is None:
        return res
    x = res.x[:n].copy()
    if free:
        x[free] -= res.x[n:nf]
    return LPResult(res.status, x, float(c @ x), res.infeasibility)
