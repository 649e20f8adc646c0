"""Convex-hull vertex analysis of event tables and the ReLU/linear expressibility gap.

A row ``p_i`` of ``P`` is a vertex when it is not a convex combination of the
other rows. With one student node per event, all-vertex tables let ReLU
layers reproduce the identity exactly, while a linear ladder is capped by the
rank of its narrowest layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Ladder, WeightSet, edge_input, region_forward
from .lp import linprog

FEAS_TOL = 1e-9


class HullError(ValueError):
    pass


@dataclass
class Certificate:
    """Hyperplane with ``w.p_i + b = high`` and ``w.p_j + b <= -margin`` for ``j != i``."""

    w: np.ndarray
    b: float
    margin: float

    def scores(self, P):
        return P @ self.w + self.b


@dataclass
class VertReport:
    vertex_flags: np.ndarray
    infeasibility: np.ndarray
    certificates: dict = field(default_factory=dict)

    @property
    def vert_count(self):
        return int(self.vertex_flags.sum())

    @property
    def all_vert(self):
        return self.vert_count == self.vertex_flags.size

    def to_json(self):
        return json.dumps({
            "vertex_flags": self.vertex_flags.tolist(),
            "vert_count": self.vert_count,
            "all_vert": self.all_vert,
            "certificates": {str(i): {"w": c.w.tolist(), "b": c.b, "margin": c.margin}
                             for i, c in sorted(self.certificates.items())},
        }, sort_keys=True)


def _normalize(w, b, s_i, s_other, high, low):
    a = (high + low) / (s_i - s_other)
    return a * w, a * b + (high - a * s_i)


def in_convex_hull(p, Q, tol=FEAS_TOL):
    """Phase-I infeasibility of ``p = Q^T a, a >= 0, sum a = 1`` (0 when feasible)."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape[0] == 0:
        return np.inf
    A = np.vstack([Q.T, np.ones(Q.shape[0])])
    rhs = np.concatenate([p, [1.0]])
    res = linprog(np.zeros(Q.shape[0]), A_eq=A, b_eq=rhs, tol=tol)
    return 0.0 if res.status == "optimal" else res.infeasibility


def separating_hyperplane(P, i, high=1.0, low=0.5):
    """Certificate that row ``i`` is a vertex, or ``None`` if the LP is infeasible.

    Finds the smallest-L1 ``(w, b)`` with ``w.p_i + b >= 1`` and
    ``w.p_j + b <= -1`` for ``j != i``, then rescales it to ``high`` / ``-low``.
    """
    P = np.asarray(P, dtype=float)
    m, d = P.shape
    others = [j for j in range(m) if j != i]
    if not others:
        return Certificate(np.zeros(d), float(high), float(min(high, low)))
    # variables: w+ (d), w- (d), b (free)
    ones = np.ones((len(others), 1))
    A_ub = np.vstack([
        np.hstack([-P[i][None, :], P[i][None, :], -np.ones((1, 1))]),
        np.hstack([P[others], -P[others], ones]),
    ])
    b_ub = -np.ones(1 + len(others))
    c = np.concatenate([np.ones(2 * d), [0.0]])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, free=[2 * d])
    if res.status != "optimal":
        return None
    w = res.x[:d] - res.x[d:2 * d]
    b = float(res.x[2 * d])
    s = P @ w + b
    s_other = float(np.max(s[others]))
    w, b = _normalize(w, b, float(s[i]), s_other, high, low)
    s = P @ w + b
    margin = float(min(s[i], -np.max(s[others])))
    return Certificate(w, float(b), margin)


def vertex_set(P, tol=FEAS_TOL, certificates=True):
    """Classify every row of ``P`` as a vertex of ``Conv(rows)`` or not.

    Duplicate rows are never vertices: each lies in the hull of its twin.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m = P.shape[0]
    flags = np.zeros(m, dtype=bool)
    infeas = np.zeros(m)
    certs = {}
    for i in range(m):
        others = np.delete(P, i, axis=0)
        infeas[i] = in_convex_hull(P[i], others, tol)
        flags[i] = infeas[i] > tol
        if flags[i] and certificates:
            cert = separating_hyperplane(P, i)
            if cert is not None:
                certs[i] = cert
    return VertReport(flags, infeas, certs)


def vert_invariance_check(P, F, rank_tol=1e-9):
    """Compare vertex flags of ``P F`` and ``P`` for a full-row-rank ``F``."""
    P = np.asarray(P, dtype=float)
    F = np.asarray(F, dtype=float)
    sv = np.linalg.svd(F, compute_uv=False)
    if F.shape[0] > F.shape[1] or sv.min() <= rank_tol:
        raise HullError("F is not full row rank; vertex invariance does not apply")
    a = vertex_set(P, certificates=False).vertex_flags
    b = vertex_set(P @ F, certificates=False).vertex_flags
    mismatch = np.flatnonzero(a != b).tolist()
    return not mismatch, {"flags_P": a.tolist(), "flags_PF": b.tolist(), "mismatch": mismatch,
                          "min_singular_value": float(sv.min())}


# --------------------------------------------------------------------------
# ReLU construction


def construct_identity_weights(tables, alpha, exact=True):
    """Bias-augmented weights into ``alpha`` that give ``F_alpha = I`` when every child has ``F = I``.

    Column ``i`` of each child block is a separating hyperplane for row ``i``
    of ``P_alpha,beta`` scaled so the row scores ``1/k`` and every other row
    scores at most ``-1/(2k)``, with ``k`` children. Summed over children the
    raw activation has unit diagonal and off-diagonal at most ``-1/2``.
    With ``exact`` the last child's bias is nudged until the computed diagonal
    is exactly 1 in floating point.
    """
    kids = [b for (a, b) in tables if a == alpha]
    if not kids:
        raise HullError(f"{alpha!r} has no children")
    k = len(kids)
    W = {}
    inputs = []
    for b in kids:
        P = tables[(alpha, b)].P
        m_a = P.shape[0]
        Wb = np.zeros((P.shape[1] + 1, m_a))
        for i in range(m_a):
            others = np.delete(P, i, axis=0)
            if in_convex_hull(P[i], others) <= FEAS_TOL:
                raise HullError(f"table P[{alpha},{b}] is not all-vert: row {i} is inside the hull of the others")
            cert = separating_hyperplane(P, i, high=1.0 / k, low=1.0 / (2 * k))
            if cert is None:
                raise HullError(f"no separating hyperplane for row {i} of P[{alpha},{b}]")
            Wb[:-1, i] = cert.w
            Wb[-1, i] = cert.b
        W[(b, alpha)] = Wb
        inputs.append(edge_input(P, np.eye(P.shape[1]), True))
    if exact:
        _exact_diagonal(inputs, [W[(b, alpha)] for b in kids])
    return W


def _exact_diagonal(inputs, Ws):
    """Adjust biases (and if needed one weight) in place until the raw diagonal is exactly 1.0.

    A first correction removes the analytic gap; what remains is rounding, so
    nearby values of the last child's bias are tried in order of distance,
    nested inside nearby values of a second entry: the first child's bias
    when there are several children, otherwise the weight on the largest
    input of that row (a lone bias cannot always cancel the rounding).
    """
    last = Ws[-1]

    def diag():
        return np.diag(region_forward(inputs, Ws, "linear")[0])

    last[-1] += 1.0 - diag()
    d = diag()
    delta = np.spacing(1.0) / 4
    inner = sorted(range(-64, 65), key=lambda k: (abs(k), k))
    for i in np.flatnonzero(d != 1.0):
        if len(Ws) > 1:
            outer_M, outer_r = Ws[0], -1
        else:
            outer_M, outer_r = Ws[0], int(np.argmax(np.abs(inputs[0][i, :-1])))
        b_outer, b_last = outer_M[outer_r, i], last[-1, i]
        found = False
        for k0 in inner:
            outer_M[outer_r, i] = b_outer + k0 * delta
            for k in inner:
                last[-1, i] = b_last + k * delta
                if diag()[i] == 1.0:
                    found = True
                    break
            if found:
                break
        if not found:
            outer_M[outer_r, i], last[-1, i] = b_outer, b_last


def construct_ladder_identity_weights(tables):
    """Identity-producing weights for every non-leaf region of an all-vert ladder with ``n = m``."""
    ladder = Ladder.from_tables(tables)
    W = {}
    for r in ladder.order:
        if ladder.children[r]:
            W.update(construct_identity_weights(tables, r))
    return WeightSet(W, bias_augmented=True)


# --------------------------------------------------------------------------
# linear bound


def linear_lower_bound(tables, n, bias_augmented=False):
    """Rank bound ``r`` of any linear ladder and the floor ``max(0, m_w - r)`` on ``||F_w - I||^2``.

    For every level ``l`` the cut is the set of regions at level ``<= l`` whose
    parents all sit above ``l``; the top activation factors through the cut,
    so its rank is at most ``sum min(m, n)`` over the cut (plus one shared
    constant column when biases are used).
    """
    ladder = Ladder.from_tables(tables)
    level = ladder.levels()
    root = ladder.root
    r = ladder.m[root]
    for lv in range(level[root]):
        cut = [b for b in ladder.order
               if level[b] <= lv and ladder.parents[b] and all(level[a] > lv for a in ladder.parents[b])]
        cap = sum(min(ladder.m[b], n.get(b, ladder.m[b])) for b in cut)
        if bias_augmented and lv > 0:
            cap += 1
        r = min(r, cap)
    return r, max(0, ladder.m[root] - r)


def svd_floor(m, r):
    """Squared Frobenius error of the best rank-``r`` approximation of ``I_m``, by truncated SVD."""
    U, s, Vt = np.linalg.svd(np.eye(m))
    approx = (U[:, :r] * s[:r]) @ Vt[:r]
    return float(np.sum((np.eye(m) - approx) ** 2))


def linear_floor_weights(tables, n):
    """Linear weights attaining the rank floor on a ladder ``leaves -> h -> root``.

    The top activation is ``A W_h W_w`` with ``A = P_wh [P_hb ...]``; choosing
    ``A W_h = Q`` for the leading ``n_h`` left singular vectors of ``A`` and
    ``W_w = Q^T`` gives the orthogonal projector ``Q Q^T``.
    """
    ladder = Ladder.from_tables(tables)
    root = ladder.root
    (h,) = ladder.children[root]
    kids = ladder.children[h]
    if any(ladder.children[b] for b in kids):
        raise HullError("linear_floor_weights expects leaves -> h -> root")
    X = np.hstack([tables[(h, b)].P for b in kids])
    A = tables[(root, h)].P @ X
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * s[0]))
    r = min(n[h], rank)
    Q = np.zeros((A.shape[0], n[h]))
    Q[:, :r] = U[:, :r]
    Wh = np.linalg.pinv(A) @ Q
    W = {}
    row = 0
    for b in kids:
        mb = tables[(h, b)].P.shape[1]
        W[(b, h)] = Wh[row:row + mb]
        row += mb
    W[(h, root)] = Q.T.copy()
    return WeightSet(W, False)
