"""Tensor-product structure of event tables, activations and gradients.

A region with ``n`` binary factors has ``m = 2**n`` events, indexed big-endian
(factor 0 is the most significant bit), which is the ordering ``np.kron``
produces. An activation column is disentangled along factor ``j`` when it is
``1 x .. x f x .. x 1``; a gradient column when it is ``p_0 x .. x g x .. x p_{n-1}``
with the factor priors in every other slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import dynamics as dyn
from .teacher import EventTable

TOL = 1e-10


class DisentangleError(ValueError):
    pass


class PreconditionError(DisentangleError):
    pass


# --------------------------------------------------------------------------
# tensor helpers


def n_factors(m):
    n = int(round(np.log2(m))) if m > 0 else -1
    if n < 0 or 2 ** n != m:
        raise DisentangleError(f"event count {m} is not a power of 2")
    return n


def kron_all(vectors):
    return reduce(np.kron, vectors, np.ones(1))


def embed(v, j, n, fill=None):
    """``fill[0] x .. x v x .. x fill[n-1]`` with ``v`` at slot ``j``; fill defaults to ones."""
    parts = [np.ones(2) if fill is None else np.asarray(fill[k], dtype=float) for k in range(n)]
    parts[j] = np.asarray(v, dtype=float)
    return kron_all(parts)


def factor_marginals(p, n=None):
    """Per-factor marginals of a distribution over ``2**n`` events."""
    n = n_factors(p.size) if n is None else n
    T = np.asarray(p, dtype=float).reshape((2,) * n)
    return [T.sum(axis=tuple(a for a in range(n) if a != j)) for j in range(n)]


def permute_factors(M, perm):
    """Reorder factor axes of the event (row) index: new factor ``i`` is old factor ``perm[i]``."""
    n = len(perm)
    M = np.asarray(M, dtype=float)
    lead = M.shape[1:] if M.ndim > 1 else ()
    T = M.reshape((2,) * n + lead)
    T = np.transpose(T, list(perm) + list(range(n, n + len(lead))))
    return T.reshape((2 ** n,) + lead)


# --------------------------------------------------------------------------
# detection


@dataclass
class FitReport:
    fits: list
    residuals: np.ndarray
    tol: float = TOL

    @property
    def max_residual(self):
        return float(self.residuals.max()) if self.residuals.size else 0.0

    @property
    def ok(self):
        return self.max_residual < self.tol


def _axes_for(ncols, n, axes):
    axes = list(range(ncols)) if axes is None else list(axes)
    if len(axes) != ncols or any(not 0 <= a < n for a in axes):
        raise DisentangleError(f"columns need one factor axis each in [0, {n})")
    return axes


def is_disentangled_activation(F, axes=None, tol=TOL):
    """Best-fit ``f`` (mean over the other axes) and ∞-norm residual for each column."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape[0] == 1 and F.shape[1] > 1 and axes is None:
        F = F.T
    n = n_factors(F.shape[0])
    axes = _axes_for(F.shape[1], n, axes)
    fits, res = [], []
    for col, j in zip(F.T, axes):
        T = col.reshape((2,) * n)
        f = T.mean(axis=tuple(a for a in range(n) if a != j))
        fits.append(f)
        res.append(np.max(np.abs(col - embed(f, j, n))))
    return FitReport(fits, np.array(res), tol)


def is_disentangled_gradient(Gt, priors, axes=None, tol=TOL):
    """Best-fit ``g`` (sum over the other axes) against ``p_0 x .. x g x .. x p_{n-1}``."""
    Gt = np.atleast_2d(np.asarray(Gt, dtype=float))
    n = n_factors(Gt.shape[0])
    priors = [np.asarray(p, dtype=float) for p in priors]
    if len(priors) != n:
        raise DisentangleError(f"need {n} factor priors, got {len(priors)}")
    for k, p in enumerate(priors):
        if p.shape != (2,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise DisentangleError(f"factor prior {k} is not a distribution on 2 values")
        if np.any(p == 0):
            raise DisentangleError(f"factor prior {k} has a zero entry; the gradient pattern is undefined")
    axes = _axes_for(Gt.shape[1], n, axes)
    fits, res = [], []
    for col, j in zip(Gt.T, axes):
        T = col.reshape((2,) * n)
        g = T.sum(axis=tuple(a for a in range(n) if a != j))
        fits.append(g)
        res.append(np.max(np.abs(col - embed(g, j, n, priors))))
    return FitReport(fits, np.array(res), tol)


def block_mask(partition, n_rows):
    """Boolean ``n_rows x len(partition)`` mask: row ``k`` may feed column ``i`` iff ``k in partition[i]``."""
    flat = sorted(k for S in partition for k in S)
    if flat != list(range(n_rows)):
        raise DisentangleError(f"partition {partition} does not cover rows 0..{n_rows - 1} exactly once")
    mask = np.zeros((n_rows, len(partition)), dtype=bool)
    for i, S in enumerate(partition):
        mask[list(S), i] = True
    return mask


def is_separable(W, partition, tol=1e-12):
    """``(separable, off_block_mass)`` for ``W`` of shape ``n_beta x n_alpha``."""
    W = np.asarray(W, dtype=float)
    mask = block_mask(partition, W.shape[0])
    if mask.shape[1] != W.shape[1]:
        raise DisentangleError(f"partition has {mask.shape[1]} sets but W has {W.shape[1]} columns")
    mass = float(np.abs(W[~mask]).sum())
    return mass < tol, mass


# --------------------------------------------------------------------------
# factored instances


def compose_blocks(blocks, partition):
    """Full table ``P_ab`` from per-factor blocks ``P_{a[i], b[S_i]}``.

    Block ``i`` is ``2 x 2**|S_i|`` with columns indexed big-endian over the
    sorted factors of ``S_i``. The Kronecker product orders child factors as
    the concatenation of the sets; columns are then permuted back to the
    child's own factor order.
    """
    for i, (B, S) in enumerate(zip(blocks, partition)):
        if B.shape != (2, 2 ** len(S)):
            raise DisentangleError(f"block {i} has shape {B.shape}, expected (2, {2 ** len(S)})")
    K = reduce(np.kron, blocks, np.ones((1, 1)))
    order = [k for S in partition for k in sorted(S)]
    nb = len(order)
    # K's column factor axes follow `order`; move them to 0..nb-1
    T = K.reshape((K.shape[0],) + (2,) * nb)
    inv = np.argsort(order)
    T = np.transpose(T, [0] + [1 + int(a) for a in inv])
    return T.reshape(K.shape[0], 2 ** nb)


def sub_activation(f_vectors, S):
    """``2**|S| x |S|`` matrix whose columns embed each factor vector over the sub-space of ``S``."""
    S = sorted(S)
    return np.column_stack([embed(f_vectors[k], pos, len(S)) for pos, k in enumerate(S)])


@dataclass
class FactoredInstance:
    """One parent/child pair with factored tables, separable weights and disentangled boundaries."""

    partition: list
    blocks: list
    prior_alpha_factors: list
    f_beta: list
    W: np.ndarray
    g_alpha: list = field(default_factory=list)
    alpha: str = "alpha"
    beta: str = "beta"

    @property
    def n_alpha(self):
        return len(self.partition)

    @property
    def n_beta(self):
        return len(self.f_beta)

    @property
    def P(self):
        return compose_blocks(self.blocks, self.partition)

    @property
    def prior_alpha(self):
        return kron_all(self.prior_alpha_factors)

    @property
    def F_beta(self):
        return np.column_stack([embed(f, k, self.n_beta) for k, f in enumerate(self.f_beta)])

    @property
    def Gt_alpha(self):
        return np.column_stack([embed(g, j, self.n_alpha, self.prior_alpha_factors)
                                for j, g in enumerate(self.g_alpha)])

    def table(self):
        P, pa = self.P, self.prior_alpha
        pb = P.T @ pa
        with np.errstate(divide="ignore", invalid="ignore"):
            Pb = np.where(pb[None, :] > 0, P * pa[:, None] / pb[None, :], 0.0)
        return {(self.alpha, self.beta): EventTable(self.alpha, self.beta, P, Pb, pa, pb)}

    def weights(self, W=None):
        return dyn.WeightSet({(self.beta, self.alpha): np.array(self.W if W is None else W, dtype=float)})

    def to_dict(self):
        return {
            "partition": [sorted(S) for S in self.partition],
            "blocks": [B.tolist() for B in self.blocks],
            "prior_alpha_factors": [p.tolist() for p in self.prior_alpha_factors],
            "f_beta": [f.tolist() for f in self.f_beta],
            "W": self.W.tolist(),
            "g_alpha": [g.tolist() for g in self.g_alpha],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        arr = lambda xs: [np.asarray(x, dtype=float) for x in xs]  # noqa: E731
        return cls([list(S) for S in d["partition"]], arr(d["blocks"]), arr(d["prior_alpha_factors"]),
                   arr(d["f_beta"]), np.asarray(d["W"], dtype=float), arr(d.get("g_alpha", [])))


DEFAULT_PARTITION = ([0, 1], [2])


def _mixed(u):
    return u.max() > 0 and u.min() < 0


def random_instance(seed, partition=DEFAULT_PARTITION, centered=True, uniform_blocks=False):
    """Seeded instance: Dirichlet block rows and priors, Gaussian factor vectors and weights.

    Draws repeat until every raw activation column takes both signs, so ReLU
    leaves it non-constant and Batch Norm stays defined.
    """
    partition = [list(S) for S in partition]
    rng = np.random.default_rng(seed)
    n_beta = sum(len(S) for S in partition)
    mask = block_mask(partition, n_beta)
    while True:
        if uniform_blocks:
            blocks = [np.full((2, 2 ** len(S)), 1.0 / 2 ** len(S)) for S in partition]
        else:
            blocks = [rng.dirichlet(np.ones(2 ** len(S)), size=2) for S in partition]
        priors = [rng.dirichlet(np.ones(2)) for _ in partition]
        f_beta = [rng.standard_normal(2) for _ in range(n_beta)]
        W = rng.standard_normal(mask.shape) * mask
        g = [rng.standard_normal(2) for _ in partition]
        if centered:
            g = [v - v.mean() for v in g]
        inst = FactoredInstance(partition, blocks, priors, f_beta, W, g)
        raw = inst.P @ inst.F_beta @ W
        if uniform_blocks or all(_mixed(raw[:, j]) for j in range(raw.shape[1])):
            return inst


# --------------------------------------------------------------------------
# theorem checks


VARIANTS = (("linear", False), ("relu", False), ("linear", True), ("relu", True))


def _variant_name(gating, bn):
    return ("relu" if gating == "relu" else "linear") + ("+bn" if bn else "")


def check_forward_theorem(inst, W=None, variants=VARIANTS, strict=True, tol=TOL):
    """Run the event-space forward pass on ``inst`` and test the parent activation for disentanglement.

    With ``strict`` the hypotheses (stochastic blocks, separable weights,
    disentangled child activation) are checked first and a
    :class:`PreconditionError` names the one that fails.
    """
    W = inst.W if W is None else np.asarray(W, dtype=float)
    if strict:
        for i, B in enumerate(inst.blocks):
            if np.any(B < 0) or np.max(np.abs(B.sum(axis=1) - 1)) > 1e-12:
                raise PreconditionError(f"block {i} is not row-stochastic")
        sep, mass = is_separable(W, inst.partition)
        if not sep:
            raise PreconditionError(f"weights are not separable (off-block mass {mass:.3g})")
        if not is_disentangled_activation(inst.F_beta, tol=tol).ok:
            raise PreconditionError("child activation is not disentangled")
    tables = inst.table()
    weights = inst.weights(W)
    out = {}
    for gating, bn in variants:
        state = dyn.forward_pass(tables, weights, "hard" if gating == "relu" else "linear",
                                 bn_regions={inst.alpha} if bn else (), leaf_F={inst.beta: inst.F_beta})
        rep = is_disentangled_activation(state.F[inst.alpha], tol=tol)
        out[_variant_name(gating, bn)] = {"residual": rep.max_residual, "pass": rep.ok}
    return out


def check_separable_update(inst, Gt=None, strict=True, tol=TOL):
    """Compute ``dW = (P F_beta)^T Gt_alpha`` through the dynamics and test it for separability.

    Also compares each diagonal block against ``(P_i f_{S_i})^T g_i``.
    """
    Gt = inst.Gt_alpha if Gt is None else np.asarray(Gt, dtype=float)
    col_sums = Gt.sum(axis=0)
    if strict:
        if np.max(np.abs(col_sums)) > 1e-12:
            raise PreconditionError(f"gradient is not centered (column sums {col_sums.tolist()})")
        if not is_disentangled_gradient(Gt, inst.prior_alpha_factors, tol=tol).ok:
            raise PreconditionError("parent gradient is not disentangled")
    tables = inst.table()
    weights = inst.weights()
    state = dyn.forward_pass(tables, weights, "linear", leaf_F={inst.beta: inst.F_beta})
    state.Gt[inst.alpha] = Gt
    dW = dyn.weight_update(tables, state)[(inst.beta, inst.alpha)]
    _, mass = is_separable(dW, inst.partition)
    gfit = is_disentangled_gradient(Gt, inst.prior_alpha_factors, tol=np.inf).fits
    block_err = 0.0
    for i, S in enumerate(inst.partition):
        expect = (inst.blocks[i] @ sub_activation(inst.f_beta, S)).T @ gfit[i]
        block_err = max(block_err, float(np.max(np.abs(dW[sorted(S), i] - expect))))
    return {"off_block_mass": mass, "separable": mass < tol, "block_formula_error": block_err,
            "column_sums": col_sums.tolist(), "dW": dW}


def backward_raw(inst):
    """``P^T Gt_alpha W^T``: the child gradient before gating."""
    return inst.P.T @ inst.Gt_alpha @ inst.W.T


def total_probability_error(inst):
    """Max violation of ``P_i^T p_{a[i]} = p_{b[S_i]}`` over blocks."""
    pb = inst.P.T @ inst.prior_alpha
    T = pb.reshape((2,) * inst.n_beta)
    worst = 0.0
    for B, p, S in zip(inst.blocks, inst.prior_alpha_factors, inst.partition):
        S = sorted(S)
        marg = T.sum(axis=tuple(k for k in range(inst.n_beta) if k not in S)).ravel()
        worst = max(worst, float(np.max(np.abs(B.T @ p - marg))))
    return worst


def backward_residual(inst):
    G = backward_raw(inst)
    priors = factor_marginals(inst.P.T @ inst.prior_alpha, inst.n_beta)
    return is_disentangled_gradient(G, priors, tol=np.inf).max_residual


def backward_residual_demo(seeds=range(100), threshold=1e-6, partition=DEFAULT_PARTITION):
    """Disentanglement residual of the raw child gradient over a seeded ensemble."""
    rows = []
    for s in seeds:
        inst = random_instance(s, partition, centered=False)
        rows.append({"seed": int(s), "residual": backward_residual(inst),
                     "total_probability_error": total_probability_error(inst)})
    resid = np.array([r["residual"] for r in rows])
    return {
        "rows": rows,
        "count": len(rows),
        "above_threshold": int(np.sum(resid > threshold)),
        "threshold": threshold,
        "max_total_probability_error": max(r["total_probability_error"] for r in rows),
    }
