"""Batch Norm as zero-mean / unit-variance / affine sublayers and its projection Jacobian.

Moments are taken under a weight vector over coordinates: uniform ``1/N`` for
a batch of ``N`` samples, or the event prior ``P(z_alpha)`` in event space.
The standard deviation uses the matching weighted norm, so under uniform
weights ``sigma = ||f - mu||_2 / sqrt(N)``.

Gradients here follow the convention that ``g`` is the per-sample (per-event)
gradient and inner products are weighted: ``<a, b>_w = sum_i w_i a_i b_i``.
Under that convention the backward pass is ``(c1 / sigma)`` times the
``w``-orthogonal projection onto the complement of ``span{f, 1}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class BatchNormError(ValueError):
    pass


@dataclass
class BNParams:
    c1: float = 1.0
    c0: float = 0.0
    weight_vector: np.ndarray | None = None

    def weights(self, size):
        if self.weight_vector is None:
            return np.full(size, 1.0 / size)
        w = np.asarray(self.weight_vector, dtype=float)
        if w.shape != (size,):
            raise BatchNormError(f"weight_vector has shape {w.shape}, expected ({size},)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise BatchNormError("weight_vector must be nonnegative and sum to 1")
        return w


@dataclass
class BNForwardRecord:
    f: np.ndarray
    f_hat: np.ndarray
    f_tilde: np.ndarray
    f_bar: np.ndarray
    mu: float
    sigma: float
    w: np.ndarray

    @property
    def basis(self):
        """Columns ``[f_tilde, 1]``; orthonormal under the weighted inner product."""
        return np.column_stack([self.f_tilde, np.ones_like(self.f_tilde)])


def inner(a, b, w):
    return float(np.sum(w * a * b))


def bn_forward(f, params=None):
    params = params or BNParams()
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.size < 2:
        raise BatchNormError("bn_forward needs a vector of length >= 2")
    w = params.weights(f.size)
    mu = float(np.sum(w * f))
    f_hat = f - mu
    sigma = float(np.sqrt(np.sum(w * f_hat * f_hat)))
    if not sigma > 0:
        raise BatchNormError("constant input: sigma = 0")
    f_tilde = f_hat / sigma
    f_bar = params.c1 * f_tilde + params.c0
    return BNForwardRecord(f, f_hat, f_tilde, f_bar, mu, sigma, w)


def bn_backward(g, record, params=None):
    """Return ``(g_f, g_c)`` for an upstream gradient ``g``.

    ``g_f = (c1/sigma) * (g - proj_{span{f,1}} g)`` and
    ``g_c = [<f_tilde, g>_w, <1, g>_w]``.
    """
    params = params or BNParams()
    g = np.asarray(g, dtype=float)
    if g.shape != record.f.shape:
        raise BatchNormError(f"gradient has shape {g.shape}, record has {record.f.shape}")
    w = record.w
    g_c = np.array([inner(record.f_tilde, g, w), float(np.sum(w * g))])
    g_f = (params.c1 / record.sigma) * (g - record.f_tilde * g_c[0] - g_c[1])
    return g_f, g_c


def bn_jacobian(record, params=None):
    """Jacobian ``d f_bar / d f`` as an explicit matrix: ``(c1/sigma)(I - S S^T W)``."""
    params = params or BNParams()
    S = record.basis
    N = record.f.size
    return (params.c1 / record.sigma) * (np.eye(N) - S @ (S.T * record.w[None, :]))


def project_out(g, vectors, w):
    """``w``-orthogonal projection of ``g`` onto the complement of ``span(vectors)``.

    Solves the weighted normal equations directly, so it does not depend on the
    basis being orthonormal.
    """
    A = np.column_stack(vectors)
    gram = A.T @ (w[:, None] * A)
    coef = np.linalg.solve(gram, A.T @ (w * g))
    return g - A @ coef


def elementwise_bn_backward(dy, x, gamma):
    """Backward rules of the original Batch Norm formulation, term by term.

    Uniform batch statistics, no epsilon. Returns ``(dx, dgamma, dbeta)`` for the
    loss ``sum_i dy_i y_i``. ``dx`` equals the per-sample ``g_f`` of the weighted
    convention; ``dgamma`` and ``dbeta`` are ``N`` times ``g_c``.
    """
    N = x.size
    mu = x.sum() / N
    var = ((x - mu) ** 2).sum() / N
    xhat = (x - mu) / np.sqrt(var)
    dxhat = dy * gamma
    dvar = np.sum(dxhat * (x - mu)) * -0.5 * var ** -1.5
    dmu = np.sum(dxhat * -1.0 / np.sqrt(var)) + dvar * np.sum(-2.0 * (x - mu)) / N
    dx = dxhat / np.sqrt(var) + dvar * 2.0 * (x - mu) / N + dmu / N
    return dx, np.sum(dy * xhat), np.sum(dy)


# --------------------------------------------------------------------------
# matrix helpers used by the event-space dynamics


def bn_columns(F, prior, c1, c0):
    """Column-wise Batch Norm of an events-by-nodes matrix under event weights."""
    records = []
    out = np.empty_like(F, dtype=float)
    for j in range(F.shape[1]):
        rec = bn_forward(F[:, j], BNParams(float(c1[j]), float(c0[j]), prior))
        records.append(rec)
        out[:, j] = rec.f_bar
    return out, records


def bn_columns_backward(Gt, records, c1):
    """Back-propagate a prior-weighted gradient matrix through :func:`bn_columns`.

    ``Gt`` carries the event prior (``Gt = Lambda G``); the per-event gradient
    ``G`` is projected, then re-weighted. Returns ``(Gt_in, g_c)`` where
    ``g_c`` has shape ``(2, n)``.
    """
    out = np.empty_like(Gt, dtype=float)
    g_c = np.empty((2, Gt.shape[1]))
    for j, rec in enumerate(records):
        g = Gt[:, j] / rec.w
        g_f, gc = bn_backward(g, rec, BNParams(float(c1[j]), 0.0, rec.w))
        out[:, j] = rec.w * g_f
        g_c[:, j] = gc
    return out, g_c


# --------------------------------------------------------------------------
# conserved row energy


class EnergyTrace:
    """Training hook recording row energies of the weights into one region.

    For node ``j`` of ``region`` the row is every incoming weight (all child
    edges, bias rows included): ``E_j = 0.5 ||W_j||^2``. Per step it stores
    ``E_j``, ``<W_j, dW_j>`` and two residuals of the update
    ``W <- W + lr dW``:

    * ``residual``: ``|E(t+1) - E(t) - lr^2/2 ||dW_j||^2|``, which vanishes
      only when the update is orthogonal to the row;
    * ``identity_residual``: the same with ``lr <W_j, dW_j>`` also subtracted,
      which must vanish for any run.
    """

    def __init__(self, region, lr):
        self.region = region
        self.lr = lr
        self.rows = []
        self._pending = None

    def _rows_of(self, weights):
        edges = sorted(k for k in weights.W if k[1] == self.region)
        return np.vstack([weights.W[k] for k in edges])

    def __call__(self, step, weights, updates, state):
        W = self._rows_of(weights)
        energy = 0.5 * np.sum(W * W, axis=0)
        if self._pending is not None:
            prev_step, prev_E, prev_inner, prev_sq = self._pending
            for j in range(W.shape[1]):
                dE = energy[j] - prev_E[j]
                self.rows.append({
                    "step": prev_step,
                    "node": j,
                    "E": float(prev_E[j]),
                    "inner": float(prev_inner[j]),
                    "residual": float(abs(dE - 0.5 * self.lr ** 2 * prev_sq[j])),
                    "identity_residual": float(abs(dE - self.lr * prev_inner[j] - 0.5 * self.lr ** 2 * prev_sq[j])),
                })
        if updates is None:
            self._pending = None
            return
        dW = np.vstack([updates[k] for k in sorted(k for k in updates if k[1] == self.region)])
        self._pending = (step, energy, np.sum(W * dW, axis=0), np.sum(dW * dW, axis=0))

    def max(self, key):
        return max((abs(r[key]) for r in self.rows), default=0.0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "node", "E", "inner", "residual", "identity_residual"])
            for r in self.rows:
                w.writerow([r["step"], r["node"], repr(r["E"]), repr(r["inner"]),
                            repr(r["residual"]), repr(r["identity_residual"])])


def energy_trace(tables, weights, config, region):
    """Run training with an :class:`EnergyTrace` on ``region`` and return the hook."""
    from .dynamics import train

    hook = EnergyTrace(region, config.lr)
    train(tables, weights, config, callback=hook)
    return hook
