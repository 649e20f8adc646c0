"""Event-space gradient dynamics of a locally connected ReLU student.

Activations, gradients and gates are ``m x n`` matrices indexed by the events
of a region (rows) and its student nodes (columns):

    F_a  = D_a o sum_{b in ch(a)} P_ab F_b W_ba
    Gt_b = D_b o sum_{a in pa(b)} P_ab^T Gt_a W_ba^T
    dW_ba = (P_ab F_b)^T Gt_a

Leaves carry ``F = I`` (one node per event). ``Gt`` is the prior-weighted
gradient ``Lambda G``; the top boundary is ``Lambda_w (I - F_w)`` and is
gated by ``D_w`` like any other layer. All gradients are descent directions,
so training adds ``lr * dW``.

Weights are keyed ``(child, parent)`` to match ``W_ba``; tables are keyed
``(parent, child)`` to match ``P_ab``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .batchnorm import bn_columns, bn_columns_backward

# ReLU gate at exactly zero pre-activation: closed (0). Shared with the oracle.
GATE_AT_ZERO = 0.0

GATING_MODES = ("hard", "linear", "expected")


class DynamicsError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite values at step {step}")
        self.step = step


def hard_gate(x):
    return np.where(x > 0, 1.0, np.where(x == 0, GATE_AT_ZERO, 0.0))


# --------------------------------------------------------------------------
# structure


@dataclass(frozen=True)
class Ladder:
    """Region tree recovered from a set of event tables."""

    order: tuple
    children: dict
    parents: dict
    m: dict
    prior: dict

    @property
    def root(self):
        return self.order[-1]

    @property
    def leaves(self):
        return tuple(r for r in self.order if not self.children[r])

    def edges(self):
        return [(b, a) for a in self.order for b in self.children[a]]

    @classmethod
    def from_tables(cls, tables):
        children, parents, m, prior = {}, {}, {}, {}
        for (a, b), t in tables.items():
            children.setdefault(a, []).append(b)
            parents.setdefault(b, []).append(a)
            children.setdefault(b, [])
            parents.setdefault(a, [])
            m[a], m[b] = t.P.shape
            prior.setdefault(a, t.prior_alpha)
            prior.setdefault(b, t.prior_beta)
        level = {}

        def lv(r):
            if r not in level:
                level[r] = 0 if not children[r] else 1 + max(lv(c) for c in children[r])
            return level[r]

        regions = list(children)
        order = tuple(sorted(regions, key=lambda r: (lv(r), regions.index(r))))
        roots = [r for r in order if not parents[r]]
        if len(roots) != 1:
            raise DynamicsError(f"tables must describe a single-rooted ladder, roots: {roots}")
        if order[-1] != roots[0]:
            raise DynamicsError("root is not the topmost region")
        return cls(order, {k: tuple(v) for k, v in children.items()},
                   {k: tuple(v) for k, v in parents.items()}, m, prior)

    def levels(self):
        out = {}
        for r in self.order:
            out[r] = 0 if not self.children[r] else 1 + max(out[c] for c in self.children[r])
        return out


# --------------------------------------------------------------------------
# weights


@dataclass
class WeightSet:
    W: dict
    bias_augmented: bool = False
    bn: dict = field(default_factory=dict)

    def copy(self):
        return WeightSet({k: v.copy() for k, v in self.W.items()}, self.bias_augmented,
                         {k: (c1.copy(), c0.copy()) for k, (c1, c0) in self.bn.items()})

    def n_in(self, edge):
        return self.W[edge].shape[0] - (1 if self.bias_augmented else 0)

    def n_of(self, region):
        for (b, a), w in self.W.items():
            if a == region:
                return w.shape[1]
            if b == region:
                return self.n_in((b, a))
        raise DynamicsError(f"no weights touch region {region!r}")

    def bn_params(self, region, n):
        if region not in self.bn:
            self.bn[region] = (np.ones(n), np.zeros(n))
        return self.bn[region]


def init_weights(tables, n, seed=0, bias=False, scale=None, bias_init=None):
    """Seeded uniform init in ``[-s, s]`` with ``s = 1/sqrt(n_child)`` per edge.

    ``n`` maps region id to node count; leaves default to their event count.
    ``bias_init``, when given, sets every bias row to that constant instead.
    """
    ladder = Ladder.from_tables(tables)
    rng = np.random.default_rng(seed)
    W = {}
    for b, a in ladder.edges():
        nb = n.get(b, ladder.m[b])
        s = scale if scale is not None else 1.0 / np.sqrt(nb)
        W[(b, a)] = rng.uniform(-s, s, size=(nb + (1 if bias else 0), n[a]))
        if bias and bias_init is not None:
            W[(b, a)][-1] = bias_init
    return WeightSet(W, bias)


def node_counts(teacher):
    return {rid: r.n for rid, r in teacher.regions.items()}


def save_weights(weights, directory):
    """One CSV per edge plus ``manifest.json`` naming edge shapes."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"bias_augmented": weights.bias_augmented, "edges": []}
    for (b, a), w in sorted(weights.W.items()):
        name = f"W_{b}__{a}.csv"
        np.savetxt(d / name, w, delimiter=",", fmt="%.17g")
        manifest["edges"].append({"child": b, "parent": a, "shape": list(w.shape), "file": name})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_weights(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    W = {}
    for e in manifest["edges"]:
        w = np.loadtxt(d / e["file"], delimiter=",", ndmin=2).reshape(e["shape"])
        W[(e["child"], e["parent"])] = w
    return WeightSet(W, manifest["bias_augmented"])


# --------------------------------------------------------------------------
# passes


@dataclass
class LayerState:
    ladder: Ladder
    F: dict = field(default_factory=dict)
    Fraw: dict = field(default_factory=dict)
    D: dict = field(default_factory=dict)
    Gt: dict = field(default_factory=dict)
    Gout: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    pre_bn: dict = field(default_factory=dict)
    bn_records: dict = field(default_factory=dict)
    bn_grad: dict = field(default_factory=dict)
    bn_placement: str = "post"


def edge_input(P, F_child, bias):
    X = P @ F_child
    if bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
    return X


def region_forward(inputs, weights_in, gating_mode="hard", gates=None, bn=None, placement="post"):
    """Forward one region from its per-child inputs ``P_ab F_b`` (bias column included).

    ``bn`` is ``None`` or ``(prior, c1, c0)``. Returns ``(Fraw, D, F, pre_bn, records)``.
    """
    Fraw = sum(X @ W for X, W in zip(inputs, weights_in))
    pre_bn = records = None
    if bn is not None and placement == "pre":
        pre_bn = Fraw
        Fraw, records = bn_columns(Fraw, *bn)
    D = _gate(Fraw, gating_mode, gates)
    F = D * Fraw
    if bn is not None and placement == "post":
        pre_bn = F
        F, records = bn_columns(F, *bn)
    return Fraw, D, F, pre_bn, records


def _gate(Fraw, mode, gates):
    if mode == "hard":
        return hard_gate(Fraw)
    if mode == "linear":
        return np.ones_like(Fraw)
    if mode == "expected":
        if gates is None:
            raise DynamicsError("expected gating needs externally supplied gates")
        D = np.asarray(gates, dtype=float)
        if D.shape != Fraw.shape:
            raise DynamicsError(f"gate shape {D.shape} != activation shape {Fraw.shape}")
        return D
    raise DynamicsError(f"unknown gating mode {mode!r}")


def forward_pass(tables, weights, gating_mode="hard", *, gates=None, bn_regions=(),
                 bn_placement="post", leaf_F=None):
    """Bottom-up pass filling ``F``, ``Fraw`` and ``D`` for every region.

    ``gates`` supplies ``D`` per region for ``gating_mode="expected"``;
    ``leaf_F`` overrides the identity boundary at selected leaves.
    """
    ladder = Ladder.from_tables(tables)
    state = LayerState(ladder, bn_placement=bn_placement)
    bias = weights.bias_augmented
    leaf_F = leaf_F or {}
    for r in ladder.order:
        kids = ladder.children[r]
        if not kids:
            if r in leaf_F:
                F = np.asarray(leaf_F[r], dtype=float)
            else:
                n = _leaf_n(weights, ladder, r)
                if n != ladder.m[r]:
                    raise DynamicsError(f"leaf {r!r} has m={ladder.m[r]} but n={n}; boundary F=I needs m == n")
                F = np.eye(n)
            state.F[r] = state.Fraw[r] = F
            state.D[r] = np.ones_like(F)
            continue
        inputs, Ws = [], []
        for b in kids:
            if (b, r) not in weights.W:
                raise DynamicsError(f"missing weights for edge {b!r}->{r!r}")
            W = weights.W[(b, r)]
            X = edge_input(tables[(r, b)].P, state.F[b], bias)
            if X.shape[1] != W.shape[0]:
                raise DynamicsError(f"edge {b!r}->{r!r}: weight has {W.shape[0]} rows, input has {X.shape[1]} columns")
            state.inputs[(b, r)] = X
            inputs.append(X)
            Ws.append(W)
        n = Ws[0].shape[1]
        if any(W.shape[1] != n for W in Ws):
            raise DynamicsError(f"region {r!r}: inconsistent node counts across child edges")
        bn = None
        if r in bn_regions:
            c1, c0 = weights.bn_params(r, n)
            bn = (ladder.prior[r], c1, c0)
        g = None if gates is None else gates.get(r)
        Fraw, D, F, pre, recs = region_forward(inputs, Ws, gating_mode, g, bn, bn_placement)
        state.Fraw[r], state.D[r], state.F[r] = Fraw, D, F
        if recs is not None:
            state.pre_bn[r], state.bn_records[r] = pre, recs
    return state


def _leaf_n(weights, ladder, leaf):
    for a in ladder.parents[leaf]:
        if (leaf, a) in weights.W:
            return weights.n_in((leaf, a))
    raise DynamicsError(f"no weights leave leaf {leaf!r}")


def top_gradient(state):
    """Default top boundary ``Lambda_w (I - F_w)``."""
    root = state.ladder.root
    F = state.F[root]
    if F.shape[0] != F.shape[1]:
        raise DynamicsError(f"top region has m={F.shape[0]} != n={F.shape[1]}")
    return state.ladder.prior[root][:, None] * (np.eye(F.shape[0]) - F)


def label_gradient(prior, a1, a2):
    """Alternative top boundary ``g_j(z) = a1 [j = z] - a2 [j != z]``, prior-weighted."""
    m = len(prior)
    G = a1 * np.eye(m) - a2 * (1.0 - np.eye(m))
    return np.asarray(prior)[:, None] * G


def backward_pass(tables, weights, state, top=None):
    """Top-down pass filling ``Gout`` (w.r.t. outputs) and ``Gt`` (gated) for every region."""
    if not state.F:
        raise DynamicsError("backward_pass needs a completed forward state")
    ladder = state.ladder
    bias = weights.bias_augmented
    G = top_gradient(state) if top is None else np.asarray(top, dtype=float)
    state.Gout = {r: np.zeros_like(state.F[r]) for r in ladder.order}
    state.Gout[ladder.root] = G.copy()
    for r in reversed(ladder.order):
        Gout = state.Gout[r]
        D = state.D[r]
        if r in state.bn_records:
            c1 = weights.bn[r][0]
            if state.bn_placement == "post":
                Gpre, gc = bn_columns_backward(Gout, state.bn_records[r], c1)
                Gt = D * Gpre
            else:
                Gt, gc = bn_columns_backward(D * Gout, state.bn_records[r], c1)
            state.bn_grad[r] = gc
        else:
            Gt = D * Gout
        state.Gt[r] = Gt
        for b in ladder.children[r]:
            W = weights.W[(b, r)]
            if bias:
                W = W[:-1]
            state.Gout[b] = state.Gout[b] + tables[(r, b)].P.T @ Gt @ W.T
    return state


def edge_update(X, Gt_parent):
    """``dW = (P F_child)^T Gt_parent`` given the cached edge input."""
    return X.T @ Gt_parent


def weight_update(tables, state, max_update_norm=None):
    """Per-edge descent direction, optionally capped in Frobenius norm."""
    if not state.Gt:
        raise DynamicsError("weight_update needs forward and backward state")
    out = {}
    for (b, a), X in state.inputs.items():
        dW = edge_update(X, state.Gt[a])
        if max_update_norm is not None:
            nrm = np.linalg.norm(dW)
            if nrm > max_update_norm:
                dW = dW * (max_update_norm / nrm)
        out[(b, a)] = dW
    return out


def loss(state):
    """``||F_w - I||_F^2`` at the top region."""
    F = state.F[state.ladder.root]
    if F.shape[0] != F.shape[1]:
        raise DynamicsError(f"top region has m={F.shape[0]} != n={F.shape[1]}")
    return float(np.sum((F - np.eye(F.shape[0])) ** 2))


def weighted_loss(state):
    """Prior-weighted objective ``0.5 sum_z P(z) ||F_w[z] - e_z||^2`` whose descent direction the dynamics follow."""
    root = state.ladder.root
    F = state.F[root]
    return float(0.5 * np.sum(state.ladder.prior[root][:, None] * (F - np.eye(F.shape[0])) ** 2))


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.1
    steps: int = 100
    max_update_norm: float | None = None
    gating_mode: str = "hard"
    seed: int = 0
    bn_regions: frozenset = frozenset()
    bn_placement: str = "post"
    train_bn: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise DynamicsError("lr must be > 0")
        if self.steps < 0:
            raise DynamicsError("steps must be >= 0")
        if self.gating_mode not in GATING_MODES:
            raise DynamicsError(f"unknown gating mode {self.gating_mode!r}")
        if self.bn_placement not in ("pre", "post"):
            raise DynamicsError("bn_placement must be 'pre' or 'post'")
        self.bn_regions = frozenset(self.bn_regions)


@dataclass
class TrainResult:
    weights: WeightSet
    rows: list

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def to_csv(self, path):
        edges = sorted(self.rows[0]["update_norm"]) if self.rows else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"] + [f"dW[{b}->{a}]" for b, a in edges])
            for r in self.rows:
                w.writerow([r["step"], repr(r["loss"])] + [repr(r["update_norm"][e]) for e in edges])


def step_once(tables, weights, config, gates=None, top=None):
    state = forward_pass(tables, weights, config.gating_mode, gates=gates,
                         bn_regions=config.bn_regions, bn_placement=config.bn_placement)
    backward_pass(tables, weights, state, top=top)
    updates = weight_update(tables, state, config.max_update_norm)
    return state, updates


def train(tables, init_weights, config, callback=None, gates=None, table_sampler=None):
    """Run ``config.steps`` descent steps ``W <- W + lr dW``.

    The trajectory has ``steps + 1`` rows: the loss and update norms at each
    visited weight setting, the last one not applied. ``callback(step,
    weights, updates, state)`` is invoked on every row before the update.
    ``table_sampler(step)``, when given, supplies the tables used at each step.
    """
    weights = init_weights.copy()
    rows = []
    for step in range(config.steps + 1):
        tabs = tables if table_sampler is None else table_sampler(step)
        state, updates = step_once(tabs, weights, config, gates=gates)
        L = loss(state)
        if not np.isfinite(L) or any(not np.all(np.isfinite(u)) for u in updates.values()):
            raise DivergenceError(step)
        rows.append({"step": step, "loss": L,
                     "update_norm": {k: float(np.linalg.norm(u)) for k, u in updates.items()}})
        if callback is not None:
            callback(step, weights, updates, state)
        if step == config.steps:
            break
        for k, u in updates.items():
            weights.W[k] = weights.W[k] + config.lr * u
        if config.train_bn:
            for r, gc in state.bn_grad.items():
                c1, c0 = weights.bn[r]
                weights.bn[r] = (c1 + config.lr * gc[0], c0 + config.lr * gc[1])
    return TrainResult(weights, rows)


def with_gating(config, mode):
    return replace(config, gating_mode=mode)
