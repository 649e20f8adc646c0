"""Ground truth: the explicit locally connected ReLU network on enumerated inputs.

Each leaf event is rendered as one input vector (delta mode) or as a weighted
set of vectors (lossy mode). Every full input is enumerated with its exact
probability, pushed through the same weights the event-space dynamics use,
and conditional expectations are taken by exact weighted averaging.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .batchnorm import BNParams, bn_backward, bn_forward
from .teacher import TeacherError, all_tables, enumeration_cap


class OracleError(ValueError):
    pass


class PreconditionError(OracleError):
    pass


# --------------------------------------------------------------------------
# inputs


@dataclass(frozen=True, eq=False)
class InputModel:
    """Per leaf: for each event, a ``(k, d)`` array of vectors and their ``(k,)`` weights."""

    vectors: dict
    weights: dict

    @property
    def is_delta(self):
        return all(len(v) == 1 for vs in self.vectors.values() for v in vs)

    def dim(self, leaf):
        return self.vectors[leaf][0].shape[1]

    def conditional_mean(self, leaf):
        """``E[x_leaf | z_leaf]`` as an events-by-dim matrix."""
        return np.vstack([w @ v for v, w in zip(self.vectors[leaf], self.weights[leaf])])

    def validate(self):
        for leaf, vs in self.vectors.items():
            for e, (v, w) in enumerate(zip(vs, self.weights[leaf])):
                if v.shape[0] != w.shape[0]:
                    raise OracleError(f"leaf {leaf!r} event {e}: {v.shape[0]} vectors but {w.shape[0]} weights")
                if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                    raise OracleError(f"leaf {leaf!r} event {e}: weights must be nonnegative and sum to 1")
            if self.is_delta:
                flat = np.vstack([v[0] for v in vs])
                if np.unique(flat, axis=0).shape[0] != flat.shape[0]:
                    raise OracleError(f"leaf {leaf!r}: delta-mode vectors must be distinct per event")
        return self


def delta_inputs(teacher, vectors=None):
    """One vector per leaf event; one-hot encodings unless ``vectors[leaf]`` is given."""
    vectors = vectors or {}
    V, Wt = {}, {}
    for leaf in teacher.leaf_order:
        m = teacher.regions[leaf].m
        M = np.asarray(vectors.get(leaf, np.eye(m)), dtype=float)
        V[leaf] = [M[e][None, :] for e in range(m)]
        Wt[leaf] = [np.ones(1) for _ in range(m)]
    return InputModel(V, Wt).validate()


def lossy_inputs(teacher, per_event=2, seed=0, spread=0.5):
    """``per_event`` distinct vectors per leaf event: one-hot plus seeded Gaussian jitter, Dirichlet weights."""
    rng = np.random.default_rng(seed)
    V, Wt = {}, {}
    for leaf in teacher.leaf_order:
        m = teacher.regions[leaf].m
        V[leaf], Wt[leaf] = [], []
        for e in range(m):
            base = np.eye(m)[e]
            V[leaf].append(base + spread * rng.standard_normal((per_event, m)))
            Wt[leaf].append(rng.dirichlet(np.ones(per_event)))
    return InputModel(V, Wt).validate()


@dataclass(frozen=True, eq=False)
class InputSet:
    """Every full input with its probability and the teacher variables it induces."""

    prob: np.ndarray
    x: dict
    events: dict
    content: dict
    n_content: dict

    def __len__(self):
        return self.prob.size

    def to_csv(self, path):
        leaves = sorted(self.x)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "prob"] + [f"z_{r}" for r in sorted(self.events)]
                       + [f"x_{l}[{i}]" for l in leaves for i in range(self.x[l].shape[1])])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.prob[i]))] + [int(self.events[r][i]) for r in sorted(self.events)]
                           + [repr(float(v)) for l in leaves for v in self.x[l][i]])


def _descendant_leaves(teacher, rid):
    reg = teacher.regions[rid]
    if reg.is_leaf:
        return [rid]
    out = []
    for c in reg.children:
        for l in _descendant_leaves(teacher, c):
            if l not in out:
                out.append(l)
    return out


def enumerate_inputs(teacher, im, cap=None):
    """All full inputs in a fixed order with exact probabilities summing to 1."""
    cap = enumeration_cap(cap)
    leaves = teacher.leaf_order
    # per leaf: flat list of (event, variant) choices
    choice_event, choice_weight = {}, {}
    for l in leaves:
        ev, wt = [], []
        for e, w in enumerate(im.weights[l]):
            ev += [e] * len(w)
            wt += list(w)
        choice_event[l] = np.array(ev)
        choice_weight[l] = np.array(wt)
    shape = tuple(len(choice_event[l]) for l in leaves)
    total = int(np.prod(shape))
    if total > cap:
        raise TeacherError(f"{total} inputs exceed the enumeration cap {cap}")
    grid = np.indices(shape).reshape(len(leaves), -1)
    choice = {l: grid[i] for i, l in enumerate(leaves)}
    leaf_events = {l: choice_event[l][choice[l]] for l in leaves}
    prob = teacher.leaf_prior[tuple(leaf_events[l] for l in leaves)].astype(float)
    for l in leaves:
        prob = prob * choice_weight[l][choice[l]]
    x = {}
    for l in leaves:
        flat = np.vstack(im.vectors[l])
        x[l] = flat[choice[l]]
    events = dict(leaf_events)
    for rid in teacher.topological_order():
        reg = teacher.regions[rid]
        if not reg.is_leaf:
            events[rid] = teacher.fns[rid].table[tuple(events[c] for c in reg.children)]
    content, n_content = {}, {}
    for rid in teacher.regions:
        cols = np.column_stack([choice[l] for l in _descendant_leaves(teacher, rid)])
        _, inv = np.unique(cols, axis=0, return_inverse=True)
        content[rid] = inv.ravel()
        n_content[rid] = int(inv.max()) + 1
    return InputSet(prob, x, events, content, n_content)


# --------------------------------------------------------------------------
# network


@dataclass
class NetOutputs:
    inputs: InputSet
    f: dict = field(default_factory=dict)
    fraw: dict = field(default_factory=dict)
    fprime: dict = field(default_factory=dict)
    f_act: dict = field(default_factory=dict)
    g: dict = field(default_factory=dict)
    graw: dict = field(default_factory=dict)
    gout: dict = field(default_factory=dict)
    feed: dict = field(default_factory=dict)
    loss: float = 0.0


def _bn_batch(M, prob, c1, c0):
    out = np.empty_like(M)
    recs = []
    for j in range(M.shape[1]):
        rec = bn_forward(M[:, j], BNParams(float(c1[j]), float(c0[j]), prob))
        out[:, j] = rec.f_bar
        recs.append(rec)
    return out, recs


def _bn_batch_backward(G, recs, c1):
    out = np.empty_like(G)
    for j, rec in enumerate(recs):
        out[:, j] = bn_backward(G[:, j], rec, BNParams(float(c1[j]), 0.0, rec.w))[0]
    return out


def net_forward_backward(teacher, weights, inputs, bn_regions=(), bn_placement="post"):
    """Exact per-input forward and backward pass of the student network.

    The loss per input is ``0.5 ||onehot(z_w) - f_w(x)||^2``; gradients are
    descent directions. Batch Norm, when enabled, normalizes each node over
    the enumerated inputs weighted by their probabilities.
    """
    out = NetOutputs(inputs)
    bias = weights.bias_augmented
    order = teacher.topological_order()
    bn_recs = {}
    for rid in order:
        reg = teacher.regions[rid]
        if reg.is_leaf:
            out.f[rid] = out.fraw[rid] = inputs.x[rid]
            out.fprime[rid] = np.ones_like(inputs.x[rid])
            continue
        raw = 0.0
        for c in reg.children:
            X = out.f[c]
            if bias:
                X = np.hstack([X, np.ones((X.shape[0], 1))])
            out.feed[(c, rid)] = X
            raw = raw + X @ weights.W[(c, rid)]
        n = raw.shape[1]
        if rid in bn_regions:
            c1, c0 = weights.bn.get(rid, (np.ones(n), np.zeros(n)))
        if rid in bn_regions and bn_placement == "pre":
            raw, bn_recs[rid] = _bn_batch(raw, inputs.prob, c1, c0)
        fp = dyn.hard_gate(raw)
        act = fp * raw
        out.fraw[rid], out.fprime[rid], out.f_act[rid] = raw, fp, act
        if rid in bn_regions and bn_placement == "post":
            act, bn_recs[rid] = _bn_batch(act, inputs.prob, c1, c0)
        out.f[rid] = act

    root = teacher.root.id
    fw = out.f[root]
    y = inputs.events[root]
    target = np.eye(fw.shape[1])[y] if fw.shape[1] == teacher.regions[root].m else None
    if target is None:
        raise OracleError("top region needs n == m for the one-hot loss")
    resid = target - fw
    out.loss = float(0.5 * np.sum(inputs.prob[:, None] * resid ** 2))
    out.gout = {rid: np.zeros_like(out.f[rid]) for rid in order}
    out.gout[root] = resid
    for rid in reversed(order):
        reg = teacher.regions[rid]
        if reg.is_leaf:
            out.graw[rid] = out.g[rid] = out.gout[rid]
            continue
        gout = out.gout[rid]
        c1 = weights.bn.get(rid, (np.ones(gout.shape[1]), None))[0]
        if rid in bn_recs and bn_placement == "post":
            graw = _bn_batch_backward(gout, bn_recs[rid], c1)
            g = out.fprime[rid] * graw
        elif rid in bn_recs:
            graw = gout
            g = _bn_batch_backward(out.fprime[rid] * gout, bn_recs[rid], c1)
        else:
            graw = gout
            g = out.fprime[rid] * gout
        out.graw[rid], out.g[rid] = graw, g
        for c in reg.children:
            W = weights.W[(c, rid)]
            if bias:
                W = W[:-1]
            out.gout[c] = out.gout[c] + g @ W.T
    return out


def oracle_loss(teacher, weights, inputs, **kw):
    return net_forward_backward(teacher, weights, inputs, **kw).loss


def oracle_weight_update(outputs):
    """``E_x[f_k(x) g_j(x)]`` for every edge, bias column included."""
    p = outputs.inputs.prob
    return {(c, a): X.T @ (p[:, None] * outputs.g[a]) for (c, a), X in outputs.feed.items()}


# --------------------------------------------------------------------------
# marginalization


def conditional_mean(values, prob, labels, n_labels):
    """Rows ``E[values | label = a]`` for ``a = 0..n_labels-1``."""
    mass = np.bincount(labels, weights=prob, minlength=n_labels)
    zero = np.flatnonzero(mass <= 0)
    if zero.size:
        raise OracleError(f"conditioning value {int(zero[0])} has zero probability")
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    sums = np.zeros((n_labels, values.shape[1]))
    np.add.at(sums, labels, prob[:, None] * values)
    return sums / mass[:, None]


def marginalize(outputs, region, quantity="f", by="event", of=None):
    """Conditional expectation of a per-input quantity of ``region``'s nodes.

    ``by="event"`` conditions on ``z_of``; ``by="content"`` conditions on the
    raw content ``x_of`` of a receptive field. ``of`` defaults to ``region``.
    """
    of = region if of is None else of
    inp = outputs.inputs
    vals = getattr(outputs, quantity)[region]
    if by == "event":
        labels = inp.events[of]
        n = int(max(labels.max() + 1, 1))
    elif by == "content":
        labels, n = inp.content[of], inp.n_content[of]
    else:
        raise OracleError(f"unknown conditioning {by!r}")
    return conditional_mean(vals, inp.prob, labels, n)


def unnormalized(outputs, region, quantity="g"):
    """``sum_x P(x) [z(x) = a] q(x)`` i.e. the prior-weighted conditional mean."""
    inp = outputs.inputs
    labels = inp.events[region]
    vals = getattr(outputs, quantity)[region]
    n = int(labels.max() + 1)
    out = np.zeros((n, vals.shape[1]))
    np.add.at(out, labels, inp.prob[:, None] * vals)
    return out


def _ancestors(teacher, rid):
    out = []
    stack = list(teacher.parents(rid))
    while stack:
        a = stack.pop()
        if a not in out:
            out.append(a)
            stack.extend(teacher.parents(a))
    return out


def check_recursion(teacher, outputs, quantity="g"):
    """Max tower-property violation  |g_j(x_k) - E[g_j(x_j) | x_k]|  over all ancestor/descendant pairs."""
    inp = outputs.inputs
    worst = 0.0
    for k in teacher.regions:
        for j in _ancestors(teacher, k):
            lhs = marginalize(outputs, j, quantity, by="content", of=k)
            gj = marginalize(outputs, j, quantity, by="content", of=j)
            lifted = gj[inp.content[j]]
            rhs = conditional_mean(lifted, inp.prob, inp.content[k], inp.n_content[k])
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


# --------------------------------------------------------------------------
# exactness


@dataclass
class DivergenceReport:
    F: dict
    Gt: dict
    dW: dict
    D: dict
    decorrelation: dict
    delta_regime: bool

    @property
    def max_divergence(self):
        vals = [v for d in (self.F, self.Gt, self.dW) for v in d.values()]
        return max(vals) if vals else 0.0

    @property
    def max_decorrelation(self):
        return max(self.decorrelation.values(), default=0.0)

    def to_dict(self):
        def keyed(d):
            return {k if isinstance(k, str) else f"{k[0]}->{k[1]}": v for k, v in sorted(d.items())}
        return {"F": keyed(self.F), "Gt": keyed(self.Gt), "dW": keyed(self.dW), "D": keyed(self.D),
                "decorrelation": keyed(self.decorrelation), "delta_regime": self.delta_regime,
                "max_divergence": self.max_divergence, "max_decorrelation": self.max_decorrelation}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def decorrelation_violation(outputs, region):
    """Max over events/nodes of the conditional covariances of the gate with raw gradient and raw activation."""
    fp = marginalize(outputs, region, "fprime")
    worst = 0.0
    for q in ("graw", "fraw"):
        joint = conditional_mean(outputs.fprime[region] * getattr(outputs, q)[region], outputs.inputs.prob,
                                 outputs.inputs.events[region], fp.shape[0])
        worst = max(worst, float(np.max(np.abs(joint - fp * marginalize(outputs, region, q)))))
    return worst


def compare_exactness(teacher, weights, im, gating_mode="hard", bn_regions=(), bn_placement="post",
                      tables=None):
    """Divergence between the event-space dynamics and the marginalized oracle.

    In delta mode every summarization must be injective (so every
    ``P(x_j | z_alpha)`` is a point mass); otherwise the comparison is refused.
    Lossy input models are compared without that requirement.
    """
    if im.is_delta and not teacher.is_injective():
        bad = [r for r, fn in teacher.fns.items() if not fn.is_injective]
        raise PreconditionError(f"non-injective summarization at {bad}: the delta regime does not hold")
    if tables is None:
        tables = all_tables(teacher)
    inputs = enumerate_inputs(teacher, im)
    out = net_forward_backward(teacher, weights, inputs, bn_regions, bn_placement)

    gates = None
    if gating_mode == "expected":
        gates = {r: marginalize(out, r, "fprime") for r in teacher.regions if not teacher.regions[r].is_leaf}
    leaf_F = {l: im.conditional_mean(l) for l in teacher.leaf_order}
    state = dyn.forward_pass(tables, weights, gating_mode, gates=gates, bn_regions=bn_regions,
                             bn_placement=bn_placement, leaf_F=leaf_F)
    dyn.backward_pass(tables, weights, state)
    dW = dyn.weight_update(tables, state)
    odW = oracle_weight_update(out)

    F, Gt, D, dec = {}, {}, {}, {}
    for rid, reg in teacher.regions.items():
        if reg.is_leaf:
            continue
        F[rid] = float(np.max(np.abs(state.F[rid] - marginalize(out, rid, "f"))))
        Gt[rid] = float(np.max(np.abs(state.Gt[rid] - unnormalized(out, rid, "g"))))
        D[rid] = float(np.max(np.abs(state.D[rid] - marginalize(out, rid, "fprime"))))
        dec[rid] = decorrelation_violation(out, rid)
    dWd = {e: float(np.max(np.abs(dW[e] - odW[e]))) for e in dW}
    return DivergenceReport(F, Gt, dWd, D, dec, im.is_delta)
