"""Discrete teachers: summarization ladders and the exact event tables they induce.

A teacher is a tree of regions. Each leaf region carries a discrete variable
whose joint distribution is given explicitly; every other region computes its
variable deterministically from its children's variables. The root variable is
the class label.

All probabilities are obtained by exhaustive enumeration of leaf tuples, never
by sampling.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CAP = 10**6


class TeacherError(ValueError):
    """Raised for an invalid teacher description."""


def enumeration_cap(cap=None):
    """Return the enumeration cap, honouring the ``LADDERSIM_CAP`` override."""
    if cap is not None:
        return int(cap)
    env = os.environ.get("LADDERSIM_CAP")
    return int(env) if env else DEFAULT_CAP


@dataclass(frozen=True)
class Region:
    id: str
    children: tuple = ()
    m: int = 1
    n: int = 1
    level: int = 0

    @property
    def is_leaf(self):
        return not self.children


@dataclass(frozen=True)
class SummarizationFn:
    """Parent event as a total function of the children's events.

    ``table`` has one axis per child (in the region's child order) and holds
    the parent event for every combination of child events.
    """

    region: str
    table: np.ndarray

    def __call__(self, *child_values):
        return self.table[tuple(child_values)]

    @property
    def is_injective(self):
        return np.unique(self.table).size == self.table.size


@dataclass(frozen=True, eq=False)
class TeacherGraph:
    regions: dict
    fns: dict
    leaf_order: tuple
    leaf_prior: np.ndarray
    allow_overlap: bool = False

    @property
    def root(self):
        return next(r for r in self.regions.values() if not self.parents(r.id))

    def parents(self, rid):
        return tuple(r.id for r in self.regions.values() if rid in r.children)

    def edges(self):
        """All (parent, child) pairs, parents in bottom-up order."""
        return [(a, b) for a in self.topological_order() for b in self.regions[a].children]

    def topological_order(self):
        """Region ids ordered children-before-parents (stable within a level)."""
        return tuple(sorted(self.regions, key=lambda r: (self.regions[r].level, _order_key(self, r))))

    def is_injective(self):
        return all(fn.is_injective for fn in self.fns.values())


def _order_key(g, rid):
    return list(g.regions).index(rid)


@dataclass(frozen=True, eq=False)
class EventTable:
    """Conditional table between a region ``alpha`` and its child ``beta``.

    ``P[a, b] = P(z_beta=b | z_alpha=a)`` and ``Pb[a, b] = P(z_alpha=a | z_beta=b)``.
    """

    alpha: str
    beta: str
    P: np.ndarray
    Pb: np.ndarray
    prior_alpha: np.ndarray
    prior_beta: np.ndarray

    @property
    def joint(self):
        return self.P * self.prior_alpha[:, None]

    def lambda_residual(self):
        """Max entrywise violation of  Lambda_b Pb^T = P^T Lambda_a."""
        lhs = self.prior_beta[:, None] * self.Pb.T
        rhs = self.P.T * self.prior_alpha[None, :]
        return float(np.max(np.abs(lhs - rhs)))

    def with_P(self, P):
        """Copy with a replaced forward table (used to inject defects or noise)."""
        P = np.asarray(P, dtype=float)
        return EventTable(self.alpha, self.beta, P, self.Pb, self.prior_alpha, self.prior_beta)


@dataclass(frozen=True, eq=False)
class EventDistribution:
    """Exact pushforward of the leaf prior through every summarization function.

    ``values[r]`` is an integer array over the leaf-tuple grid holding the
    event of region ``r`` for every leaf tuple.
    """

    teacher: TeacherGraph
    values: dict
    marginals: dict
    joints: dict = field(default_factory=dict)

    def joint(self, alpha, beta):
        return self.joints[(alpha, beta)]


# --------------------------------------------------------------------------
# construction


def _fn_table(kind, child_ms, m, rid):
    shape = tuple(child_ms)
    size = int(np.prod(shape))
    if isinstance(kind, str):
        name, _, arg = kind.partition(":")
        if name == "bijective":
            if size != m:
                raise TeacherError(f"region {rid!r}: bijective fn needs m == {size}, got {m}")
            return np.arange(size).reshape(shape)
        if name == "identity":
            if len(shape) != 1 or shape[0] != m:
                raise TeacherError(f"region {rid!r}: identity fn needs one child with m == {m}")
            return np.arange(m)
        if name == "xor":
            grids = np.indices(shape)
            return grids.sum(axis=0) % m
        if name == "permutation":
            if size != m:
                raise TeacherError(f"region {rid!r}: permutation fn needs m == {size}, got {m}")
            rng = np.random.default_rng(int(arg))
            return rng.permutation(size).reshape(shape)
        if name == "random":
            if size < m:
                raise TeacherError(f"region {rid!r}: cannot map {size} combinations onto {m} events")
            rng = np.random.default_rng(int(arg))
            flat = rng.integers(0, m, size=size)
            # force surjectivity on a random subset of positions
            flat[rng.choice(size, size=m, replace=False)] = rng.permutation(m)
            return flat.reshape(shape)
        raise TeacherError(f"region {rid!r}: unknown fn kind {kind!r}")
    table = np.asarray(kind)
    if table.size != size:
        raise TeacherError(f"region {rid!r}: table has {table.size} entries, expected {size}")
    return table.reshape(shape)


def _leaf_prior(kind, leaf_ms):
    shape = tuple(leaf_ms)
    size = int(np.prod(shape))
    if isinstance(kind, str):
        name, _, arg = kind.partition(":")
        if name == "uniform":
            return np.full(shape, 1.0 / size)
        if name == "random":
            rng = np.random.default_rng(int(arg))
            return rng.dirichlet(np.ones(size)).reshape(shape)
        raise TeacherError(f"unknown leaf_prior kind {kind!r}")
    prior = np.asarray(kind, dtype=float)
    if prior.size != size:
        raise TeacherError(f"leaf_prior has {prior.size} entries, expected {size}")
    return prior.reshape(shape)


def _levels(specs):
    levels = {}
    visiting = set()

    def visit(rid):
        if rid in levels:
            return levels[rid]
        if rid in visiting:
            raise TeacherError(f"cyclic region graph through {rid!r}")
        if rid not in specs:
            raise TeacherError(f"unknown region {rid!r}")
        visiting.add(rid)
        kids = specs[rid]["children"]
        levels[rid] = 0 if not kids else 1 + max(visit(c) for c in kids)
        visiting.discard(rid)
        return levels[rid]

    for rid in specs:
        visit(rid)
    return levels


def build_teacher(spec, allow_overlap=None):
    """Build and validate a :class:`TeacherGraph` from a dict or JSON path.

    The description has ``regions`` (``id``, ``children``, ``m``, ``n``),
    ``fns`` (per non-leaf region: an explicit table or one of ``"bijective"``,
    ``"identity"``, ``"xor"``, ``"permutation:<seed>"``, ``"random:<seed>"``)
    and ``leaf_prior`` (``"uniform"``, ``"random:<seed>"`` or an array over
    leaf tuples, leaves in declaration order).
    """
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    if allow_overlap is None:
        allow_overlap = bool(spec.get("allow_overlap", False))

    specs = {}
    for r in spec["regions"]:
        rid = str(r["id"])
        if rid in specs:
            raise TeacherError(f"duplicate region id {rid!r}")
        specs[rid] = {"children": tuple(str(c) for c in r.get("children", ())),
                      "m": int(r["m"]), "n": int(r.get("n", r["m"]))}
    levels = _levels(specs)

    for rid, s in specs.items():
        if s["m"] < 1 or s["n"] < 1:
            raise TeacherError(f"region {rid!r}: m and n must be >= 1")
        if len(set(s["children"])) != len(s["children"]):
            raise TeacherError(f"region {rid!r}: repeated child")

    parents = {rid: [p for p, s in specs.items() if rid in s["children"]] for rid in specs}
    roots = [rid for rid, ps in parents.items() if not ps]
    if len(roots) != 1:
        raise TeacherError(f"expected exactly one root region, found {roots}")
    for rid, ps in parents.items():
        if len(ps) > 1:
            if not allow_overlap:
                raise TeacherError(f"region {rid!r} has several parents {ps}; receptive fields must not overlap")
            if specs[rid]["children"]:
                raise TeacherError(f"region {rid!r}: only leaf variables may be shared between parents")

    regions = {rid: Region(rid, s["children"], s["m"], s["n"], levels[rid]) for rid, s in specs.items()}
    leaf_order = tuple(rid for rid in specs if not specs[rid]["children"])

    fn_specs = spec.get("fns", {})
    fns = {}
    for rid, reg in regions.items():
        if reg.is_leaf:
            if rid in fn_specs:
                raise TeacherError(f"leaf region {rid!r} cannot have a summarization fn")
            continue
        if rid not in fn_specs:
            raise TeacherError(f"region {rid!r} has no summarization fn")
        child_ms = [regions[c].m for c in reg.children]
        table = np.asarray(_fn_table(fn_specs[rid], child_ms, reg.m, rid))
        if not np.issubdtype(table.dtype, np.integer):
            if not np.all(table == np.round(table)):
                raise TeacherError(f"region {rid!r}: table entries must be integers")
            table = table.astype(np.int64)
        if table.min() < 0 or table.max() >= reg.m:
            raise TeacherError(f"region {rid!r}: table values must lie in 0..{reg.m - 1}")
        missing = np.setdiff1d(np.arange(reg.m), table)
        if missing.size:
            raise TeacherError(f"region {rid!r}: non-surjective summarization, events {missing.tolist()} unreachable")
        table = table.astype(np.int64)
        table.setflags(write=False)
        fns[rid] = SummarizationFn(rid, table)

    prior = _leaf_prior(spec.get("leaf_prior", "uniform"), [regions[l].m for l in leaf_order])
    if np.any(prior < 0) or not np.all(np.isfinite(prior)):
        raise TeacherError("leaf_prior must be nonnegative")
    if abs(prior.sum() - 1.0) > 1e-12:
        raise TeacherError(f"leaf_prior sums to {prior.sum()!r}, not 1")
    prior = prior.copy()
    prior.setflags(write=False)
    return TeacherGraph(regions, fns, leaf_order, prior, allow_overlap)


def load_teacher(path):
    return build_teacher(Path(path))


# --------------------------------------------------------------------------
# enumeration


def enumerate_events(g, cap=None):
    """Push the leaf prior through the ladder exactly.

    Returns an :class:`EventDistribution` with every region's marginal and the
    joint ``P(z_alpha, z_beta)`` for every parent/child pair.
    """
    cap = enumeration_cap(cap)
    shape = g.leaf_prior.shape
    total = int(np.prod(shape))
    if total > cap:
        raise TeacherError(f"{total} leaf tuples exceed the enumeration cap {cap}")

    grids = np.indices(shape) if shape else np.zeros((0,), dtype=np.int64)
    values = {leaf: grids[i] for i, leaf in enumerate(g.leaf_order)}
    for rid in g.topological_order():
        reg = g.regions[rid]
        if reg.is_leaf:
            continue
        values[rid] = g.fns[rid].table[tuple(values[c] for c in reg.children)]

    w = g.leaf_prior.ravel()
    marginals = {}
    for rid, reg in g.regions.items():
        marginals[rid] = np.bincount(values[rid].ravel(), weights=w, minlength=reg.m)
    joints = {}
    for a, b in g.edges():
        ma, mb = g.regions[a].m, g.regions[b].m
        idx = values[a].ravel() * mb + values[b].ravel()
        joints[(a, b)] = np.bincount(idx, weights=w, minlength=ma * mb).reshape(ma, mb)
    return EventDistribution(g, values, marginals, joints)


def conditional_table(g, alpha, beta, dist=None):
    """Event table ``P(z_beta | z_alpha)`` for a child ``beta`` of ``alpha``."""
    if beta not in g.regions[alpha].children:
        raise TeacherError(f"{beta!r} is not a child of {alpha!r}")
    if dist is None:
        dist = enumerate_events(g)
    joint = dist.joint(alpha, beta)
    pa = dist.marginals[alpha]
    pb = dist.marginals[beta]
    for rid, p in ((alpha, pa), (beta, pb)):
        zero = np.flatnonzero(p <= 0)
        if zero.size:
            raise TeacherError(f"region {rid!r}: event {int(zero[0])} has zero prior; conditionals undefined")
    P = joint / pa[:, None]
    Pb = joint / pb[None, :]
    return EventTable(alpha, beta, P, Pb, pa.copy(), pb.copy())


def all_tables(g, dist=None):
    """Event tables for every parent/child edge, keyed by ``(alpha, beta)``."""
    if dist is None:
        dist = enumerate_events(g)
    return {(a, b): conditional_table(g, a, b, dist) for a, b in g.edges()}


@dataclass
class ConsistencyReport:
    row_sum: float
    entry_range: float
    lambda_identity: float
    marginal_agreement: float
    flagged: list

    def ok(self, tol=1e-12):
        return max(self.row_sum, self.entry_range, self.lambda_identity, self.marginal_agreement) < tol


def validate_consistency(tables, tol=1e-12):
    """Report the worst violations of stochasticity and Lambda-consistency.

    ``marginal_agreement`` compares ``P(z_beta)`` as derived through each
    parent (``P^T p_alpha``) against the stored child prior and against each
    other.
    """
    row_sum = entry_range = lam = agree = 0.0
    flagged = []
    derived = {}
    for (a, b), t in tables.items():
        rs = float(np.max(np.abs(t.P.sum(axis=1) - 1.0)))
        er = float(max(0.0, -t.P.min(), t.P.max() - 1.0))
        li = t.lambda_residual()
        via = t.P.T @ t.prior_alpha
        derived.setdefault(b, []).append(via)
        ag = float(np.max(np.abs(via - t.prior_beta)))
        for name, v in (("row_sum", rs), ("entry_range", er), ("lambda_identity", li), ("marginal", ag)):
            if v >= tol:
                flagged.append((a, b, name, v))
        row_sum, entry_range, lam, agree = max(row_sum, rs), max(entry_range, er), max(lam, li), max(agree, ag)
    for b, vs in derived.items():
        for v in vs[1:]:
            d = float(np.max(np.abs(v - vs[0])))
            if d >= tol:
                flagged.append((None, b, "cross_parent", d))
            agree = max(agree, d)
    return ConsistencyReport(row_sum, entry_range, lam, agree, flagged)


def table_to_csv(table, path):
    """Write ``P(z_beta | z_alpha)``; one row per conditioning event."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z_{table.alpha}"] + [f"{table.beta}={b}" for b in range(table.P.shape[1])])
        for a, row in enumerate(table.P):
            w.writerow([a] + [repr(float(x)) for x in row])


# --------------------------------------------------------------------------
# stock teachers


def xor_teacher():
    return build_teacher({
        "regions": [{"id": "z1", "m": 2}, {"id": "z2", "m": 2},
                    {"id": "omega", "children": ["z1", "z2"], "m": 2, "n": 2}],
        "fns": {"omega": "xor"},
        "leaf_prior": "uniform",
    })


def pairing_teacher(prior="uniform"):
    return build_teacher({
        "regions": [{"id": "z1", "m": 2}, {"id": "z2", "m": 2},
                    {"id": "omega", "children": ["z1", "z2"], "m": 4, "n": 4}],
        "fns": {"omega": "bijective"},
        "leaf_prior": prior,
    })


def random_injective_teacher(seed, hidden_n=3):
    """A small injective ladder (delta regime) whose shape is chosen by ``seed``.

    Shapes stay within 6 leaf variables, leaf cardinality <= 4 and 3 levels.
    """
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        ms = [int(rng.integers(2, 5)), int(rng.integers(2, 4))]
        regions = [{"id": f"x{i}", "m": m} for i, m in enumerate(ms)]
        top = int(np.prod(ms))
        regions.append({"id": "omega", "children": ["x0", "x1"], "m": top, "n": top})
        fns = {"omega": f"permutation:{seed}"}
    elif kind == 1:
        ms = [2, 2, int(rng.integers(2, 4))]
        regions = [{"id": f"x{i}", "m": m} for i, m in enumerate(ms)]
        top = int(np.prod(ms))
        regions.append({"id": "omega", "children": ["x0", "x1", "x2"], "m": top, "n": top})
        fns = {"omega": f"permutation:{seed}"}
    elif kind == 2:
        regions = [{"id": f"x{i}", "m": 2} for i in range(4)]
        regions += [{"id": "a", "children": ["x0", "x1"], "m": 4, "n": hidden_n},
                    {"id": "b", "children": ["x2", "x3"], "m": 4, "n": hidden_n},
                    {"id": "omega", "children": ["a", "b"], "m": 16, "n": 16}]
        fns = {"a": f"permutation:{seed}", "b": f"permutation:{seed + 1}", "omega": f"permutation:{seed + 2}"}
    else:
        ms = [2, 3, 2]
        regions = [{"id": f"x{i}", "m": m} for i, m in enumerate(ms)]
        regions += [{"id": "a", "children": ["x0", "x1"], "m": 6, "n": hidden_n},
                    {"id": "omega", "children": ["a", "x2"], "m": 12, "n": 12}]
        fns = {"a": f"permutation:{seed}", "omega": f"permutation:{seed + 1}"}
    return build_teacher({"regions": regions, "fns": fns, "leaf_prior": f"random:{seed}"})
