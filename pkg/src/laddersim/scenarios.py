"""Named, seeded experiments that tie the modules together and record checks.

Each scenario takes a config dict and a seed and returns a
:class:`ScenarioResult`: a list of checks (measured value, tolerance,
comparison, pass flag), a JSON-able results dict, a trajectory table and any
extra CSV tables. Nothing here reads clocks or global random state.
"""

from __future__ import annotations

import copy
import csv
import json
import operator
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import batchnorm as bn
from . import disentangle as dis
from . import dynamics as dyn
from . import hull
from . import oracle as orc
from . import teacher as tch

OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "==": operator.eq}


class ConfigError(ValueError):
    pass


@dataclass
class Check:
    name: str
    value: float
    tol: float
    op: str
    passed: bool

    def to_dict(self):
        return {"name": self.name, "value": self.value, "tol": self.tol, "op": self.op, "pass": self.passed}

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value!r} {self.op} {self.tol!r}"


@dataclass
class ScenarioResult:
    scenario: str
    seed: int
    config: dict
    checks: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    trajectory: tuple = ((), ())
    tables: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, name, value, tol, op="<"):
        """Record ``value op tol``; ``config["tolerances"][name]`` overrides ``tol``."""
        tol = float(self.config.get("tolerances", {}).get(name, tol))
        value = float(value)
        c = Check(name, value, tol, op, bool(OPS[op](value, tol)))
        self.checks.append(c)
        return c

    def to_dict(self):
        return {"scenario": self.scenario, "seed": self.seed, "config": self.config,
                "checks": [c.to_dict() for c in self.checks], "pass": self.passed,
                "results": _jsonable(self.results)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# --------------------------------------------------------------------------
# config


def bundled_config(name):
    path = resources.files("laddersim") / "configs" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"no bundled config for scenario {name!r}")
    return json.loads(path.read_text())


def load_config(name, path=None, steps=None, lr=None):
    cfg = bundled_config(name) if path is None else json.loads(Path(path).read_text())
    cfg = copy.deepcopy(cfg)
    if cfg.get("scenario", name) != name:
        raise ConfigError(f"config is for scenario {cfg['scenario']!r}, not {name!r}")
    cfg["scenario"] = name
    if steps is not None:
        if steps < 0:
            raise ConfigError("--steps must be >= 0")
        cfg["steps"] = int(steps)
    if lr is not None:
        if not lr > 0:
            raise ConfigError("--lr must be > 0")
        cfg["lr"] = float(lr)
    return cfg


def make_teacher(spec):
    """Teacher from a config entry: ``{"random_injective": s}``, ``"xor"``, ``"pairing"``, a path or an inline spec."""
    if spec == "xor":
        return tch.xor_teacher()
    if spec == "pairing":
        return tch.pairing_teacher()
    if isinstance(spec, str):
        return tch.load_teacher(spec)
    if "random_injective" in spec:
        return tch.random_injective_teacher(int(spec["random_injective"]), int(spec.get("hidden_n", 3)))
    return tch.build_teacher(spec)


def teacher_label(spec):
    if isinstance(spec, str):
        return spec
    if "random_injective" in spec:
        return f"random_injective:{spec['random_injective']}"
    return spec.get("name", "inline")


# --------------------------------------------------------------------------
# exactness


def run_exactness(cfg, seed):
    res = ScenarioResult("exactness", seed, cfg)
    steps, lr = int(cfg.get("steps", 3)), float(cfg.get("lr", 0.05))
    traj, div_rows = [], []
    worst = {"F": 0.0, "Gt": 0.0, "dW": 0.0}
    lossy = []
    for ti, spec in enumerate(cfg["teachers"]):
        g = make_teacher(spec)
        label = teacher_label(spec)
        tabs = tch.all_tables(g)
        n = dyn.node_counts(g)
        im = orc.delta_inputs(g)
        for bias in cfg.get("bias", [False, True]):
            w0 = dyn.init_weights(tabs, n, seed=seed * 1000 + ti, bias=bias)

            def hook(step, weights, updates, state, label=label, bias=bias):
                rep = orc.compare_exactness(g, weights, im, tables=tabs)
                for key in worst:
                    worst[key] = max(worst[key], max(getattr(rep, key).values()))
                traj.append([label, int(bias), step, dyn.loss(state), rep.max_divergence])
                for r in sorted(rep.F):
                    div_rows.append([label, int(bias), step, r, rep.F[r], rep.Gt[r], rep.D[r]])

            dyn.train(tabs, w0, dyn.TrainConfig(lr=lr, steps=steps), callback=hook)
            rl = orc.compare_exactness(g, w0, orc.lossy_inputs(g, int(cfg.get("lossy_per_event", 2)), seed=seed + ti),
                                       tables=tabs)
            lossy.append({"teacher": label, "bias": bias, "max_divergence": rl.max_divergence,
                          "max_decorrelation": rl.max_decorrelation})

    # zero weights: both sides trivial
    g0 = make_teacher(cfg["teachers"][0])
    t0 = tch.all_tables(g0)
    wz = dyn.init_weights(t0, dyn.node_counts(g0), seed=seed)
    wz = dyn.WeightSet({k: np.zeros_like(v) for k, v in wz.W.items()})
    zero = orc.compare_exactness(g0, wz, orc.delta_inputs(g0), tables=t0).max_divergence

    try:
        orc.compare_exactness(tch.xor_teacher(), dyn.init_weights(tch.all_tables(tch.xor_teacher()),
                                                                  {"omega": 2}, seed=seed), orc.delta_inputs(tch.xor_teacher()))
        refused = 0.0
    except orc.PreconditionError:
        refused = 1.0

    tol = float(cfg.get("tolerance", 1e-10))
    res.check("max_divergence_F", worst["F"], tol)
    res.check("max_divergence_Gt", worst["Gt"], tol)
    res.check("max_divergence_dW", worst["dW"], tol)
    res.check("zero_weights_divergence", zero, 0.0, "==")
    res.check("non_injective_refused", refused, 1.0, "==")
    res.check("teacher_count", len(cfg["teachers"]), 5, ">=")
    res.results = {"worst": worst, "lossy": lossy, "zero_weights_divergence": zero}
    res.trajectory = (("teacher", "bias", "step", "loss", "max_divergence"), traj)
    res.tables["divergence.csv"] = (("teacher", "bias", "step", "region", "F", "Gt", "D"), div_rows)
    return res


# --------------------------------------------------------------------------
# recursion


def run_recursion(cfg, seed):
    res = ScenarioResult("recursion", seed, cfg)
    rows = []
    worst = {"delta": 0.0, "lossy": 0.0}
    for ti, spec in enumerate(cfg["teachers"]):
        g = make_teacher(spec)
        tabs = tch.all_tables(g)
        models = {"delta": orc.delta_inputs(g),
                  "lossy": orc.lossy_inputs(g, int(cfg.get("lossy_per_event", 2)), seed=seed + ti)}
        for bias in cfg.get("bias", [True]):
            w = dyn.init_weights(tabs, dyn.node_counts(g), seed=seed * 1000 + ti, bias=bias)
            for name, im in models.items():
                out = orc.net_forward_backward(g, w, orc.enumerate_inputs(g, im))
                v = max(orc.check_recursion(g, out, q) for q in ("g", "f"))
                worst[name] = max(worst[name], v)
                rows.append([teacher_label(spec), name, int(bias), len(out.inputs), v])
    tol = float(cfg.get("tolerance", 1e-12))
    res.check("recursion_violation_delta", worst["delta"], tol)
    res.check("recursion_violation_lossy", worst["lossy"], tol)
    res.results = {"worst": worst}
    res.trajectory = (("teacher", "inputs", "bias", "n_inputs", "violation"), rows)
    return res


# --------------------------------------------------------------------------
# batch norm


def projection_suite(rng, trials=50, sizes=(2, 3, 5, 8), h=1e-5):
    """Worst-case errors of the Batch Norm backward identities over random inputs.

    Each draw is checked under uniform weights and under Dirichlet weights
    mixed half-and-half with uniform, which keeps every weight >= 1/(2N).
    Near-zero weights make ``c1/sigma`` large and push rounding in ``J f``
    above 1e-12 without any change in the algebra.
    """
    out = dict.fromkeys(["orthogonality", "jacobian_null", "finite_difference", "elementwise",
                         "idempotence", "span_equivalence"], 0.0)
    for t in range(trials):
        N = sizes[t % len(sizes)]
        f, g = rng.standard_normal(N), rng.standard_normal(N)
        c1, c0 = rng.uniform(0.5, 2.0), rng.standard_normal()
        for w in (None, 0.5 * rng.dirichlet(np.ones(N)) + 0.5 / N):
            p = bn.BNParams(c1, c0, w)
            rec = bn.bn_forward(f, p)
            gf, gc = bn.bn_backward(g, rec, p)
            W = rec.w
            out["orthogonality"] = max(out["orthogonality"], abs(bn.inner(gf, f, W)), abs(bn.inner(gf, np.ones(N), W)))
            J = bn.bn_jacobian(rec, p)
            out["jacobian_null"] = max(out["jacobian_null"], np.max(np.abs(J @ f)), np.max(np.abs(J @ np.ones(N))))

            def L(x):
                return float(np.sum(W * g * bn.bn_forward(x, p).f_bar))

            fd = np.array([(L(f + h * e) - L(f - h * e)) / (2 * h * W[k]) for k, e in enumerate(np.eye(N))])
            out["finite_difference"] = max(out["finite_difference"], np.max(np.abs(fd - gf)))
            proj = gf * rec.sigma / c1
            again = bn.project_out(proj, [f, np.ones(N)], W)
            out["idempotence"] = max(out["idempotence"], np.max(np.abs(again - proj)))
            alt = bn.project_out(g, [rec.f_tilde, np.ones(N)], W)
            out["span_equivalence"] = max(out["span_equivalence"], np.max(np.abs(alt - proj)))
            if w is None:
                dx, dgamma, dbeta = bn.elementwise_bn_backward(g, f, c1)
                out["elementwise"] = max(out["elementwise"], np.max(np.abs(dx - gf)),
                                         abs(dgamma / N - gc[0]), abs(dbeta / N - gc[1]))
    return {k: float(v) for k, v in out.items()}


def _bn_ready_weights(tabs, n, seed, bias, region, placement, attempts=50):
    """First init (seed, seed+1, ...) for which Batch Norm at ``region`` is defined."""
    for k in range(attempts):
        w = dyn.init_weights(tabs, n, seed=seed + k, bias=bias)
        try:
            dyn.forward_pass(tabs, w.copy(), bn_regions={region}, bn_placement=placement)
            return w, k
        except bn.BatchNormError:
            continue
    raise ConfigError(f"no init within {attempts} draws keeps Batch Norm at {region!r} defined")


def run_bn(cfg, seed):
    res = ScenarioResult("bn", seed, cfg)
    rng = np.random.default_rng(seed)
    proj = projection_suite(rng, int(cfg.get("trials", 50)))

    g = make_teacher(cfg["teacher"])
    tabs = tch.all_tables(g)
    n = dyn.node_counts(g)
    region = cfg.get("region", "a")
    steps, lr = int(cfg.get("steps", 100)), float(cfg.get("lr", 0.05))
    w0, redraws = _bn_ready_weights(tabs, n, seed, bool(cfg.get("bias", True)), region, "post")
    on = bn.energy_trace(tabs, w0, dyn.TrainConfig(lr=lr, steps=steps, bn_regions={region}), region)
    off = bn.energy_trace(tabs, w0, dyn.TrainConfig(lr=lr, steps=steps), region)

    out = orc.net_forward_backward(g, w0, orc.enumerate_inputs(g, orc.delta_inputs(g)), bn_regions={region})
    efg = float(np.max(np.abs(out.inputs.prob @ (out.f_act[region] * out.graw[region]))))

    res.check("bn_orthogonality", proj["orthogonality"], 1e-11)
    res.check("bn_jacobian_null", proj["jacobian_null"], 1e-12)
    res.check("bn_finite_difference", proj["finite_difference"], 1e-6)
    res.check("bn_elementwise_match", proj["elementwise"], 1e-12)
    res.check("bn_idempotence", proj["idempotence"], 1e-12)
    res.check("bn_span_equivalence", proj["span_equivalence"], 1e-12)
    res.check("energy_inner_with_bn", on.max("inner"), 1e-10)
    res.check("energy_second_order_with_bn", on.max("residual"), 1e-12)
    res.check("energy_identity_residual", max(on.max("identity_residual"), off.max("identity_residual")), 1e-12)
    res.check("energy_inner_without_bn", off.max("inner"), 1e-6, ">")
    res.check("oracle_E_fg_after_bn", efg, 1e-10)
    res.results = {"projection": proj, "init_redraws": redraws, "region": region}
    res.trajectory = (("step", "node", "E", "inner", "residual", "identity_residual"),
                      [[r["step"], r["node"], r["E"], r["inner"], r["residual"], r["identity_residual"]]
                       for r in on.rows])
    res.tables["energy_control.csv"] = (res.trajectory[0],
                                        [[r["step"], r["node"], r["E"], r["inner"], r["residual"],
                                          r["identity_residual"]] for r in off.rows])
    return res


# --------------------------------------------------------------------------
# expressibility


def random_vert_instances(seed, count=20, max_size=8):
    """Seeded ``(P, F)`` pairs: all-vert and mixed stochastic ``P`` with full-row-rank ``F``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        d = int(rng.integers(2, max_size + 1))
        m = int(rng.integers(2, max_size + 1))
        if i % 2 == 0:
            P = rng.dirichlet(np.full(d, 0.3), size=m)
        else:
            base = rng.dirichlet(np.ones(d), size=max(2, m - 2))
            mix = rng.dirichlet(np.ones(base.shape[0]), size=m - base.shape[0]) @ base
            P = np.vstack([base, mix])[rng.permutation(m)]
        F = rng.standard_normal((d, d + int(rng.integers(0, 3))))
        out.append((P, F))
    return out


def run_expressibility(cfg, seed):
    res = ScenarioResult("expressibility", seed, cfg)
    # construction on the all-vert ladder
    g = make_teacher(cfg["ladder"])
    tabs = tch.all_tables(g)
    vert = {f"{a}->{b}": hull.vertex_set(t.P, certificates=False).all_vert for (a, b), t in tabs.items()}
    w = hull.construct_ladder_identity_weights(tabs)
    st = dyn.forward_pass(tabs, w)
    pattern = True
    for r, Fr in st.Fraw.items():
        if st.ladder.children[r]:
            off = ~np.eye(Fr.shape[0], dtype=bool)
            pattern &= bool(np.all(np.diag(Fr) == 1.0) and np.all(Fr[off] < 0))
    relu_zero = dyn.loss(st)

    # bottleneck
    gb = make_teacher(cfg["bottleneck"])
    tb = tch.all_tables(gb)
    nb = dyn.node_counts(gb)
    r, floor = hull.linear_lower_bound(tb, nb)
    m_top = gb.root.m
    svd = hull.svd_floor(m_top, r)
    attained = dyn.loss(dyn.forward_pass(tb, hull.linear_floor_weights(tb, nb), "linear"))
    steps, lr = int(cfg.get("steps", 2000)), float(cfg.get("lr", 0.5))
    traj = []
    lin_min = np.inf
    for k in range(int(cfg.get("linear_runs", 3))):
        run = dyn.train(tb, dyn.init_weights(tb, nb, seed=seed + k), dyn.TrainConfig(lr=lr, steps=steps, gating_mode="linear"))
        lin_min = min(lin_min, min(run.losses))
        traj += [["linear", k, row["step"], row["loss"]] for row in run.rows]
    rng = np.random.default_rng(seed)
    for _ in range(int(cfg.get("random_linear_draws", 200))):
        wr = dyn.init_weights(tb, nb, seed=int(rng.integers(2 ** 31)), scale=float(rng.uniform(0.1, 3.0)))
        lin_min = min(lin_min, dyn.loss(dyn.forward_pass(tb, wr, "linear")))
    relu_final = []
    relu_steps = int(cfg.get("relu_steps", 3000))
    relu_lr = float(cfg.get("relu_lr", 0.5))
    relu_bias = float(cfg.get("relu_bias_init", 0.3))
    for k in range(int(cfg.get("relu_restarts", 8))):
        run = dyn.train(tb, dyn.init_weights(tb, nb, seed=seed + k, bias=True, bias_init=relu_bias),
                        dyn.TrainConfig(lr=relu_lr, steps=relu_steps, gating_mode="hard"))
        relu_final.append(run.losses[-1])
        traj += [["relu", k, row["step"], row["loss"]] for row in run.rows]

    # vertex invariance under full-row-rank maps
    mismatches, inst_rows = 0, []
    insts = random_vert_instances(seed, int(cfg.get("vert_instances", 20)))
    for i, (P, F) in enumerate(insts):
        ok, rep = hull.vert_invariance_check(P, F)
        mismatches += int(not ok)
        inst_rows.append([i, P.shape[0], P.shape[1], F.shape[1], int(sum(rep["flags_P"])), int(ok)])

    res.check("all_vert_tables", float(all(vert.values())), 1.0, "==")
    res.check("relu_constructed_loss", relu_zero, 0.0, "==")
    res.check("relu_diagonal_pattern", float(pattern), 1.0, "==")
    res.check("linear_floor", floor, float(cfg.get("expected_floor", 2)), "==")
    res.check("svd_floor_match", abs(svd - floor), 1e-4)
    res.check("linear_floor_attained", abs(attained - floor), 1e-4)
    res.check("linear_loss_above_floor", lin_min, floor - 1e-6, ">=")
    res.check("relu_trained_below_floor", min(relu_final), floor, "<")
    res.check("vert_invariance_mismatches", mismatches, 0, "==")
    res.check("vert_instances", len(insts), 20, ">=")
    res.results = {"vert": vert, "rank_bound": r, "floor": floor, "svd_floor": svd,
                   "floor_weights_loss": attained, "linear_min_loss": lin_min, "relu_final_losses": relu_final}
    res.trajectory = (("variant", "run", "step", "loss"), traj)
    res.tables["vert_invariance.csv"] = (("instance", "rows", "cols", "F_cols", "vertices", "match"), inst_rows)
    return res


# --------------------------------------------------------------------------
# disentanglement


def run_disentangle(cfg, seed):
    res = ScenarioResult("disentangle", seed, cfg)
    part = [list(S) for S in cfg.get("partition", dis.DEFAULT_PARTITION)]
    count = int(cfg.get("seeds", 20))
    rows = []
    fwd_worst = dict.fromkeys(dis._variant_name(*v) for v in dis.VARIANTS)
    fwd_worst = {k: 0.0 for k in fwd_worst}
    sep_worst, block_worst, uncentered_min, nonsep_min = 0.0, 0.0, np.inf, np.inf
    for s in range(seed, seed + count):
        inst = dis.random_instance(s, part)
        fw = dis.check_forward_theorem(inst)
        for k, v in fw.items():
            fwd_worst[k] = max(fwd_worst[k], v["residual"])
        up = dis.check_separable_update(inst)
        sep_worst = max(sep_worst, up["off_block_mass"])
        block_worst = max(block_worst, up["block_formula_error"])
        shifted = copy.copy(inst)
        shifted.g_alpha = [v + float(cfg.get("uncentered_shift", 0.3)) for v in inst.g_alpha]
        un = dis.check_separable_update(shifted, strict=False)
        uncentered_min = min(uncentered_min, un["off_block_mass"])
        Wbad = inst.W.copy()
        mask = dis.block_mask(part, inst.n_beta)
        Wbad[~mask] = float(cfg.get("nonseparable_entry", 0.5))
        nf = dis.check_forward_theorem(inst, W=Wbad, variants=(("linear", False),), strict=False)
        nonsep_min = min(nonsep_min, nf["linear"]["residual"])
        rows.append([s] + [fw[k]["residual"] for k in sorted(fw)] + [up["off_block_mass"], un["off_block_mass"],
                                                                     nf["linear"]["residual"]])
    demo = dis.backward_residual_demo(range(seed, seed + int(cfg.get("demo_seeds", 100))), partition=part)
    degenerate = dis.backward_residual(dis.random_instance(seed, part, centered=False, uniform_blocks=True))

    for k in sorted(fwd_worst):
        res.check(f"forward_residual_{k}", fwd_worst[k], 1e-10)
    res.check("forward_seed_count", count, 20, ">=")
    res.check("nonseparable_forward_residual", nonsep_min, 1e-6, ">")
    res.check("update_off_block_mass", sep_worst, 1e-10)
    res.check("update_block_formula_error", block_worst, 1e-10)
    res.check("uncentered_off_block_mass", uncentered_min, 1e-6, ">")
    res.check("backward_entangled_count", demo["above_threshold"], 95, ">=")
    res.check("total_probability_error", demo["max_total_probability_error"], 1e-12)
    res.check("degenerate_backward_residual", degenerate, 1e-12)
    res.results = {"forward": fwd_worst, "demo_count": demo["count"], "demo_above": demo["above_threshold"],
                   "degenerate_residual": degenerate, "partition": part}
    head = ["seed"] + [f"fwd_{k}" for k in sorted(fwd_worst)] + ["off_block", "off_block_uncentered", "fwd_nonseparable"]
    res.trajectory = (tuple(head), rows)
    res.tables["backward_demo.csv"] = (("seed", "residual", "total_probability_error"),
                                       [[r["seed"], r["residual"], r["total_probability_error"]] for r in demo["rows"]])
    return res


# --------------------------------------------------------------------------
# overfitting


def overfit_teacher(eps, sample_size=None, rng=None):
    """Two disjoint fields; the label copies ``z_alpha`` and agrees with ``z_gamma`` w.p. ``0.5 + eps``.

    With ``sample_size`` the joint of the two leaves is the empirical
    frequency of that many independent uniform draws instead.
    """
    if sample_size:
        a = rng.integers(0, 2, sample_size)
        c = rng.integers(0, 2, sample_size)
        prior = np.bincount(2 * a + c, minlength=4).reshape(2, 2) / sample_size
    else:
        if not 0 < eps < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")
        prior = np.array([[0.5 + eps, 0.5 - eps], [0.5 - eps, 0.5 + eps]]) / 2
    return tch.build_teacher({
        "regions": [{"id": "xa", "m": 2}, {"id": "xc", "m": 2},
                    {"id": "alpha", "children": ["xa"], "m": 2, "n": 1},
                    {"id": "gamma", "children": ["xc"], "m": 2, "n": 1},
                    {"id": "omega", "children": ["alpha", "gamma"], "m": 2, "n": 2}],
        "fns": {"alpha": "identity", "gamma": "identity", "omega": [[0, 0], [1, 1]]},
        "leaf_prior": prior.tolist(),
    })


def run_overfit(cfg, seed):
    res = ScenarioResult("overfit", seed, cfg)
    eps = float(cfg.get("epsilon", 0.1))
    size = cfg.get("sample_size")
    g = overfit_teacher(eps, size, np.random.default_rng(seed))
    tabs = tch.all_tables(g)
    # effective spurious strength: P(z_w = 1 | z_gamma = 1) - 0.5
    eps_eff = float(tabs[("omega", "gamma")].Pb[1, 1] - 0.5)
    c, tiny, sep = float(cfg.get("alpha_level", 0.5)), float(cfg.get("alpha_spread", 1e-7)), float(cfg.get("separation", 1.0))
    W = {("xa", "alpha"): np.array([[c], [c + tiny]]),
         ("xc", "gamma"): np.array([[0.0], [sep]]),
         ("alpha", "omega"): np.ones((1, 2)), ("gamma", "omega"): np.ones((1, 2))}
    w = dyn.WeightSet(W)
    st = dyn.forward_pass(tabs, w)
    top = dyn.label_gradient(tabs[("omega", "alpha")].prior_alpha, 1.0, 1.0)
    st.Gt = {r: np.zeros_like(st.F[r]) for r in st.F}
    st.Gt["omega"] = top
    dW = dyn.weight_update(tabs, st)
    marg = {}
    for b in ("alpha", "gamma"):
        t = tabs[("omega", b)]
        marg[b] = (t.P.T @ top) / t.prior_beta[:, None]
    # node 1 of the top carries g_0(z_w) = +1 / -1 for z_w = 1 / 0
    ga, gg = marg["alpha"][:, 1], marg["gamma"][:, 1]
    dw_true = float(np.linalg.norm(dW[("alpha", "omega")]))
    dw_spur = float(np.linalg.norm(dW[("gamma", "omega")]))
    ratio = dw_spur / dw_true if dw_true > 0 else np.inf
    f_alpha_spread = float(np.ptp(st.F["alpha"]))

    res.check("g_alpha_marginal_error", np.max(np.abs(ga - [-1.0, 1.0])), 1e-12)
    res.check("g_gamma_marginal_error", np.max(np.abs(gg - [-2 * eps_eff, 2 * eps_eff])), 1e-12)
    res.check("f_alpha_near_constant", f_alpha_spread, 1e-6, "<=")
    res.check("spurious_gt_true", float(dw_spur > dw_true), 1.0, "==")
    res.check("spurious_true_ratio", ratio, float(cfg.get("min_ratio", 10.0)), ">")
    res.results = {"epsilon": eps, "epsilon_effective": eps_eff, "g_alpha": ga, "g_gamma": gg,
                   "dw_true": dw_true, "dw_spurious": dw_spur, "ratio": ratio,
                   "F_alpha": st.F["alpha"].ravel(), "F_gamma": st.F["gamma"].ravel()}
    res.trajectory = (("z", "g_alpha", "g_gamma", "f_alpha", "f_gamma"),
                      [[z, ga[z], gg[z], st.F["alpha"][z, 0], st.F["gamma"][z, 0]] for z in range(2)])
    res.tables["updates.csv"] = (("edge", "row", "col", "dW"),
                                 [[f"{b}->{a}", i, j, dW[(b, a)][i, j]] for (b, a) in sorted(dW)
                                  for i in range(dW[(b, a)].shape[0]) for j in range(dW[(b, a)].shape[1])])
    return res


# --------------------------------------------------------------------------
# sgd as table noise


def perturb_tables(tables, rng, sigma):
    """Multiplicative log-normal noise on every ``P``, rows renormalized; priors unchanged."""
    out = {}
    for k in sorted(tables):
        t = tables[k]
        P = t.P * np.exp(sigma * rng.standard_normal(t.P.shape))
        out[k] = t.with_P(P / P.sum(axis=1, keepdims=True))
    return out


def run_sgd(cfg, seed):
    res = ScenarioResult("sgd", seed, cfg)
    g = make_teacher(cfg["teacher"])
    tabs = tch.all_tables(g)
    n = dyn.node_counts(g)
    sigma = float(cfg.get("sigma", 0.1))
    steps, lr = int(cfg.get("steps", 300)), float(cfg.get("lr", 0.5))
    conf = dyn.TrainConfig(lr=lr, steps=steps, gating_mode=cfg.get("gating_mode", "hard"))
    w0 = dyn.init_weights(tabs, n, seed=seed, bias=bool(cfg.get("bias", True)))
    noise = np.random.default_rng(seed)
    noisy = dyn.train(tabs, w0, conf, table_sampler=lambda step: perturb_tables(tabs, noise, sigma))
    clean = dyn.train(tabs, w0, conf)

    probe = np.random.default_rng(seed + 1)
    probes = [perturb_tables(tabs, probe, sigma) for _ in range(int(cfg.get("probes", 32)))]
    sens = {}
    for name, run in (("noisy", noisy), ("clean", clean)):
        base = dyn.loss(dyn.forward_pass(tabs, run.weights, conf.gating_mode))
        deltas = np.array([dyn.loss(dyn.forward_pass(p, run.weights, conf.gating_mode)) - base for p in probes])
        sens[name] = {"clean_loss": base, "mean_abs_delta": float(np.mean(np.abs(deltas))),
                      "std_delta": float(np.std(deltas)), "max_abs_delta": float(np.max(np.abs(deltas)))}
    finite = all(np.isfinite(noisy.losses)) and all(np.isfinite(clean.losses))
    res.check("runs_finite", float(finite), 1.0, "==")
    res.results = {"sigma": sigma, "sensitivity": sens,
                   "sensitivity_ratio_noisy_over_clean": sens["noisy"]["mean_abs_delta"] / sens["clean"]["mean_abs_delta"]
                   if sens["clean"]["mean_abs_delta"] > 0 else None}
    res.trajectory = (("step", "loss_noisy_training", "loss_clean_training"),
                      [[a["step"], a["loss"], b["loss"]] for a, b in zip(noisy.rows, clean.rows)])
    return res


SCENARIOS = {
    "exactness": run_exactness,
    "recursion": run_recursion,
    "bn": run_bn,
    "expressibility": run_expressibility,
    "disentangle": run_disentangle,
    "overfit": run_overfit,
    "sgd": run_sgd,
}


def run_scenario(name, cfg, seed):
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    if seed is None:
        raise ConfigError("a seed is required")
    return SCENARIOS[name](cfg, int(seed))


# --------------------------------------------------------------------------
# output


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def emit_report(result, out_dir):
    """Write ``report.json``, ``summary.txt``, ``trajectory.csv`` and extra tables; return the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    paths = [out / "report.json", out / "summary.txt", out / "trajectory.csv"]
    paths[0].write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    lines = [f"scenario {result.scenario}  seed {result.seed}  {'PASS' if result.passed else 'FAIL'}"]
    lines += [c.line() for c in result.checks]
    paths[1].write_text("\n".join(lines) + "\n")
    write_csv(paths[2], *result.trajectory)
    for name, (header, rows) in sorted(result.tables.items()):
        write_csv(out / name, header, rows)
        paths.append(out / name)
    return paths
