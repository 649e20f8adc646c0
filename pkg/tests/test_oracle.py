import json

import numpy as np
import pytest

from laddersim import dynamics as dyn
from laddersim import oracle as orc
from laddersim import teacher as tch

from oracles import central_difference


def chain():
    g = tch.build_teacher({"regions": [{"id": "x", "m": 2}, {"id": "omega", "children": ["x"], "m": 2}],
                           "fns": {"omega": "identity"}, "leaf_prior": [0.25, 0.75]})
    return g


def test_xor_delta_inputs():
    g = tch.xor_teacher()
    inp = orc.enumerate_inputs(g, orc.delta_inputs(g))
    assert len(inp) == 4
    np.testing.assert_array_equal(inp.prob, np.full(4, 0.25))


def test_lossy_inputs_normalized():
    g = tch.xor_teacher()
    inp = orc.enumerate_inputs(g, orc.lossy_inputs(g, 2, seed=0))
    assert len(inp) == 16 and abs(inp.prob.sum() - 1) < 1e-12


def test_enumeration_cap():
    g = tch.xor_teacher()
    with pytest.raises(tch.TeacherError):
        orc.enumerate_inputs(g, orc.lossy_inputs(g, 2), cap=10)


def test_input_model_validation():
    g = chain()
    with pytest.raises(orc.OracleError, match="distinct"):
        orc.delta_inputs(g, {"x": np.ones((2, 2))})


def test_zero_weights():
    g = tch.random_injective_teacher(1)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0)
    w = dyn.WeightSet({k: np.zeros_like(v) for k, v in w.W.items()})
    out = orc.net_forward_backward(g, w, orc.enumerate_inputs(g, orc.delta_inputs(g)))
    for r, reg in g.regions.items():
        if not reg.is_leaf:
            assert not np.any(out.f[r])
            assert not np.any(out.g[r])  # gates are closed at zero
    root = g.root.id
    np.testing.assert_array_equal(out.gout[root], np.eye(g.root.m)[out.inputs.events[root]])


def test_hand_computed_two_node_net():
    g = chain()
    W = np.array([[2.0, -1.0], [0.5, 1.0]])
    out = orc.net_forward_backward(g, dyn.WeightSet({("x", "omega"): W}), orc.enumerate_inputs(g, orc.delta_inputs(g)))
    # x = e0: raw [2, -1] -> f [2, 0], target e0 -> residual [-1, 0]
    # x = e1: raw [0.5, 1] -> f [0.5, 1], target e1 -> residual [-0.5, 0]
    order = np.argsort(out.inputs.events["x"])
    np.testing.assert_array_equal(out.f["omega"][order], [[2.0, 0.0], [0.5, 1.0]])
    np.testing.assert_array_equal(out.g["omega"][order], [[-1.0, 0.0], [-0.5, 0.0]])
    assert out.loss == 0.25 * 0.5 * 1.0 + 0.75 * 0.5 * 0.25
    dW = orc.oracle_weight_update(out)[("x", "omega")]
    np.testing.assert_array_equal(dW, [[-0.25, 0.0], [-0.375, 0.0]])


def test_marginalize_against_filtering():
    g = tch.random_injective_teacher(2)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=7, bias=True)
    out = orc.net_forward_backward(g, w, orc.enumerate_inputs(g, orc.lossy_inputs(g, 2, seed=1)))
    root = g.root.id
    m = orc.marginalize(out, root, "f", of=root)
    z = out.inputs.events[root]
    for a in range(g.root.m):
        sel = z == a
        expect = (out.inputs.prob[sel] @ out.f[root][sel]) / out.inputs.prob[sel].sum()
        np.testing.assert_allclose(m[a], expect, rtol=0, atol=1e-14)


def test_marginal_on_sure_event_is_mean():
    g = chain()
    out = orc.net_forward_backward(g, dyn.WeightSet({("x", "omega"): np.eye(2)}),
                                   orc.enumerate_inputs(g, orc.delta_inputs(g)))
    labels = np.zeros(len(out.inputs), dtype=int)
    c = orc.conditional_mean(out.f["omega"], out.inputs.prob, labels, 1)
    np.testing.assert_allclose(c[0], out.inputs.prob @ out.f["omega"], atol=1e-15)
    with pytest.raises(orc.OracleError, match="zero probability"):
        orc.conditional_mean(out.f["omega"], out.inputs.prob, labels, 2)


def test_leaf_marginal_under_delta_is_the_vector():
    g = tch.xor_teacher()
    out = orc.net_forward_backward(g, dyn.init_weights(tch.all_tables(g), {"omega": 2}, seed=0),
                                   orc.enumerate_inputs(g, orc.delta_inputs(g)))
    np.testing.assert_array_equal(orc.marginalize(out, "z1", "f"), np.eye(2))


def test_recursion_on_xor_and_lossy():
    g = tch.xor_teacher()
    w = dyn.init_weights(tch.all_tables(g), {"omega": 2}, seed=7, bias=True)
    for im in (orc.delta_inputs(g), orc.lossy_inputs(g, 2, seed=8)):
        out = orc.net_forward_backward(g, w, orc.enumerate_inputs(g, im))
        assert orc.check_recursion(g, out) < 1e-12


def test_oracle_gradient_matches_finite_differences():
    g = tch.random_injective_teacher(0)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=2, bias=True)
    inp = orc.enumerate_inputs(g, orc.lossy_inputs(g, 2, seed=3))
    dW = orc.oracle_weight_update(orc.net_forward_backward(g, w, inp))
    for k in sorted(w.W)[:2]:
        def loss_at(M, k=k):
            v = w.copy()
            v.W[k] = M
            return orc.oracle_loss(g, v, inp)
        fd = central_difference(loss_at, w.W[k], h=1e-5)
        np.testing.assert_allclose(-fd, dW[k], rtol=0, atol=1e-6)


def test_bn_decorrelates_f_and_g():
    from laddersim import scenarios as sc
    g = tch.random_injective_teacher(3)
    tabs = tch.all_tables(g)
    w, _ = sc._bn_ready_weights(tabs, dyn.node_counts(g), 0, True, "a", "post")
    out = orc.net_forward_backward(g, w, orc.enumerate_inputs(g, orc.delta_inputs(g)), bn_regions={"a"})
    # E_x[f_act g_raw] for the node's post-ReLU activation (the BN input) vanishes
    p = out.inputs.prob
    assert np.max(np.abs(p @ (out.f_act["a"] * out.graw["a"]))) < 1e-10


def test_exactness_refusal_and_report(tmp_path):
    g = tch.xor_teacher()
    w = dyn.init_weights(tch.all_tables(g), {"omega": 2}, seed=0)
    with pytest.raises(orc.PreconditionError, match="non-injective"):
        orc.compare_exactness(g, w, orc.delta_inputs(g))
    gi = tch.random_injective_teacher(4)
    ti = tch.all_tables(gi)
    rep = orc.compare_exactness(gi, dyn.init_weights(ti, dyn.node_counts(gi), seed=7), orc.delta_inputs(gi), tables=ti)
    assert rep.max_divergence < 1e-10 and rep.delta_regime
    d = json.loads(rep.to_json())
    assert set(d) >= {"F", "Gt", "dW", "max_divergence", "decorrelation"}
    lossy = orc.compare_exactness(g, w, orc.lossy_inputs(g, 2, seed=0))
    assert not lossy.delta_regime and lossy.max_decorrelation >= 0


def test_input_csv(tmp_path):
    g = tch.xor_teacher()
    inp = orc.enumerate_inputs(g, orc.delta_inputs(g))
    inp.to_csv(tmp_path / "x.csv")
    rows = (tmp_path / "x.csv").read_text().splitlines()
    assert len(rows) == 5 and rows[0].startswith("index,prob")
