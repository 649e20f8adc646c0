import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laddersim import dynamics as dyn
from laddersim import hull
from laddersim import oracle as orc
from laddersim import teacher as tch


def chain(m=2, prior="uniform"):
    g = tch.build_teacher({"regions": [{"id": "x", "m": m}, {"id": "omega", "children": ["x"], "m": m}],
                           "fns": {"omega": "identity"}, "leaf_prior": prior})
    return g, tch.all_tables(g)


def test_identity_pipeline():
    _, tabs = chain()
    st_ = dyn.forward_pass(tabs, dyn.WeightSet({("x", "omega"): np.eye(2)}))
    np.testing.assert_array_equal(st_.F["omega"], np.eye(2))
    assert dyn.loss(st_) == 0.0


def test_hard_gate_invariants():
    g = tch.random_injective_teacher(2)
    tabs = tch.all_tables(g)
    st_ = dyn.forward_pass(tabs, dyn.init_weights(tabs, dyn.node_counts(g), seed=1))
    for r in st_.F:
        assert set(np.unique(st_.D[r])) <= {0.0, 1.0}
        np.testing.assert_array_equal(st_.F[r], st_.Fraw[r] * st_.D[r])
        assert st_.F[r].shape == (g.regions[r].m, g.regions[r].n)


def test_gate_closed_at_zero():
    assert dyn.hard_gate(np.array([0.0]))[0] == dyn.GATE_AT_ZERO == 0.0


def test_leaf_m_ne_n_rejected():
    _, tabs = chain(3)
    with pytest.raises(dyn.DynamicsError, match="m == n"):
        dyn.forward_pass(tabs, dyn.WeightSet({("x", "omega"): np.ones((2, 3))}))


def test_shape_mismatch_rejected():
    g = tch.random_injective_teacher(2)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0)
    w.W[("a", "omega")] = np.ones((5, 16))
    with pytest.raises(dyn.DynamicsError):
        dyn.forward_pass(tabs, w)


def test_zero_top_gives_zero_everywhere():
    g = tch.random_injective_teacher(3)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0)
    st_ = dyn.forward_pass(tabs, w)
    dyn.backward_pass(tabs, w, st_, top=np.zeros((12, 12)))
    assert all(not np.any(G) for G in st_.Gt.values())
    assert all(not np.any(u) for u in dyn.weight_update(tabs, st_).values())


def test_linear_chain_backward_and_update():
    _, tabs = chain()
    W = np.array([[0.3, -0.2], [0.1, 0.4]])
    w = dyn.WeightSet({("x", "omega"): W})
    st_ = dyn.forward_pass(tabs, w, "linear")
    dyn.backward_pass(tabs, w, st_)
    np.testing.assert_allclose(st_.Gout["x"], st_.Gt["omega"] @ W.T, atol=1e-15)
    np.testing.assert_allclose(dyn.weight_update(tabs, st_)[("x", "omega")], st_.Gt["omega"], atol=1e-15)


def test_loss_examples():
    _, tabs = chain(4)
    st_ = dyn.forward_pass(tabs, dyn.WeightSet({("x", "omega"): np.zeros((4, 4))}))
    assert dyn.loss(st_) == 4.0


def test_top_m_ne_n_rejected():
    g = tch.build_teacher({"regions": [{"id": "x", "m": 2}, {"id": "omega", "children": ["x"], "m": 2, "n": 3}],
                           "fns": {"omega": "identity"}})
    tabs = tch.all_tables(g)
    st_ = dyn.forward_pass(tabs, dyn.init_weights(tabs, {"omega": 3}))
    with pytest.raises(dyn.DynamicsError):
        dyn.loss(st_)


def test_update_norm_cap():
    g = tch.random_injective_teacher(0)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0)
    st_ = dyn.forward_pass(tabs, w)
    dyn.backward_pass(tabs, w, st_)
    for u in dyn.weight_update(tabs, st_, max_update_norm=1e-3).values():
        assert np.linalg.norm(u) <= 1e-3 * (1 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.booleans())
def test_backward_is_adjoint_of_forward_in_linear_regime(seed, bias):
    g = tch.random_injective_teacher(seed)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=seed, bias=bias)
    st_ = dyn.forward_pass(tabs, w, "linear")
    rng = np.random.default_rng(seed)
    for (a, b), t in tabs.items():
        Gt = rng.standard_normal(st_.F[a].shape)
        W = w.W[(b, a)][:-1] if bias else w.W[(b, a)]
        lhs = np.sum(Gt * (t.P @ st_.F[b] @ W))
        rhs = np.sum((t.P.T @ Gt @ W.T) * st_.F[b])
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


def test_expected_gating_with_oracle_gates_matches_hard():
    g = tch.random_injective_teacher(1)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=4, bias=True)
    out = orc.net_forward_backward(g, w, orc.enumerate_inputs(g, orc.delta_inputs(g)))
    gates = {r: orc.marginalize(out, r, "fprime") for r in g.regions if not g.regions[r].is_leaf}
    cfg = dyn.TrainConfig(lr=0.05, steps=5)
    a = dyn.train(tabs, w, cfg)
    b = dyn.train(tabs, w, dyn.with_gating(cfg, "expected"), gates=gates)
    assert a.losses[0] == b.losses[0]


def test_weighted_loss_gradient_is_descent_direction():
    # dW is minus the gradient of the prior-weighted loss (checked by central differences)
    g = tch.random_injective_teacher(0)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=3, bias=True)
    st_ = dyn.forward_pass(tabs, w)
    dyn.backward_pass(tabs, w, st_)
    dW = dyn.weight_update(tabs, st_)
    k = sorted(dW)[0]
    h = 1e-6
    for idx in [(0, 0), (1, 2), (-1, 3)]:
        wp, wm = w.copy(), w.copy()
        wp.W[k][idx] += h
        wm.W[k][idx] -= h
        fd = (dyn.weighted_loss(dyn.forward_pass(tabs, wp)) - dyn.weighted_loss(dyn.forward_pass(tabs, wm))) / (2 * h)
        assert abs(-fd - dW[k][idx]) < 1e-7


def test_train_steps_zero_and_determinism():
    g = tch.random_injective_teacher(2)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0)
    r0 = dyn.train(tabs, w, dyn.TrainConfig(steps=0))
    assert len(r0.rows) == 1
    assert all(np.array_equal(r0.weights.W[k], w.W[k]) for k in w.W)
    a = dyn.train(tabs, w, dyn.TrainConfig(lr=0.1, steps=20))
    b = dyn.train(tabs, w, dyn.TrainConfig(lr=0.1, steps=20))
    assert [r["loss"] for r in a.rows] == [r["loss"] for r in b.rows]


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_raises_with_step():
    _, tabs = chain()
    w = dyn.WeightSet({("x", "omega"): np.full((2, 2), 1e200)})
    with pytest.raises(dyn.DivergenceError) as e:
        dyn.train(tabs, w, dyn.TrainConfig(lr=1e200, steps=5))
    assert e.value.step >= 0


def test_config_validation():
    with pytest.raises(dyn.DynamicsError):
        dyn.TrainConfig(lr=0)
    with pytest.raises(dyn.DynamicsError):
        dyn.TrainConfig(steps=-1)
    with pytest.raises(dyn.DynamicsError):
        dyn.TrainConfig(gating_mode="soft")


def test_label_gradient_shape():
    G = dyn.label_gradient(np.array([0.5, 0.5]), 1.0, 1.0)
    np.testing.assert_array_equal(G, [[0.5, -0.5], [-0.5, 0.5]])


def test_linear_below_relu_on_bottleneck():
    g = tch.build_teacher({"regions": [{"id": "x", "m": 4}, {"id": "h", "children": ["x"], "m": 4, "n": 2},
                                       {"id": "omega", "children": ["h"], "m": 4, "n": 4}],
                           "fns": {"h": "identity", "omega": "identity"}, "leaf_prior": "random:0"})
    tabs = tch.all_tables(g)
    n = dyn.node_counts(g)
    lin = dyn.train(tabs, dyn.init_weights(tabs, n, seed=0), dyn.TrainConfig(lr=0.5, steps=2000, gating_mode="linear"))
    assert lin.losses[-1] >= 2 - 1e-6
    relu = dyn.train(tabs, dyn.init_weights(tabs, n, seed=1, bias=True, bias_init=0.3), dyn.TrainConfig(lr=0.5, steps=3000))
    assert relu.losses[-1] < hull.linear_lower_bound(tabs, n)[1]


def test_weights_roundtrip(tmp_path):
    g = tch.random_injective_teacher(3)
    tabs = tch.all_tables(g)
    w = dyn.init_weights(tabs, dyn.node_counts(g), seed=0, bias=True)
    dyn.save_weights(w, tmp_path)
    back = dyn.load_weights(tmp_path)
    assert back.bias_augmented
    for k in w.W:
        assert np.array_equal(back.W[k], w.W[k])


def test_trajectory_csv(tmp_path):
    _, tabs = chain()
    r = dyn.train(tabs, dyn.WeightSet({("x", "omega"): np.eye(2) * 0.5}), dyn.TrainConfig(steps=3))
    r.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("step,loss") and len(lines) == 5
