import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laddersim import batchnorm as bn
from laddersim import dynamics as dyn
from laddersim import teacher as tch

from oracles import central_difference


def rand_fg(seed, n=5, weighted=False):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(n)) * 0.5 + 0.5 / n if weighted else None
    return rng.standard_normal(n), rng.standard_normal(n), w


def test_already_standardized():
    rec = bn.bn_forward(np.array([1.0, -1.0]))
    assert rec.mu == 0.0 and rec.sigma == 1.0
    np.testing.assert_array_equal(rec.f_bar, [1.0, -1.0])


def test_constant_input_errors():
    with pytest.raises(bn.BatchNormError, match="sigma = 0"):
        bn.bn_forward(np.array([3.0, 3.0]))


def test_affine_output_recomputed_by_hand():
    f = np.array([1.0, 0.0, -1.0])
    rec = bn.bn_forward(f, bn.BNParams(2.0, 1.0))
    mu = sum(f) / 3
    sigma = (sum((v - mu) ** 2 for v in f) / 3) ** 0.5
    np.testing.assert_allclose(rec.f_bar, [2 * (v - mu) / sigma + 1 for v in f], rtol=0, atol=1e-15)
    assert abs(np.sum(rec.w * rec.f_hat)) < 1e-12
    assert abs(np.sum(rec.w * rec.f_tilde ** 2) - 1) < 1e-12


def test_short_or_mismatched_inputs():
    with pytest.raises(bn.BatchNormError):
        bn.bn_forward(np.array([1.0]))
    rec = bn.bn_forward(np.array([1.0, 2.0, 4.0]))
    with pytest.raises(bn.BatchNormError):
        bn.bn_backward(np.ones(2), rec)
    with pytest.raises(bn.BatchNormError):
        bn.BNParams(weight_vector=[0.5, 0.6]).weights(2)


@pytest.mark.parametrize("which", ["f", "ones"])
def test_jacobian_annihilates_span(which):
    f, _, _ = rand_fg(0)
    rec = bn.bn_forward(f)
    g = f if which == "f" else np.ones_like(f)
    g_f, _ = bn.bn_backward(g, rec)
    assert np.max(np.abs(g_f)) < 1e-12


@pytest.mark.parametrize("weighted", [False, True])
def test_backward_matches_finite_differences(weighted):
    f, g, w = rand_fg(1, weighted=weighted)
    p = bn.BNParams(1.7, 0.3, w)
    rec = bn.bn_forward(f, p)
    g_f, g_c = bn.bn_backward(g, rec, p)
    # g is a per-coordinate gradient; the objective is the weighted sum <g, f_bar>_w
    fd = central_difference(lambda x: bn.inner(g, bn.bn_forward(x, p).f_bar, rec.w), f)
    np.testing.assert_allclose(g_f * rec.w, fd, rtol=0, atol=1e-6)
    fd_c1 = (bn.inner(g, bn.bn_forward(f, bn.BNParams(1.7 + 1e-5, 0.3, w)).f_bar, rec.w)
             - bn.inner(g, bn.bn_forward(f, bn.BNParams(1.7 - 1e-5, 0.3, w)).f_bar, rec.w)) / 2e-5
    assert abs(fd_c1 - g_c[0]) < 1e-6


def test_explicit_jacobian_agrees():
    f, g, w = rand_fg(2, weighted=True)
    p = bn.BNParams(0.8, 0.0, w)
    rec = bn.bn_forward(f, p)
    J = bn.bn_jacobian(rec, p)
    np.testing.assert_allclose(J @ g, bn.bn_backward(g, rec, p)[0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9), st.booleans())
def test_projection_properties(seed, n, weighted):
    f, g, w = rand_fg(seed, n, weighted)
    p = bn.BNParams(weight_vector=w)
    rec = bn.bn_forward(f, p)
    g_f, _ = bn.bn_backward(g, rec, p)
    proj = g_f * rec.sigma
    # orthogonality
    assert abs(bn.inner(g_f, f, rec.w)) < 1e-11 * max(1, np.abs(g_f).max())
    assert abs(bn.inner(g_f, np.ones(n), rec.w)) < 1e-11 * max(1, np.abs(g_f).max())
    # idempotence
    again, _ = bn.bn_backward(proj, rec, p)
    np.testing.assert_allclose(again * rec.sigma, proj, atol=1e-12 * max(1, np.abs(proj).max()))
    # same projection through span{f, 1} directly; the normal equations lose
    # accuracy as f approaches a constant, so scale by its conditioning
    cond = max(1.0, np.abs(f).max() / rec.sigma)
    np.testing.assert_allclose(bn.project_out(g, [f, np.ones(n)], rec.w), proj,
                               atol=1e-12 * max(1, np.abs(g).max()) * cond)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_elementwise_rules_agree(seed, n):
    rng = np.random.default_rng(seed)
    x, dy, gamma = rng.standard_normal(n), rng.standard_normal(n), rng.uniform(0.5, 2)
    rec = bn.bn_forward(x, bn.BNParams(gamma))
    g_f, g_c = bn.bn_backward(dy, rec, bn.BNParams(gamma))
    dx, dgamma, dbeta = bn.elementwise_bn_backward(dy, x, gamma)
    scale = max(1.0, np.abs(dx).max())
    np.testing.assert_allclose(dx, g_f, atol=1e-12 * scale)
    assert abs(dgamma / n - g_c[0]) < 1e-12 * max(1, abs(dgamma))
    assert abs(dbeta / n - g_c[1]) < 1e-12 * max(1, abs(dbeta))


def test_event_space_reduces_to_batch_under_uniform_prior():
    rng = np.random.default_rng(4)
    F, Gt = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    prior = np.full(4, 0.25)
    out, recs = bn.bn_columns(F, prior, np.ones(3), np.zeros(3))
    back, _ = bn.bn_columns_backward(Gt, recs, np.ones(3))
    for j in range(3):
        rec = bn.bn_forward(F[:, j])
        np.testing.assert_allclose(out[:, j], rec.f_bar, atol=1e-15)
        np.testing.assert_allclose(back[:, j], bn.bn_backward(Gt[:, j] / 0.25, rec)[0] * 0.25, atol=1e-14)


def test_energy_trace_and_csv(tmp_path):
    from laddersim import scenarios as sc
    g = tch.random_injective_teacher(3)
    tabs = tch.all_tables(g)
    w0, _ = sc._bn_ready_weights(tabs, dyn.node_counts(g), 0, True, "a", "post")
    on = bn.energy_trace(tabs, w0, dyn.TrainConfig(lr=0.05, steps=10, bn_regions={"a"}), "a")
    assert on.max("inner") < 1e-10 and on.max("identity_residual") < 1e-12
    on.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "step,node,E,inner,residual,identity_residual"
    assert len(lines) == 1 + 10 * g.regions["a"].n
