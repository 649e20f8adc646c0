import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laddersim import teacher as tch

from oracles import brute_marginals


def pair_spec(fn="bijective", prior="uniform"):
    return {"regions": [{"id": "z1", "m": 2}, {"id": "z2", "m": 2},
                        {"id": "omega", "children": ["z1", "z2"], "m": 4, "n": 4}],
            "fns": {"omega": fn}, "leaf_prior": prior}


def test_bijective_pairing_uniform_top():
    g = tch.build_teacher(pair_spec())
    d = tch.enumerate_events(g)
    np.testing.assert_array_equal(d.marginals["omega"], np.full(4, 0.25))
    assert g.root.id == "omega"


def test_non_surjective_rejected():
    with pytest.raises(tch.TeacherError, match="non-surjective"):
        tch.build_teacher(pair_spec(fn=[[0, 0], [0, 0]]))


def test_xor_tables():
    g = tch.xor_teacher()
    d = tch.enumerate_events(g)
    np.testing.assert_array_equal(d.marginals["omega"], [0.5, 0.5])
    np.testing.assert_array_equal(d.joint("omega", "z1"), np.full((2, 2), 0.25))
    t = tch.conditional_table(g, "omega", "z1")
    np.testing.assert_array_equal(t.P, np.full((2, 2), 0.5))


def test_single_leaf_identity_joint_is_prior():
    prior = np.array([0.2, 0.3, 0.5])
    g = tch.build_teacher({"regions": [{"id": "x", "m": 3}, {"id": "omega", "children": ["x"], "m": 3}],
                           "fns": {"omega": "identity"}, "leaf_prior": prior.tolist()})
    t = tch.conditional_table(g, "omega", "x")
    np.testing.assert_array_equal(t.joint, np.diag(prior))


def test_three_leaf_random_prior_normalized():
    g = tch.build_teacher({"regions": [{"id": f"x{i}", "m": 2} for i in range(3)]
                          + [{"id": "omega", "children": ["x0", "x1", "x2"], "m": 2}],
                          "fns": {"omega": "xor"}, "leaf_prior": "random:42"})
    for (a, b), j in tch.enumerate_events(g).joints.items():
        assert abs(j.sum() - 1) < 1e-12


def test_pairing_rows_one_hot():
    t = tch.conditional_table(tch.pairing_teacher(), "omega", "z1")
    assert np.all(np.sort(t.P, axis=1)[:, -1] == 1.0)


def test_cycle_and_prior_errors():
    spec = {"regions": [{"id": "a", "children": ["b"], "m": 2}, {"id": "b", "children": ["a"], "m": 2}],
            "fns": {"a": "identity", "b": "identity"}}
    with pytest.raises(tch.TeacherError):
        tch.build_teacher(spec)
    with pytest.raises(tch.TeacherError, match="sums to"):
        tch.build_teacher(pair_spec(prior=[0.3, 0.3, 0.3, 0.3]))


def test_overlap_requires_flag():
    spec = {"regions": [{"id": "s", "m": 2}, {"id": "u", "m": 2}, {"id": "v", "m": 2},
                        {"id": "a", "children": ["s", "u"], "m": 2}, {"id": "b", "children": ["s", "v"], "m": 2},
                        {"id": "omega", "children": ["a", "b"], "m": 2}],
            "fns": {"a": "xor", "b": "xor", "omega": "xor"}, "leaf_prior": "random:1"}
    with pytest.raises(tch.TeacherError, match="overlap"):
        tch.build_teacher(spec)
    g = tch.build_teacher(spec, allow_overlap=True)
    rep = tch.validate_consistency(tch.all_tables(g))
    assert rep.ok() and rep.marginal_agreement < 1e-12


def test_zero_prior_event_named():
    g = tch.build_teacher(pair_spec(prior=[0.5, 0.5, 0.0, 0.0]))
    with pytest.raises(tch.TeacherError, match="'omega': event 2"):
        tch.conditional_table(g, "omega", "z1")


def test_cap_exceeded():
    with pytest.raises(tch.TeacherError, match="cap"):
        tch.enumerate_events(tch.pairing_teacher(), cap=3)


def test_cap_env_override(monkeypatch):
    monkeypatch.setenv("LADDERSIM_CAP", "2")
    with pytest.raises(tch.TeacherError):
        tch.enumerate_events(tch.xor_teacher())


def test_injected_row_defect_flagged():
    tabs = tch.all_tables(tch.random_injective_teacher(2))
    k = sorted(tabs)[0]
    P = tabs[k].P.copy()
    P[0] *= 0.9
    tabs[k] = tabs[k].with_P(P)
    rep = tch.validate_consistency(tabs)
    assert not rep.ok() and rep.row_sum > 0.05 and rep.flagged


def test_json_roundtrip_and_csv(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps(pair_spec(prior="random:3")))
    g = tch.load_teacher(path)
    t = tch.conditional_table(g, "omega", "z2")
    tch.table_to_csv(t, tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_teachers_consistent_and_match_brute_force(seed):
    g = tch.random_injective_teacher(seed)
    tabs = tch.all_tables(g)
    assert tch.validate_consistency(tabs).ok(1e-12)
    for t in tabs.values():
        assert t.lambda_residual() < 1e-12
        assert np.max(np.abs(t.P.sum(axis=1) - 1)) < 1e-12
    d = tch.enumerate_events(g)
    brute = brute_marginals(g)
    for r in g.regions:
        np.testing.assert_allclose(d.marginals[r], brute[r], rtol=0, atol=1e-15)


def test_deterministic_tables():
    a = tch.all_tables(tch.random_injective_teacher(5))
    b = tch.all_tables(tch.random_injective_teacher(5))
    for k in a:
        assert a[k].P.tobytes() == b[k].P.tobytes()
