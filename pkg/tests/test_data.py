import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hbvar.data import (GroupDataset, ShrinkagePrior, SubjectPanel, build_default_prior,
                        build_lag_design, group_designs, lag_scaling, load_group,
                        read_subject_csv, sample_variance_summaries, save_group,
                        write_subject_csv)
from hbvar.errors import DegeneratePriorError, DimensionError, ValidationError


def panel(values, sid="s1"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return SubjectPanel(sid, values, tuple(f"R{j + 1}" for j in range(values.shape[1])))


def test_lag_design_small_series():
    d = build_lag_design(panel([1, 2, 3, 4, 5]), 2)
    np.testing.assert_array_equal(d.Y.ravel(), [3, 4, 5])
    np.testing.assert_array_equal(d.X, [[2, 1], [3, 2], [4, 3]])
    assert (d.n, d.q, d.R) == (3, 2, 1)


def test_lag_design_zero_series():
    d = build_lag_design(panel(np.zeros((6, 2))), 1)
    assert not d.Y.any() and not d.X.any()


def test_lag_design_rejects_long_lag():
    with pytest.raises(DimensionError):
        build_lag_design(panel([1.0, 2.0, 3.0]), 3)


def test_lag_design_rejects_non_finite():
    with pytest.raises(ValidationError):
        build_lag_design(np.array([[1.0], [np.nan], [2.0]]), 1)


def test_lag_design_warns_when_underdetermined():
    with pytest.warns(RuntimeWarning):
        build_lag_design(panel(np.random.default_rng(0).normal(size=(6, 3))), 2)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(4, 20), R=st.integers(1, 4), L=st.integers(1, 3), seed=st.integers(0, 1000))
def test_lag_design_reassembles_series(T, R, L, seed):
    if L >= T:
        return
    y = np.random.default_rng(seed).normal(size=(T, R))
    d = build_lag_design(panel(y), L)
    np.testing.assert_array_equal(d.Y, y[L:])
    for l in range(1, L + 1):
        np.testing.assert_array_equal(d.X[:, (l - 1) * R:l * R], y[L - l:T - l])


def test_panel_validation():
    with pytest.raises(DimensionError):
        panel([1.0])
    with pytest.raises(ValidationError):
        SubjectPanel("a", np.ones((3, 2)), ("x", "x"))
    with pytest.raises(ValidationError):
        panel([1.0, np.inf, 2.0])


def test_group_requires_consistent_shapes():
    with pytest.raises(DimensionError):
        GroupDataset("g", (panel(np.ones((5, 2))), panel(np.ones((6, 2)), "s2")))


def test_variance_summaries_hand_values():
    one = GroupDataset("g", (panel([1.0, 2.0, 3.0]),))
    mx, mn = sample_variance_summaries(one)
    assert mx[0] == 1.0 and mn[0] == 1.0
    a = np.array([0.0, 2.0])          # variance 2 with ddof 1
    b = np.array([0.0, np.sqrt(6.0)])  # variance 3
    two = GroupDataset("g", (panel(a / np.sqrt(2)), panel(b / np.sqrt(2), "s2")))
    mx, mn = sample_variance_summaries(two)
    assert mx[0] == pytest.approx(3 / 2 * 2 / 2)  # 1.5
    assert mn[0] == pytest.approx((1.0 + 1.5) / 2)


def test_variance_summaries_max_and_mean():
    a = panel([0.0, 1.0, 2.0])   # var 1
    b = panel([0.0, np.sqrt(3), 2 * np.sqrt(3)], "s2")  # var 3
    mx, mn = sample_variance_summaries(GroupDataset("g", (a, b)))
    assert mx[0] == pytest.approx(3.0) and mn[0] == pytest.approx(2.0)


def test_constant_series_is_degenerate():
    ds = GroupDataset("g", (panel(np.ones(5)),))
    mx, _ = sample_variance_summaries(ds)
    assert mx[0] == 0.0
    with pytest.raises(DegeneratePriorError):
        build_default_prior(ds, 1, 1.0, 1.0)


def test_default_prior_substitution():
    y = np.array([0.0, 2.0])  # s^2 = 2
    ds = GroupDataset("g", (panel(y),))
    p = build_default_prior(ds, 2, 1.0, [1.0])
    np.testing.assert_allclose(p.d, [1 / 2, 1 / 8])
    np.testing.assert_allclose(p.Psi0, [[2.0]])
    assert p.nu0 == 3
    np.testing.assert_allclose(p.P0, np.diag([2.0, 8.0]))
    assert not p.B0.any()


def test_nu0_is_r_plus_2(tiny):
    ds, prior = tiny
    assert prior.nu0 == ds.R + 2


def test_doubling_lambda_halves_p0(tiny):
    ds, prior = tiny
    p2 = prior.with_hyper(2 * prior.lam, prior.kappa)
    np.testing.assert_array_equal(p2.P0, prior.P0 / 2)


def test_higher_lags_shrink_more():
    d = lag_scaling(np.array([2.0, 5.0]), 3)
    for l1, l2 in [(1, 2), (1, 3), (2, 3)]:
        np.testing.assert_allclose(d[(l2 - 1) * 2:l2 * 2] / d[(l1 - 1) * 2:l1 * 2], (l1 / l2) ** 2)


def test_prior_matrices_are_spd(tiny):
    _, prior = tiny
    for M in [prior.P0] + [prior.P_s(s) for s in range(prior.S)]:
        np.testing.assert_array_equal(M, M.T)
        assert np.all(np.linalg.eigvalsh(M) > 0)


def test_prior_validation():
    with pytest.raises(ValidationError):
        ShrinkagePrior(np.zeros((1, 1)), 1.0, np.ones(1), np.ones(1), np.eye(1), nu0=2.0)
    with pytest.raises(ValidationError):
        ShrinkagePrior(np.zeros((1, 1)), -1.0, np.ones(1), np.ones(1), np.eye(1), nu0=3.0)


def test_prior_dict_round_trip(tiny):
    _, prior = tiny
    back = ShrinkagePrior.from_dict(json.loads(json.dumps(prior.to_dict())))
    np.testing.assert_array_equal(back.P0, prior.P0)
    np.testing.assert_array_equal(back.kappa, prior.kappa)


def test_csv_and_manifest_round_trip(tmp_path, tiny):
    ds, _ = tiny
    m = save_group(ds, tmp_path, tr_seconds=2.0)
    back = load_group(m)
    assert back.subject_ids == ds.subject_ids
    assert back.metadata == {"tr_seconds": 2.0}
    for a, b in zip(ds.subjects, back.subjects):
        np.testing.assert_array_equal(a.values, b.values)
    p = read_subject_csv(tmp_path / f"{ds.subject_ids[0]}.csv")
    assert p.subject_id == ds.subject_ids[0]


def test_manifest_errors(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"group_id": "g", "subjects": ["nope.csv"]}))
    with pytest.raises(ValidationError):
        load_group(tmp_path / "m.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ValidationError):
        load_group(tmp_path / "bad.json")


def test_centering_and_drop_initial(tiny):
    ds, _ = tiny
    c = ds.centered()
    np.testing.assert_allclose(c.subjects[0].values.mean(axis=0), 0, atol=1e-12)
    d = c.drop_initial(3)
    assert d.T == ds.T - 3
    np.testing.assert_array_equal(d.subjects[1].values, c.subjects[1].values[3:])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (8, 2), elements=st.floats(-1e3, 1e3)))
def test_subject_csv_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "sx.csv"
    write_subject_csv(panel(values, "sx"), path)
    np.testing.assert_array_equal(read_subject_csv(path).values, values)
