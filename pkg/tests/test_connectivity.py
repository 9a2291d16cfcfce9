import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hbvar.connectivity import (ALL_DRAWS, CI, DEFAULT_EC_RULES, DEFAULT_FC_DIFF_RULE,
                                DEFAULT_FC_RULE, EcEdge, FcEdge, ThresholdRule, ec_extract,
                                fc_extract, group_diff, region_weights, summarize_scatter,
                                write_edges_csv, write_region_weights_csv, write_scatter_csv)
from hbvar.draws import PosteriorDraws
from hbvar.errors import DimensionError, UnsupportedModelError, ValidationError


def draws_from(B, Sigma=None, model=2):
    B = np.asarray(B, dtype=float)
    N, q, R = B.shape
    if Sigma is None:
        Sigma = np.broadcast_to(np.eye(R), (N, R, R))
    return PosteriorDraws(model, B[None], np.asarray(Sigma)[None], None, q // R)


def const_corr(rho, N=200, R=3, jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    S = np.empty((N, R, R))
    for i in range(N):
        r = rho + jitter * rng.normal()
        S[i] = (1 - r) * np.eye(R) + r
    return S


def test_rule_definitions():
    pos = np.array([0.1, 0.2, 0.3])
    alt = np.array([1.0, -1.0, 1.0, -1.0])
    for rule in (ThresholdRule(ALL_DRAWS), ThresholdRule(CI)):
        assert not rule.keep(alt, alt.mean(), -1.0, 1.0)
    assert ThresholdRule(ALL_DRAWS).keep(pos, pos.mean(), 0.1, 0.3)
    assert not ThresholdRule(CI, magnitude_floor=0.5).keep(pos, 0.2, 0.1, 0.3)
    with pytest.raises(ValidationError):
        ThresholdRule("sometimes")
    with pytest.raises(ValidationError):
        ThresholdRule(CI, ci_level=1.0)


def test_default_rules():
    assert DEFAULT_EC_RULES[1].kind == ALL_DRAWS
    assert DEFAULT_EC_RULES[2].kind == CI and DEFAULT_EC_RULES[2].ci_level == 0.95
    assert DEFAULT_FC_RULE.kind == ALL_DRAWS and DEFAULT_FC_RULE.magnitude_floor == 0.35
    assert DEFAULT_FC_DIFF_RULE.ci_level == 0.95 and DEFAULT_FC_DIFF_RULE.magnitude_floor == 0.05


def test_ec_lag_rules_differ():
    rng = np.random.default_rng(0)
    N = 1000
    B = np.zeros((N, 4, 2))
    # mostly positive with one negative outlier: fails "all draws", passes the 95% CI
    x = 1.0 + 0.3 * rng.normal(size=N)
    x[0] = -0.5
    B[:, 0, 0] = x   # lag 1
    B[:, 2, 0] = x   # lag 2
    edges = ec_extract(draws_from(B))
    assert [(e.lag, e.from_region, e.to_region) for e in edges] == [(2, 0, 0)]
    e = edges[0]
    assert e.sign == "positive" and e.ci_low <= e.mean <= e.ci_high


def test_ec_negative_sign():
    B = np.zeros((50, 2, 2))
    B[:, 1, 0] = -np.linspace(1, 2, 50)
    (e,) = ec_extract(draws_from(B))
    assert (e.from_region, e.to_region, e.sign) == (1, 0, "negative")


def test_fc_diagonal_sigma_gives_no_edges():
    S = np.broadcast_to(np.diag([1.0, 2.0, 3.0]), (100, 3, 3))
    assert fc_extract(draws_from(np.zeros((100, 3, 3)), S)) == []


def test_fc_threshold():
    kept = fc_extract(draws_from(np.zeros((200, 3, 3)), const_corr(0.5)))
    assert len(kept) == 3 and all(abs(e.mean - 0.5) < 1e-12 for e in kept)
    assert fc_extract(draws_from(np.zeros((200, 3, 3)), const_corr(0.2))) == []
    assert all(e.region_a < e.region_b for e in kept)


def test_fc_rejects_model3():
    d = draws_from(np.zeros((10, 2, 2)), model=3)
    with pytest.raises(UnsupportedModelError):
        fc_extract(d)
    with pytest.raises(UnsupportedModelError):
        group_diff(d, d, kind="fc")


def test_correlations_unit_diagonal():
    d = draws_from(np.zeros((50, 3, 3)), const_corr(0.4, N=50, jitter=0.1) * 3.0)
    C = d.correlations()
    np.testing.assert_allclose(np.diagonal(C, axis1=-2, axis2=-1), 1.0)
    np.testing.assert_allclose(C, np.swapaxes(C, -1, -2))


def test_null_difference_has_no_edges():
    rng = np.random.default_rng(1)
    B = 0.5 + 0.1 * rng.normal(size=(2000, 2, 2))
    a = draws_from(B, const_corr(0.5, N=2000, R=2, jitter=0.05, seed=1))
    b = draws_from(B[rng.permutation(2000)], a.Sigma[0][rng.permutation(2000)])
    assert group_diff(a, b, "ec") == []
    assert group_diff(a, b, "fc") == []


def test_difference_detects_shift():
    rng = np.random.default_rng(2)
    Ba = 0.1 * rng.normal(size=(500, 2, 2))
    Bb = 0.1 * rng.normal(size=(600, 2, 2))
    Bb[:, 0, 1] += 0.6
    edges = group_diff(draws_from(Ba), draws_from(Bb), "ec")
    assert [(e.from_region, e.to_region, e.sign) for e in edges] == [(0, 1, "negative")]


def test_difference_shape_mismatch():
    with pytest.raises(DimensionError):
        group_diff(draws_from(np.zeros((5, 2, 2))), draws_from(np.zeros((5, 3, 3))))
    with pytest.raises(ValidationError):
        group_diff(draws_from(np.zeros((5, 2, 2))), draws_from(np.zeros((5, 2, 2))), kind="xy")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.5, 0.99), st.floats(0.0, 0.3))
def test_retention_is_monotone(seed, level, floor):
    rng = np.random.default_rng(seed)
    B = 0.2 * rng.normal(size=(1, 4, 2)) + 0.2 * rng.normal(size=(300, 4, 2))
    d = draws_from(B)
    base = set((e.from_region, e.to_region, e.lag)
               for e in ec_extract(d, ThresholdRule(CI, level, floor)))
    for rule in (ThresholdRule(CI, min(level + 0.05, 0.995), floor),
                 ThresholdRule(CI, level, floor + 0.05)):
        stricter = set((e.from_region, e.to_region, e.lag) for e in ec_extract(d, rule))
        assert stricter <= base


def test_draw_permutation_invariance():
    rng = np.random.default_rng(3)
    B = 0.3 + 0.2 * rng.normal(size=(400, 2, 2))
    a = ec_extract(draws_from(B), ThresholdRule(CI, 0.9))
    b = ec_extract(draws_from(B[rng.permutation(400)]), ThresholdRule(CI, 0.9))
    assert [(e.from_region, e.to_region) for e in a] == [(e.from_region, e.to_region) for e in b]


def test_scatter_rows():
    rng = np.random.default_rng(4)
    d = draws_from(rng.normal(size=(100, 2, 2)), const_corr(0.3, N=100, R=2, jitter=0.05))
    rows = summarize_scatter(d, d)
    assert [r["parameter"] for r in rows] == ["B_1_1_1", "B_1_1_2", "B_1_2_1", "B_1_2_2", "corr_1_2"]
    for r in rows:
        assert r["mean_a"] == r["mean_b"] and r["sd_a"] == r["sd_b"]
        assert r["tratio_a"] == pytest.approx(r["mean_a"] / r["sd_a"])
    m3 = draws_from(rng.normal(size=(100, 2, 2)), model=3)
    assert len(summarize_scatter(d, m3)) == 4


def test_region_weights():
    ec = [EcEdge(0, 1, 1, 0.5, 0.1, 0.3, 0.7, "positive"),
          EcEdge(1, 1, 2, -0.2, 0.1, -0.4, -0.1, "negative")]
    fc = [FcEdge(0, 2, -0.4, 0.1, -0.6, -0.2)]
    np.testing.assert_allclose(region_weights(ec, 3), [[0.5, 0, 0.5], [0.2, 0.7, 0.9], [0, 0, 0]])
    np.testing.assert_allclose(region_weights(fc, 3), [[0.4] * 3, [0] * 3, [0.4] * 3])
    assert fc[0].sign == "negative"


def test_csv_writers(tmp_path):
    labels = ("A", "B", "C")
    edges = [EcEdge(0, 1, 2, 0.5, 0.1, 0.3, 0.7, "positive"), FcEdge(0, 2, -0.4, 0.1, -0.6, -0.2)]
    write_edges_csv(edges, labels, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["from", "to", "lag", "mean", "sd", "ci_low", "ci_high", "sign"]
    assert rows[1][:3] == ["A", "B", "2"] and float(rows[1][3]) == 0.5
    assert rows[2][:3] == ["A", "C", "0"] and rows[2][-1] == "negative"
    write_region_weights_csv(region_weights(edges, 3), labels, tmp_path / "w.csv")
    assert open(tmp_path / "w.csv").readline().strip() == "region,outgoing,incoming,total"
    d = draws_from(np.ones((3, 1, 1)) * np.arange(3)[:, None, None])
    write_scatter_csv(summarize_scatter(d, d), tmp_path / "s.csv")
    assert len(open(tmp_path / "s.csv").read().splitlines()) == 2
