import numpy as np
import pytest
from scipy import stats as sps

from hbvar.conjugate import (all_subject_stats, combine, fit_conjugate, log_marginal_likelihood,
                             log_marginal_terms, model3_ig_params, sample_model2, sample_model3,
                             subject_log_marginal, subject_stats)
from hbvar.data import (GroupDataset, LagDesign, ShrinkagePrior, SubjectPanel, build_default_prior,
                        build_lag_design, group_designs)
from hbvar.errors import ImproperPosteriorError
from hbvar.simulate import mc_marginal_oracle, mc_subject_marginal_model2

from conftest import make_group


def unit_prior(q=1, R=1, S=1, lam=1.0, kappa=1.0, nu0=None):
    return ShrinkagePrior(np.zeros((q, R)), lam, np.full(S, kappa), np.ones(q), np.eye(R),
                          nu0 if nu0 is not None else R + 2)


def test_identity_precision_and_gram():
    # X^T X = I with P_s = I
    design = LagDesign(Y=np.array([[1.0], [2.0]]), X=np.array([[1.0], [0.0]]), L=1)
    st = subject_stats(design, unit_prior(), 0)
    np.testing.assert_allclose(st.K1, [[0.5]])
    np.testing.assert_allclose(st.Q, [[2.0]])


def test_perfect_ar1_ols():
    y = 3.0 * 0.5 ** np.arange(12)
    d = build_lag_design(SubjectPanel("a", y[:, None], ("R1",)), 1)
    st = subject_stats(d, unit_prior(kappa=1e-12), 0)
    assert st.B_hat[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_statistics_are_symmetric(tiny):
    ds, prior = tiny
    for st in all_subject_stats(group_designs(ds, 1), prior):
        for M in (st.V, st.Rm, st.Q):
            np.testing.assert_allclose(M, M.T, rtol=1e-10, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(st.Q) > 0)
        assert np.all(np.linalg.eigvalsh(st.Rm) > -1e-10)


def test_subject_marginal_matches_monte_carlo():
    ds, _ = make_group(R=2, S=1, T=12, seed=11)
    prior = build_default_prior(ds, 1, 0.5, 0.5)
    design = group_designs(ds, 1)[0]
    st = subject_stats(design, prior, 0)
    B = np.array([[0.2, 0.05], [-0.1, 0.3]])
    Sigma = np.array([[1.0, 0.3], [0.3, 1.5]])
    exact = float(subject_log_marginal(st, B, Sigma))
    mc = mc_subject_marginal_model2(design, prior.P_s_inv(0), B, Sigma, 10**6, seed=3)
    assert abs(exact - mc.log_value) < 3 * mc.se


def test_no_subjects_recovers_prior(tiny):
    _, prior = tiny
    post = combine([], prior)
    np.testing.assert_array_equal(post.B_tilde, prior.B0)
    np.testing.assert_allclose(post.P_tilde, prior.P0)
    np.testing.assert_allclose(post.Psi_n, prior.nu0 * prior.Psi0)
    assert post.nu_n == prior.nu0


def test_b_tilde_is_precision_weighted_average(tiny):
    ds, prior = tiny
    prior = ShrinkagePrior(np.full((2, 2), 0.1), prior.lam, prior.kappa, prior.d, prior.Psi0,
                           prior.nu0)
    stats = all_subject_stats(group_designs(ds, 1), prior)
    post = combine(stats, prior)
    Qsum = sum(st.Q_inv for st in stats)
    B_D = np.linalg.solve(Qsum, sum(st.Q_inv @ st.E for st in stats))
    expect = np.linalg.solve(prior.P0 + Qsum, prior.P0 @ prior.B0 + Qsum @ B_D)
    np.testing.assert_allclose(post.B_tilde, expect, rtol=1e-10)
    np.testing.assert_allclose(post.P_tilde, prior.P0 + Qsum, rtol=1e-12)


def test_duplicated_subject_is_additive(tiny):
    ds, prior = tiny
    one = GroupDataset("g", (ds.subjects[0],))
    two = GroupDataset("g", (ds.subjects[0], ds.subjects[0]))
    p1 = build_default_prior(one, 1, 0.5, 0.2)
    p2 = build_default_prior(two, 1, 0.5, 0.2)
    a = combine(all_subject_stats(group_designs(one, 1), p1), p1)
    b = combine(all_subject_stats(group_designs(two, 1), p2), p2)
    np.testing.assert_allclose(b.P_tilde - p1.P0, 2 * (a.P_tilde - p1.P0), rtol=1e-12)
    assert b.n_total == 2 * a.n_total


def test_combine_is_order_invariant(tiny):
    ds, prior = tiny
    stats = all_subject_stats(group_designs(ds, 1), prior)
    a, b = combine(stats, prior), combine(stats[::-1], prior)
    np.testing.assert_allclose(a.B_tilde, b.B_tilde, rtol=1e-12)
    np.testing.assert_allclose(a.Psi_n, b.Psi_n, rtol=1e-12)


def test_dof_conventions(tiny):
    ds, prior = tiny
    exact = fit_conjugate(ds, prior, 1)
    reduced = fit_conjugate(ds, prior, 1, dof="reduced")
    assert exact.nu_n == prior.nu0 + ds.S * (ds.T - 1)
    assert reduced.nu_n == exact.nu_n - prior.q
    with pytest.raises(ValueError):
        fit_conjugate(ds, prior, 1, dof="other")


def test_model2_moments(tiny):
    ds, prior = tiny
    post = fit_conjugate(ds, prior, 1)
    dr = sample_model2(post, 40000, seed=5)
    B, Sig = dr.flat("B"), dr.flat("Sigma")
    se_B = B.std(axis=0, ddof=1) / np.sqrt(len(B))
    se_S = Sig.std(axis=0, ddof=1) / np.sqrt(len(Sig))
    assert np.all(np.abs(B.mean(axis=0) - post.B_tilde) < 3.5 * se_B)
    assert np.all(np.abs(Sig.mean(axis=0) - post.sigma_mean()) < 3.5 * se_S)


def test_model2_determinism(tiny):
    ds, prior = tiny
    post = fit_conjugate(ds, prior, 1)
    a, b = sample_model2(post, 50, seed=9), sample_model2(post, 50, seed=9)
    assert np.array_equal(a.B, b.B) and np.array_equal(a.Sigma, b.Sigma)


def test_improper_posterior_rejected():
    from hbvar.conjugate import ConjugatePosterior
    post = ConjugatePosterior(np.zeros((1, 2)), np.eye(1), np.eye(2), 3.0, 3.0, 0)
    with pytest.raises(ImproperPosteriorError):
        sample_model2(post, 5, seed=0)


def test_model3_scalar_matches_inverse_wishart():
    rng = np.random.default_rng(2)
    ds = GroupDataset.from_arrays([rng.normal(size=(25, 1)) for _ in range(2)])
    prior = build_default_prior(ds, 1, 0.5, 0.5)
    post = fit_conjugate(ds, prior, 1)
    s2 = sample_model2(post, 10**5, seed=1).flat("Sigma")[:, 0, 0]
    s3 = sample_model3(post, 10**5, seed=2).flat("Sigma")[:, 0, 0]
    assert sps.ks_2samp(s2, s3).pvalue > 0.01


def test_model3_prior_only_is_prior_ig():
    prior = ShrinkagePrior(np.zeros((2, 2)), 1.0, np.ones(0), np.ones(2), np.diag([1.0, 2.0]), 6.0)
    shape, scale = model3_ig_params(combine([], prior))
    np.testing.assert_allclose(shape, (6 - 2 + 1) / 2)
    np.testing.assert_allclose(scale, [3.0, 6.0])


def test_model3_literal_mode():
    from hbvar.conjugate import ConjugatePosterior
    post = ConjugatePosterior(np.zeros((2, 2)), np.eye(2), np.diag([1.0, 4.0]), 10.0, 4.0, 6)
    shape, scale = model3_ig_params(post, "literal")
    np.testing.assert_allclose(shape, [3.0, 3.0])
    np.testing.assert_allclose(scale, [5.0, 20.0])
    bad = ConjugatePosterior(np.zeros((2, 2)), np.eye(2), np.eye(2), 4.0, 4.0, 0)
    with pytest.raises(ImproperPosteriorError):
        model3_ig_params(bad, "literal")


def test_model3_has_diagonal_sigma(tiny):
    ds, prior = tiny
    dr = sample_model3(fit_conjugate(ds, prior, 1), 20, seed=0)
    S = dr.flat("Sigma")
    assert not S[:, 0, 1].any()
    assert dr.model == 3


def test_lml_keeps_every_constant(tiny):
    ds, prior = tiny
    terms = log_marginal_terms(all_subject_stats(group_designs(ds, 1), prior), prior)
    assert terms["constants_dropped"] == []
    parts = sum(v for k, v in terms.items() if k not in ("total", "constants_dropped"))
    assert terms["total"] == pytest.approx(parts)


def test_lml_matches_monte_carlo():
    ds, _ = make_group(R=2, S=2, T=15, seed=21)
    prior = build_default_prior(ds, 1, 0.5, 0.5)
    exact = log_marginal_likelihood(ds, prior, 1)
    mc = mc_marginal_oracle(ds, prior, 1, 10**5, seed=4)
    assert abs(exact - mc.log_value) < 3 * mc.se


def test_lml_subject_permutation(tiny):
    ds, prior = tiny
    perm = ds.subset([2, 0, 1])
    pp = prior.with_hyper(prior.lam, prior.kappa[[2, 0, 1]])
    assert log_marginal_likelihood(perm, pp, 1) == pytest.approx(
        log_marginal_likelihood(ds, prior, 1), rel=1e-12)


def test_lml_small_lambda_pins_b_at_b0():
    ds, _ = make_group(R=2, S=2, T=15, seed=22)
    prior = build_default_prior(ds, 1, 1e-7, 0.5)
    exact = log_marginal_likelihood(ds, prior, 1)
    mc = mc_marginal_oracle(ds, prior, 1, 10**5, seed=6, fixed_B=prior.B0)
    assert abs(exact - mc.log_value) < 3 * mc.se + 1e-3
