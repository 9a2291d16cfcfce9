import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hbvar.conjugate import all_subject_stats, combine, fit_conjugate, subject_log_marginal
from hbvar.data import GroupDataset, SubjectPanel, build_default_prior, group_designs
from hbvar.model1 import (HierTarget, UnconstrainedState, grad_log_target, log_target,
                          prior_logpdf_reference)

from conftest import make_group
from oracles import log_prior_scipy, mc_log_target_difference, random_states


def setup(R=2, S=2, T=12, seed=3, nu=8.0, **kw):
    ds, _ = make_group(R=R, S=S, T=T, nu=nu, seed=seed)
    ds = ds.centered()
    prior = build_default_prior(ds, 1, 0.5, 0.5)
    stats = all_subject_stats(group_designs(ds, 1), prior)
    return ds, prior, stats, HierTarget(stats, prior, **kw)


def fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_dimensions():
    _, _, _, t = setup()
    assert (t.dim, t.n_B, t.n_L, t.nu_lb) == (8, 4, 3, 4.0)
    _, _, _, tf = setup(fixed_nu=10.0)
    assert tf.dim == 7


def test_gradient_matches_finite_differences():
    ds, prior, stats, t = setup(S=3, T=30)
    rng = np.random.default_rng(0)
    post = combine(stats, prior)
    worst = 0.0
    for th in random_states(t, post, 20, rng):
        lp, g = t.log_prob_and_grad(th)
        fd = fd_grad(t.log_prob, th)
        worst = max(worst, np.max(np.abs(g - fd)) / np.linalg.norm(fd))
    assert worst <= 1e-5


def test_gradient_with_nu_prior():
    _, prior, stats, t = setup(nu_prior=(2.0, 0.1))
    th = random_states(t, combine(stats, prior), 1, np.random.default_rng(1))[0]
    g = t.log_prob_and_grad(th)[1]
    np.testing.assert_allclose(g, fd_grad(t.log_prob, th), rtol=1e-5, atol=1e-6)


def test_zeta_gradient_without_subjects():
    _, prior, _, _ = setup()
    t = HierTarget([], prior)
    th = np.random.default_rng(2).normal(size=t.dim)
    assert t.log_prob_and_grad(th)[1][-1] == pytest.approx(1.0)


def test_gradient_deterministic():
    _, prior, stats, t = setup()
    th = np.random.default_rng(3).normal(scale=0.3, size=t.dim)
    a = grad_log_target(th, stats, prior)
    b = grad_log_target(t.state(th), stats, prior)
    assert np.array_equal(a, b)


def test_subject_permutation_invariance():
    ds, prior, stats, t = setup(S=3)
    th = random_states(t, combine(stats, prior), 1, np.random.default_rng(4))[0]
    perm = ds.subset([2, 0, 1])
    pp = prior.with_hyper(prior.lam, prior.kappa[[2, 0, 1]])
    sp = all_subject_stats(group_designs(perm, 1), pp)
    assert log_target(th, sp, pp) == pytest.approx(log_target(th, stats, prior), rel=1e-12)


def test_centering_invariance():
    ds, _ = make_group(S=2, T=20, nu=8.0, seed=6)
    shifted = GroupDataset("g", tuple(SubjectPanel(p.subject_id, p.values + 3.7, p.region_labels)
                                      for p in ds.subjects))
    a, b = ds.centered(), shifted.centered()
    prior = build_default_prior(a, 1, 0.5, 0.5)
    sa = all_subject_stats(group_designs(a, 1), prior)
    sb = all_subject_stats(group_designs(b, 1), prior)
    th = np.random.default_rng(5).normal(scale=0.3, size=8)
    assert log_target(th, sb, prior) == pytest.approx(log_target(th, sa, prior), abs=1e-8)


def test_rejected_state_is_minus_infinity():
    _, prior, stats, t = setup()
    th = np.zeros(t.dim)
    th[t.n_B] = 800.0  # exp overflow in a Cholesky diagonal
    lp, g = t.log_prob_and_grad(th)
    assert lp == -np.inf and g is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_unconstrained_round_trip(seed):
    _, _, _, t = SETUP
    th = np.random.default_rng(seed).normal(size=t.dim)
    p = t.constrain(th)
    back = t.unconstrain(p.B, p.Sigma, p.nu)
    np.testing.assert_allclose(back, th, rtol=1e-12, atol=1e-12)


SETUP = setup()


def test_state_vector_round_trip():
    _, _, _, t = SETUP
    th = np.arange(t.dim, dtype=float) / 10
    s = t.state(th)
    assert isinstance(s, UnconstrainedState)
    assert np.array_equal(s.to_vector(), th)


def test_prior_term_matches_scipy():
    _, prior, _, t = SETUP
    rng = np.random.default_rng(7)
    for _ in range(5):
        p = t.constrain(rng.normal(scale=0.5, size=t.dim))
        assert prior_logpdf_reference(p.B, p.Sigma, prior) == pytest.approx(
            log_prior_scipy(p.B, p.Sigma, prior), rel=1e-10)


def test_noncentered_map_has_kronecker_covariance():
    _, prior, _, t = SETUP
    rng = np.random.default_rng(8)
    Sigma = np.array([[1.0, 0.6], [0.6, 2.0]])
    base = t.unconstrain(prior.B0, Sigma, 10.0)
    N = 100000
    Z = rng.standard_normal((N, t.n_B))
    B = np.array([t.constrain(np.r_[z, base[t.n_B:]]).B for z in Z[:20000]])
    # vectorized form of the same map for the bulk of the sample
    Lc = np.linalg.cholesky(Sigma)
    B = prior.B0 + t.C @ Z.reshape(N, t.q, t.R) @ Lc.T
    np.testing.assert_allclose(B[:20000], np.array(
        [t.constrain(np.r_[z, base[t.n_B:]]).B for z in Z[:20000]]), atol=1e-12)
    vecB = np.swapaxes(B, 1, 2).reshape(N, -1)  # column-stacking vec
    emp = np.cov(vecB, rowvar=False)
    ref = np.kron(Sigma, prior.P0_inv)
    se = np.sqrt((np.outer(np.diag(ref), np.diag(ref)) + ref ** 2) / N)
    assert np.all(np.abs(emp - ref) < 3.5 * se)


def test_large_nu_approaches_common_covariance():
    _, prior, stats, _ = SETUP
    B = np.array([[0.2, 0.0], [0.1, 0.3]])
    Sigma = np.array([[1.0, 0.2], [0.2, 0.8]])
    t = HierTarget(stats, prior, fixed_nu=1e8)
    m1 = t.pointwise(B, Sigma, 1e8)
    m2 = np.array([subject_log_marginal(st, B, Sigma) for st in stats])
    np.testing.assert_allclose(m1, m2, rtol=1e-5)


def test_log_target_difference_matches_monte_carlo():
    ds, prior, stats, t = setup(seed=12)
    designs = group_designs(ds, 1)
    rng = np.random.default_rng(9)
    th1, th2 = random_states(t, combine(stats, prior), 2, rng, nu_range=(10.0, 40.0))
    exact = t.log_prob(th1) - t.log_prob(th2)
    mc, se = mc_log_target_difference(t, designs, prior, th1, th2, 10**5, seed=1)
    assert abs(exact - mc) < 3 * se
