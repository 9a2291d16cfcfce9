"""Exact posterior for the common-covariance model and its diagonal variant.

With a covariance ``Sigma`` shared by all subjects, the subject coefficients
integrate out analytically.  Each subject then contributes, for fixed
``(B, Sigma)``,

    (2 pi)^{-nR/2} c_s |Sigma|^{-n/2} exp(-tr Sigma^{-1} [R_s + (B - E_s)^T Q_s^{-1} (B - E_s)] / 2)

with ``c_s = |P_s|^{R/2} |P_s + X_s^T X_s|^{-R/2}``.  Combining the subjects with
the matrix-normal / inverse-Wishart prior gives a matrix-normal /
inverse-Wishart posterior.

Degrees of freedom: collecting powers of ``|Sigma|`` (likelihood ``-Sn/2``,
prior on ``B`` ``-q/2``, inverse-Wishart prior ``-(nu0 + R + 1)/2``) and
integrating ``B`` out (``+q/2``) leaves ``Sigma | Y ~ IW(Psi_n, nu0 + S n)``.
``dof="reduced"`` reproduces the alternative bookkeeping ``nu0 + S n - q``
that omits the ``|Sigma|^{-q/2}`` factor of the prior on ``B``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import multigammaln

from .data import build_lag_design, group_designs
from .distributions import sample_invgamma, sample_invwishart, sample_matrix_normal
from .draws import PosteriorDraws
from .errors import ImproperPosteriorError, NumericalError
from .linalg import chol, chol_inv, logdet_chol, sym

LOG_2PI = np.log(2.0 * np.pi)
DOF_CONVENTIONS = ("exact", "reduced")


@dataclass(frozen=True, eq=False)
class SubjectStats:
    """Sufficient statistics of one subject under a given prior precision.

    ``Q_inv`` equals ``P_s - P_s K1 P_s``; ``logdet_Ps`` and ``logdet_A`` are
    ``log|P_s|`` and ``log|P_s + X^T X|`` (used by normalizing constants).
    """

    B_hat: np.ndarray
    V: np.ndarray
    K1: np.ndarray
    Q: np.ndarray
    Q_inv: np.ndarray
    E: np.ndarray
    Rm: np.ndarray
    n: int
    logdet_Ps: float
    logdet_A: float

    @property
    def q(self):
        return self.E.shape[0]

    @property
    def R(self):
        return self.E.shape[1]

    def log_c(self):
        """log of ``|P_s|^{R/2} |P_s + X^T X|^{-R/2}``."""
        return 0.5 * self.R * (self.logdet_Ps - self.logdet_A)

    def quad(self, B):
        """``R_s + (B - E_s)^T Q_s^{-1} (B - E_s)`` for one B or a stack."""
        D = B - self.E
        return self.Rm + np.swapaxes(D, -1, -2) @ self.Q_inv @ D


@dataclass(frozen=True, eq=False)
class ConjugatePosterior:
    """Matrix-normal / inverse-Wishart posterior of (B, Sigma).

    ``B | Sigma ~ MN(B_tilde, P_tilde^{-1}, Sigma)`` and
    ``Sigma ~ IW(Psi_n, nu_n)``.  ``nu0`` and ``n_total = S n`` are kept so the
    diagonal-covariance variant can be formed from the same statistics.
    """

    B_tilde: np.ndarray
    P_tilde: np.ndarray
    Psi_n: np.ndarray
    nu_n: float
    nu0: float
    n_total: int
    dof: str = "exact"

    @property
    def q(self):
        return self.B_tilde.shape[0]

    @property
    def R(self):
        return self.B_tilde.shape[1]

    def sigma_mean(self):
        if not self.nu_n > self.R + 1:
            raise ImproperPosteriorError("posterior mean of Sigma needs nu_n > R + 1")
        return self.Psi_n / (self.nu_n - self.R - 1)


def _gram(design):
    X, Y = design.X, design.Y
    return X.T @ X, X.T @ Y, Y.T @ Y


def subject_stats(design, prior, s):
    """Appendix-style statistics (B_hat, V, K1, Q, E, R) for subject ``s``."""
    prior.check_dims(design.q, design.R)
    X, Y = design.X, design.Y
    XtX, XtY, YtY = _gram(design)
    Ps = prior.P_s(s)
    q = design.q
    I = np.eye(q)

    A = sym(Ps + XtX)
    cA = chol(A, f"P_s + X^T X (subject {s})")
    K1 = chol_inv(A, f"P_s + X^T X (subject {s})")

    # OLS pieces; min-norm solution when X^T X is singular (n < q or collinear)
    B_hat, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < q:
        warnings.warn(f"subject {s}: X^T X has rank {rank} < q={q}; OLS is min-norm",
                      RuntimeWarning, stacklevel=2)
    resid = Y - X @ B_hat
    V = resid.T @ resid

    M = I - K1 @ Ps
    Q_inv = Ps @ K1 @ XtX @ K1 @ Ps + M.T @ Ps @ M
    Q_inv = sym(Q_inv)
    Q = chol_inv(Q_inv, f"Q_s^-1 (subject {s})")
    W = Y - X @ (K1 @ XtY)
    E = Q @ (Ps @ K1 @ X.T @ W + M.T @ Ps @ K1 @ XtY)
    Rm = W.T @ W + XtY.T @ K1 @ Ps @ K1 @ XtY - E.T @ Q_inv @ E

    logdet_Ps = float(np.sum(np.log(np.diag(Ps))))
    return SubjectStats(B_hat=B_hat, V=V, K1=K1, Q=Q, Q_inv=Q_inv, E=E, Rm=Rm,
                        n=design.n, logdet_Ps=logdet_Ps, logdet_A=float(logdet_chol(cA)))


def all_subject_stats(designs, prior):
    prior.check_dims(designs[0].q, designs[0].R, len(designs))
    return [subject_stats(d, prior, s) for s, d in enumerate(designs)]


def combine(stats, prior, dof="exact"):
    """Pool subject statistics with the prior into the exact posterior."""
    if dof not in DOF_CONVENTIONS:
        raise ValueError(f"dof must be one of {DOF_CONVENTIONS}")
    P0, B0 = prior.P0, prior.B0
    P_tilde = P0.copy()
    rhs = P0 @ B0
    Psi = prior.nu0 * prior.Psi0 + B0.T @ P0 @ B0
    n_total = 0
    for st in stats:
        P_tilde += st.Q_inv
        QE = st.Q_inv @ st.E
        rhs += QE
        Psi += st.Rm + st.E.T @ QE
        n_total += st.n
    P_tilde = sym(P_tilde)
    cP = chol(P_tilde, "P_tilde")
    B_tilde = np.linalg.solve(cP.T, np.linalg.solve(cP, rhs))
    Psi_n = sym(Psi - B_tilde.T @ P_tilde @ B_tilde)
    try:
        np.linalg.cholesky(Psi_n)
    except np.linalg.LinAlgError:
        raise NumericalError("Psi_n is not positive definite after symmetrization") from None
    nu_n = prior.nu0 + n_total
    if dof == "reduced":
        nu_n -= prior.q
    return ConjugatePosterior(B_tilde, P_tilde, Psi_n, float(nu_n), prior.nu0, n_total, dof)


def fit_conjugate(dataset, prior, L, dof="exact"):
    designs = group_designs(dataset, L)
    return combine(all_subject_stats(designs, prior), prior, dof)


def _draws_meta(post, model, n_draws, seed, extra):
    flags = {"iw_convention": "|S|^-(nu+R+1)/2 exp(-tr(Psi S^-1)/2)", "dof": post.dof}
    flags.update(extra)
    return dict(seeds=[seed], warmup=0, diagnostics={"sampler": "exact", "n_draws": n_draws},
                flags=flags)


def sample_model2(post, n_draws, seed, L=1, region_labels=None):
    """I.i.d. draws from the full-covariance posterior."""
    R = post.R
    if not post.nu_n > R + 1:
        raise ImproperPosteriorError(f"nu_n = {post.nu_n} must exceed R + 1 = {R + 1}")
    rng = np.random.default_rng(seed)
    Sigma = sample_invwishart(post.Psi_n, post.nu_n, n_draws, rng)
    row = np.linalg.cholesky(chol_inv(post.P_tilde, "P_tilde"))
    B = sample_matrix_normal(post.B_tilde, row, np.linalg.cholesky(Sigma), rng, size=n_draws)
    return PosteriorDraws(2, B[None], Sigma[None], None, L, region_labels,
                          **_draws_meta(post, 2, n_draws, seed, {}))


def model3_ig_params(post, mode="exact"):
    """Shapes and scales of the per-region inverse-gamma variance posteriors.

    ``exact`` treats each region as an independent conjugate regression with
    prior ``IG((nu0 - R + 1)/2, nu0 Psi0_rr / 2)`` (the marginal of the
    diagonal of the full-covariance prior), giving shape
    ``(nu0 - R + 1 + S n)/2`` and scale ``Psi_n,rr / 2``.  ``literal``
    evaluates ``IG((nu_n - 2R)/2, nu_n Psi_n,rr / 2)`` as published.
    """
    R = post.R
    psi = np.diag(post.Psi_n).copy()
    if mode == "exact":
        shape = np.full(R, 0.5 * (post.nu0 - R + 1 + post.n_total))
        scale = 0.5 * psi
    elif mode == "literal":
        shape = np.full(R, 0.5 * (post.nu_n - 2 * R))
        scale = 0.5 * post.nu_n * psi
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if np.any(shape <= 0):
        raise ImproperPosteriorError(f"non-positive inverse-gamma shape {shape[0]}")
    return shape, scale


def sample_model3(post, n_draws, seed, mode="exact", L=1, region_labels=None):
    """I.i.d. draws under a diagonal covariance.

    ``B`` and ``P_tilde`` coincide with the full-covariance fit because the
    diagonal model decouples into one conjugate regression per region whose
    statistics are the columns of ``E_s`` and diagonal of ``R_s``.
    """
    shape, scale = model3_ig_params(post, mode)
    rng = np.random.default_rng(seed)
    var = sample_invgamma(shape, scale, n_draws, rng)
    Sigma = np.zeros((n_draws, post.R, post.R))
    idx = np.arange(post.R)
    Sigma[:, idx, idx] = var
    row = np.linalg.cholesky(chol_inv(post.P_tilde, "P_tilde"))
    col = np.zeros_like(Sigma)
    col[:, idx, idx] = np.sqrt(var)
    B = sample_matrix_normal(post.B_tilde, row, col, rng, size=n_draws)
    return PosteriorDraws(3, B[None], Sigma[None], None, L, region_labels,
                          **_draws_meta(post, 3, n_draws, seed, {"model3_mode": mode}))


def log_marginal_terms(stats, prior):
    """Components of the log marginal likelihood of the data.

    Every constant is kept (nothing is dropped), so the total is the log
    density of all subjects' responses given their initial lags.
    """
    post = combine(stats, prior, dof="exact")
    R = prior.R
    nu0, nun = prior.nu0, post.nu_n
    n_total = post.n_total
    cP0 = chol(prior.P0, "P0")
    cPt = chol(post.P_tilde, "P_tilde")
    cPsi0 = chol(nu0 * prior.Psi0, "nu0 Psi0", check_condition=False)
    cPsin = chol(post.Psi_n, "Psi_n", check_condition=False)
    terms = {
        "gaussian": -0.5 * n_total * R * LOG_2PI,
        "c_kappa": float(sum(st.log_c() for st in stats)),
        "group_precision": 0.5 * R * float(logdet_chol(cP0) - logdet_chol(cPt)),
        "prior_normalizer": (0.5 * nu0 * float(logdet_chol(cPsi0))
                             - 0.5 * nu0 * R * np.log(2.0) - multigammaln(0.5 * nu0, R)),
        "posterior_normalizer": (0.5 * nun * R * np.log(2.0) + multigammaln(0.5 * nun, R)
                                 - 0.5 * nun * float(logdet_chol(cPsin))),
    }
    terms["total"] = float(sum(terms.values()))
    terms["constants_dropped"] = []
    return terms


def log_marginal_likelihood(dataset, prior, L):
    """log p(Y | lambda, kappa) under the common-covariance model."""
    designs = group_designs(dataset, L)
    return log_marginal_likelihood_designs(designs, prior)


def log_marginal_likelihood_designs(designs, prior):
    return log_marginal_terms(all_subject_stats(designs, prior), prior)["total"]


def subject_log_marginal(st, B, Sigma):
    """log p(Y_s | B, Sigma) with the subject coefficients integrated out.

    ``B`` and ``Sigma`` may be stacks of shape ``(N, q, R)`` and ``(N, R, R)``.
    """
    R = st.R
    G = sym(st.quad(B))
    cS = np.linalg.cholesky(Sigma)
    Z = np.linalg.solve(cS, np.linalg.solve(cS, G).swapaxes(-1, -2))
    tr = np.trace(Z, axis1=-2, axis2=-1)
    return (-0.5 * st.n * R * LOG_2PI + st.log_c() - 0.5 * st.n * logdet_chol(cS) - 0.5 * tr)


def stats_for_panel(panel, prior, L, s):
    return subject_stats(build_lag_design(panel, L), prior, s)
