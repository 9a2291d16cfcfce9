"""Synthetic panels from the full hierarchy and brute-force reference oracles.

The oracles in this module deliberately avoid the completed-square statistics
of :mod:`hbvar.conjugate`.  Subject coefficients are integrated out through the
matrix-normal marginal ``Y_s | B, Sigma ~ MN(X_s B, I + X_s P_s^{-1} X_s^T, Sigma)``
and everything else is handled by plain Monte Carlo or elementary conjugate
Gibbs updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from .conjugate import LOG_2PI
from .data import GroupDataset, SubjectPanel, group_designs
from .distributions import invwishart_logpdf, sample_invwishart, sample_matrix_normal
from .draws import PosteriorDraws
from .errors import SpecInfeasibleError, UnreliableEstimateError, ValidationError
from .linalg import chol_inv, logdet_chol


def companion(B, R):
    """Companion matrix of a VAR whose stacked coefficients are ``B`` (q x R)."""
    q = B.shape[0]
    L = q // R
    C = np.zeros((q, q))
    C[:R, :] = B.T
    if L > 1:
        C[R:, :-R] = np.eye(q - R)
    return C


def spectral_radius(B, R):
    return float(np.max(np.abs(np.linalg.eigvals(companion(B, R)))))


def _psd_factor(A):
    """Square-root factor F with F F^T = A; tolerates singular PSD input."""
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (A + A.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(eq=False)
class GeneratorSpec:
    """Parameters of a synthetic group.

    ``P_s_inv`` is one ``q x q`` covariance per subject (or a single matrix
    shared by all).  ``nu=None`` gives every subject the group covariance.
    """

    R: int
    S: int
    T: int
    L: int
    B: np.ndarray
    Sigma: np.ndarray
    nu: float | None
    P_s_inv: np.ndarray
    seed: int = 0
    burn_in: int = 200
    max_radius: float = 0.98
    max_rejections: int = 1000
    group_id: str = "synthetic"

    def __post_init__(self):
        q = self.L * self.R
        self.B = np.asarray(self.B, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        P = np.asarray(self.P_s_inv, dtype=float)
        if P.ndim == 2:
            P = np.broadcast_to(P, (self.S, q, q)).copy()
        self.P_s_inv = P
        if self.B.shape != (q, self.R) or self.Sigma.shape != (self.R, self.R):
            raise ValidationError("B must be (L R) x R and Sigma R x R")
        if self.P_s_inv.shape != (self.S, q, q):
            raise ValidationError(f"P_s_inv must be ({self.S}, {q}, {q})")
        if self.nu is not None and not self.nu > self.R - 1:
            raise ValidationError("nu must exceed R - 1")


@dataclass(eq=False)
class GroundTruth:
    B: np.ndarray
    Sigma: np.ndarray
    nu: float | None
    B_s: np.ndarray
    Sigma_s: np.ndarray
    rejections: list = field(default_factory=list)

    def to_dict(self):
        return {"B": self.B.tolist(), "Sigma": self.Sigma.tolist(), "nu": self.nu,
                "B_s": self.B_s.tolist(), "Sigma_s": self.Sigma_s.tolist(),
                "rejections": list(self.rejections)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["B"], dtype=float), np.array(d["Sigma"], dtype=float), d["nu"],
                   np.array(d["B_s"], dtype=float), np.array(d["Sigma_s"], dtype=float),
                   list(d.get("rejections", [])))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def simulate_var(B, Sigma, T, burn_in, rng):
    """Simulate ``T`` retained steps of a zero-mean VAR from a zero initial state."""
    q, R = B.shape
    L = q // R
    total = T + burn_in
    y = np.zeros((total + L, R))
    eps = rng.standard_normal((total, R)) @ _psd_factor(Sigma).T
    for t in range(total):
        # lags ordered most recent first: (y_{t-1}, ..., y_{t-L})
        x = y[t:t + L][::-1].ravel()
        y[t + L] = x @ B + eps[t]
    return y[L + burn_in:]


def generate(spec):
    """Draw subject parameters and series from the hierarchy.

    Returns ``(GroupDataset, GroundTruth)``.  Non-stationary subject
    coefficient draws (companion spectral radius >= ``max_radius``) are
    redrawn from the same conditional law.
    """
    rng = np.random.default_rng(spec.seed)
    R, S, q = spec.R, spec.S, spec.L * spec.R
    B_s = np.zeros((S, q, R))
    Sigma_s = np.zeros((S, R, R))
    panels, rejections = [], []
    for s in range(S):
        if spec.nu is None:
            Sig = spec.Sigma.copy()
        else:
            Sig = sample_invwishart(spec.nu * spec.Sigma, spec.nu, 1, rng)[0]
        row = _psd_factor(spec.P_s_inv[s])
        col = np.linalg.cholesky(Sig)
        for k in range(spec.max_rejections + 1):
            if k == spec.max_rejections:
                raise SpecInfeasibleError(
                    f"subject {s}: {spec.max_rejections} consecutive non-stationary draws")
            Bs = sample_matrix_normal(spec.B, row, col, rng)
            if spectral_radius(Bs, R) < spec.max_radius:
                break
        rejections.append(k)
        B_s[s], Sigma_s[s] = Bs, Sig
        y = simulate_var(Bs, Sig, spec.T, spec.burn_in, rng)
        panels.append(SubjectPanel(f"s{s + 1:03d}", y, tuple(f"R{j + 1}" for j in range(R))))
    truth = GroundTruth(spec.B.copy(), spec.Sigma.copy(), spec.nu, B_s, Sigma_s, rejections)
    return GroupDataset(spec.group_id, tuple(panels)), truth


# -- Gibbs oracle for the common-covariance model --------------------------------

def gibbs_oracle_model2(dataset, prior, L, n_draws, seed, burn_in=2000, use_likelihood=True,
                        keep_subject=False):
    """Conjugate Gibbs sampler over (B_1..B_S, B, Sigma) with Sigma_s = Sigma.

    Each block uses only the elementary conjugate update implied by the
    hierarchy.  With ``use_likelihood=False`` the data are ignored and the
    chain targets the prior.  Returns the (B, Sigma) marginal as draws of
    model 2 (one chain).
    """
    designs = group_designs(dataset, L)
    S, R, q = len(designs), prior.R, prior.q
    prior.check_dims(designs[0].q, designs[0].R, S)
    rng = np.random.default_rng(seed)
    Ps = [prior.P_s(s) for s in range(S)]
    XtX = [d.X.T @ d.X for d in designs]
    XtY = [d.X.T @ d.Y for d in designs]
    n = designs[0].n
    P0, B0 = prior.P0, prior.B0

    if use_likelihood:
        K = [chol_inv(Ps[s] + XtX[s]) for s in range(S)]
    else:
        K = [prior.P_s_inv(s) for s in range(S)]
    Kc = [np.linalg.cholesky(k) for k in K]
    Pbar = P0 + sum(Ps)
    Pbar_inv = chol_inv(Pbar)
    Pbar_c = np.linalg.cholesky(Pbar_inv)
    dof = prior.nu0 + S * q + q + (S * n if use_likelihood else 0)

    B = B0.copy()
    Sigma = prior.Psi0.copy()
    total = n_draws + burn_in
    out_B = np.empty((n_draws, q, R))
    out_S = np.empty((n_draws, R, R))
    out_Bs = np.empty((n_draws, S, q, R)) if keep_subject else None
    Bs = [B.copy() for _ in range(S)]
    for it in range(total):
        cS = np.linalg.cholesky(Sigma)
        for s in range(S):
            lin = Ps[s] @ B + (XtY[s] if use_likelihood else 0.0)
            Bs[s] = sample_matrix_normal(K[s] @ lin, Kc[s], cS, rng)
        mean_B = Pbar_inv @ (P0 @ B0 + sum(Ps[s] @ Bs[s] for s in range(S)))
        B = sample_matrix_normal(mean_B, Pbar_c, cS, rng)
        scale = prior.nu0 * prior.Psi0 + (B - B0).T @ P0 @ (B - B0)
        for s in range(S):
            D = Bs[s] - B
            scale = scale + D.T @ Ps[s] @ D
            if use_likelihood:
                res = designs[s].Y - designs[s].X @ Bs[s]
                scale = scale + res.T @ res
        Sigma = sample_invwishart(0.5 * (scale + scale.T), dof, 1, rng)[0]
        if it >= burn_in:
            out_B[it - burn_in] = B
            out_S[it - burn_in] = Sigma
            if keep_subject:
                out_Bs[it - burn_in] = np.array(Bs)
    draws = PosteriorDraws(2, out_B[None], out_S[None], None, L, dataset.region_labels,
                           [seed], burn_in, {"sampler": "gibbs"}, {"oracle": True})
    if keep_subject:
        return draws, out_Bs
    return draws


# -- Monte Carlo marginal-likelihood oracles ------------------------------------

@dataclass(frozen=True)
class MCEstimate:
    """Log of a Monte Carlo mean with its delta-method standard error."""

    log_value: float
    se: float
    ess: float
    n_draws: int


def mc_log_mean(log_w, min_ess=100.0, raise_on_low_ess=True):
    log_w = np.asarray(log_w, dtype=float)
    N = log_w.size
    m = np.max(log_w)
    w = np.exp(log_w - m)
    mean = w.mean()
    ess = w.sum() ** 2 / np.sum(w * w)
    se = w.std(ddof=1) / (np.sqrt(N) * mean)
    if raise_on_low_ess and ess < min_ess:
        raise UnreliableEstimateError(f"effective sample size {ess:.1f} < {min_ess}")
    return MCEstimate(float(m + np.log(mean)), float(se), float(ess), N)


class MarginalGaussian:
    """log p(Y_s | B, Sigma) with B_s integrated via the matrix-normal marginal."""

    def __init__(self, design, P_s_inv):
        self.design = design
        n, R = design.Y.shape
        A = np.eye(n) + design.X @ P_s_inv @ design.X.T
        self.cA = np.linalg.cholesky(A)
        self.logdet_A = float(logdet_chol(self.cA))
        self.n, self.R = n, R
        # whiten once: Z = cA^{-1} (Y - X B) = Yw - Xw B
        self.Yw = np.linalg.solve(self.cA, design.Y)
        self.Xw = np.linalg.solve(self.cA, design.X)

    def __call__(self, B, Sigma):
        """Vectorized over leading axes of B (N, q, R) and Sigma (N, R, R)."""
        Z = self.Yw - self.Xw @ B
        G = np.swapaxes(Z, -1, -2) @ Z
        cS = np.linalg.cholesky(Sigma)
        W = np.linalg.solve(cS, G)
        tr = np.trace(np.linalg.solve(cS, np.swapaxes(W, -1, -2)), axis1=-2, axis2=-1)
        return (-0.5 * self.n * self.R * LOG_2PI - 0.5 * self.n * logdet_chol(cS)
                - 0.5 * self.R * self.logdet_A - 0.5 * tr)


def _direct_loglik(design, B_s, Sigma_s):
    """Plain Gaussian VAR log-likelihood of one subject (vectorized over draws)."""
    resid = design.Y - design.X @ B_s
    G = np.swapaxes(resid, -1, -2) @ resid
    cS = np.linalg.cholesky(Sigma_s)
    W = np.linalg.solve(cS, G)
    tr = np.trace(np.linalg.solve(cS, np.swapaxes(W, -1, -2)), axis1=-2, axis2=-1)
    n, R = design.Y.shape
    return -0.5 * n * R * LOG_2PI - 0.5 * n * logdet_chol(cS) - 0.5 * tr


def matrix_normal_logpdf(X, M, row_cov, col_cov):
    """log MN(X; M, row_cov, col_cov), vectorized over leading axes of X and col_cov."""
    q, R = M.shape
    cr = np.linalg.cholesky(row_cov)
    cc = np.linalg.cholesky(col_cov)
    Z = np.linalg.solve(cr, X - M)
    W = np.linalg.solve(cc, np.swapaxes(Z, -1, -2))
    return (-0.5 * q * R * LOG_2PI - 0.5 * R * logdet_chol(cr) - 0.5 * q * logdet_chol(cc)
            - 0.5 * np.sum(W * W, axis=(-2, -1)))


def _chunks(N, size=20000):
    for a in range(0, N, size):
        yield a, min(N, a + size)


def _logchol_to_sigma(theta, R):
    """theta (N, R(R+1)/2) -> Sigma (N, R, R) and log-Jacobian of the map."""
    N = theta.shape[0]
    Lm = np.zeros((N, R, R))
    il = np.tril_indices(R)
    Lm[:, il[0], il[1]] = theta
    d = np.arange(R)
    logd = Lm[:, d, d].copy()
    Lm[:, d, d] = np.exp(logd)
    Sigma = Lm @ np.swapaxes(Lm, -1, -2)
    logjac = R * np.log(2.0) + logd @ (R - d + 1.0)
    return Sigma, logjac


def _numerical_hessian(f, x, h=1e-4):
    k = x.size
    H = np.zeros((k, k))
    f0 = f(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * h * h)
    return H


def _student_t_proposal(logf, x0, df=5.0, inflate=1.5):
    """Laplace-fitted multivariate t proposal for the integrand ``logf``."""
    res = optimize.minimize(lambda x: -logf(x), x0, method="BFGS")
    mode = res.x
    H = -_numerical_hessian(logf, mode)
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.clip(w, 1e-8 * max(w.max(), 1e-8), None)
    cov = inflate * (V / w) @ V.T
    return stats.multivariate_t(loc=mode, shape=cov, df=df)


def mc_marginal_oracle(dataset, prior, L, mc_draws, seed, fixed_B=None, proposal="importance",
                       min_ess=100.0):
    """Monte Carlo estimate of log p(Y) under the common-covariance model.

    Integrates ``prod_s p(Y_s | B, Sigma)`` against the prior of ``(B, Sigma)``
    (or of ``Sigma`` alone when ``fixed_B`` is given).  ``proposal="prior"``
    draws from the prior; ``"importance"`` uses a Laplace-fitted multivariate t
    in (vec B, log-Cholesky Sigma) coordinates.
    """
    designs = group_designs(dataset, L)
    S, R, q = len(designs), prior.R, prior.q
    terms = [MarginalGaussian(d, prior.P_s_inv(s)) for s, d in enumerate(designs)]
    rng = np.random.default_rng(seed)
    nB = 0 if fixed_B is not None else q * R
    nL = R * (R + 1) // 2

    def loglik(B, Sigma):
        return sum(t(B, Sigma) for t in terms)

    if proposal == "prior":
        log_w = np.empty(mc_draws)
        for a, b in _chunks(mc_draws):
            Sig = sample_invwishart(prior.nu0 * prior.Psi0, prior.nu0, b - a, rng)
            if fixed_B is None:
                B = sample_matrix_normal(prior.B0, np.linalg.cholesky(prior.P0_inv),
                                         np.linalg.cholesky(Sig), rng, size=b - a)
            else:
                B = np.broadcast_to(fixed_B, (b - a, q, R))
            log_w[a:b] = loglik(B, Sig)
        return mc_log_mean(log_w, min_ess)
    if proposal != "importance":
        raise ValueError(f"unknown proposal {proposal!r}")

    def log_integrand(phi):
        phi = np.atleast_2d(phi)
        Sig, logjac = _logchol_to_sigma(phi[:, nB:], R)
        if fixed_B is None:
            B = phi[:, :nB].reshape(-1, q, R)
            lp_B = matrix_normal_logpdf(B, prior.B0, prior.P0_inv, Sig)
        else:
            B = np.broadcast_to(fixed_B, (phi.shape[0], q, R))
            lp_B = 0.0
        lp_S = invwishart_logpdf(Sig, prior.nu0 * prior.Psi0, prior.nu0)
        return loglik(B, Sig) + lp_B + lp_S + logjac

    # start from pooled OLS estimates
    X = np.vstack([d.X for d in designs])
    Y = np.vstack([d.Y for d in designs])
    B_ols = np.linalg.lstsq(X, Y, rcond=None)[0] if fixed_B is None else fixed_B
    res = Y - X @ B_ols
    C0 = np.linalg.cholesky(res.T @ res / len(Y))
    il = np.tril_indices(R)
    th0 = C0.copy()
    th0[np.diag_indices(R)] = np.log(np.diag(C0))
    x0 = np.concatenate([B_ols.ravel() if fixed_B is None else [], th0[il]])
    prop = _student_t_proposal(lambda x: float(log_integrand(x)[0]), x0)
    log_w = np.empty(mc_draws)
    for a, b in _chunks(mc_draws):
        phi = prop.rvs(size=b - a, random_state=rng).reshape(b - a, -1)
        log_w[a:b] = log_integrand(phi) - prop.logpdf(phi)
    return mc_log_mean(log_w, min_ess)


def mc_subject_loglik_model1(design, P_s_inv, B, Sigma, nu, mc_draws, seed,
                             draw_coefficients=False, min_ess=100.0):
    """Monte Carlo estimate of log p(Y_s | B, Sigma, nu) for the hierarchical model.

    Draws ``Sigma_s ~ IW(nu Sigma, nu)`` from its conditional prior.  Subject
    coefficients are either integrated via the matrix-normal marginal or, with
    ``draw_coefficients=True``, also drawn from ``MN(B, P_s^{-1}, Sigma_s)``.
    """
    rng = np.random.default_rng(seed)
    R = Sigma.shape[0]
    q = B.shape[0]
    log_w = np.empty(mc_draws)
    if draw_coefficients:
        row = np.linalg.cholesky(P_s_inv)
    else:
        term = MarginalGaussian(design, P_s_inv)
    for a, b in _chunks(mc_draws):
        Sig = sample_invwishart(nu * Sigma, nu, b - a, rng)
        if draw_coefficients:
            Bs = sample_matrix_normal(B, row, np.linalg.cholesky(Sig), rng, size=b - a)
            log_w[a:b] = _direct_loglik(design, Bs, Sig)
        else:
            log_w[a:b] = term(np.broadcast_to(B, (b - a, q, R)), Sig)
    return mc_log_mean(log_w, min_ess)


def mc_subject_marginal_model2(design, P_s_inv, B, Sigma, mc_draws, seed):
    """Plain Monte Carlo over B_s ~ MN(B, P_s^{-1}, Sigma) of log p(Y_s | B, Sigma)."""
    rng = np.random.default_rng(seed)
    row = np.linalg.cholesky(P_s_inv)
    col = np.linalg.cholesky(Sigma)
    log_w = np.empty(mc_draws)
    for a, b in _chunks(mc_draws):
        Bs = sample_matrix_normal(B, row, col, rng, size=b - a)
        log_w[a:b] = _direct_loglik(design, Bs, np.broadcast_to(Sigma, (b - a,) + Sigma.shape))
    return mc_log_mean(log_w)


def logsumexp_mean(a, axis=0):
    return logsumexp(a, axis=axis) - np.log(np.shape(a)[axis])
