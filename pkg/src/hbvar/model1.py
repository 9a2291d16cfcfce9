"""Log posterior of the subject-specific-covariance model in sampler coordinates.

Subject coefficients and covariances are integrated out, leaving a density
over the group parameters ``(B, Sigma, nu)``.  For subject ``s``

    log p(Y_s | B, Sigma, nu) = -(nR/2) log pi + log c_s + (nu/2) log|nu Sigma|
        + lmvgamma_R((nu + n)/2) - lmvgamma_R(nu/2)
        - ((nu + n)/2) log|nu Sigma + R_s + (B - E_s)^T Q_s^{-1} (B - E_s)|

Sampler coordinates are non-centered:

* ``B = B0 + C B_spec L^T`` with ``C C^T = P0^{-1}`` and ``Sigma = L L^T``, so
  ``B_spec`` is standard normal a priori and vec(B) | Sigma ~ N(vec B0, Sigma kron P0^{-1});
* ``L`` is lower triangular, stored row-major with its diagonal on the log scale;
* ``nu = nu_lb + exp(zeta)``.

Vector layout: ``[vec(B_spec) row-major, tril(L) row-major, zeta]``; ``zeta``
is omitted when ``nu`` is held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import multigammaln, psi

from .distributions import invwishart_logpdf

LOG_PI = np.log(np.pi)
LOG_2PI = np.log(2.0 * np.pi)


def lmvgamma(a, R):
    """log multivariate gamma function; scalar fast path of scipy's multigammaln."""
    return 0.25 * R * (R - 1) * LOG_PI + sum(math.lgamma(a - 0.5 * j) for j in range(R))


def mvdigamma(a, R):
    """Derivative of log multivariate gamma: sum_j digamma(a - j/2), j < R."""
    return float(psi(a - 0.5 * np.arange(R)).sum())


def _tri_inv(L):
    return solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)


@dataclass(frozen=True, eq=False)
class HierParams:
    B: np.ndarray
    Sigma: np.ndarray
    nu: float


@dataclass(frozen=True, eq=False)
class UnconstrainedState:
    B_spec: np.ndarray
    chol_params: np.ndarray
    zeta: float | None = None

    def to_vector(self):
        parts = [self.B_spec.ravel(), self.chol_params]
        if self.zeta is not None:
            parts.append([self.zeta])
        return np.concatenate(parts)


class HierTarget:
    """Marginal log posterior of (B, Sigma, nu) and its gradient.

    Parameters
    ----------
    stats : list of SubjectStats
    prior : ShrinkagePrior
    fixed_nu : float, optional
        Hold ``nu`` at this value (drops ``zeta`` from the state).
    nu_lb : float, optional
        Lower bound of ``nu``; defaults to ``R + 2``.
    nu_prior : (shape, rate), optional
        Gamma prior on ``nu - nu_lb``.  The default flat prior leaves the
        posterior of ``nu`` improper in its upper tail (the likelihood tends
        to the common-covariance value as ``nu`` grows), which matters when
        the data carry little information about heterogeneity.
    """

    def __init__(self, stats, prior, fixed_nu=None, nu_lb=None, nu_prior=None):
        self.prior = prior
        self.S = len(stats)
        self.q, self.R = prior.q, prior.R
        if self.S:
            ns = {st.n for st in stats}
            if len(ns) != 1:
                raise ValueError("all subjects must share n")
            self.n = ns.pop()
            self.Qinv = np.stack([st.Q_inv for st in stats])
            self.E = np.stack([st.E for st in stats])
            self.Rm = np.stack([0.5 * (st.Rm + st.Rm.T) for st in stats])
            self.log_c_each = np.array([st.log_c() for st in stats])
        else:
            self.n = 0
            self.log_c_each = np.zeros(0)
        self.log_c = float(np.sum(self.log_c_each))
        self.fixed_nu = None if fixed_nu is None else float(fixed_nu)
        self.nu_lb = float(self.R + 2 if nu_lb is None else nu_lb)
        if nu_prior is not None:
            a, b = (float(v) for v in nu_prior)
            if not (a > 0 and b > 0):
                raise ValueError("nu_prior shape and rate must be positive")
            nu_prior = (a, b)
        self.nu_prior = nu_prior
        self.C = np.linalg.cholesky(prior.P0_inv)
        self.B0 = prior.B0
        self.nu0 = prior.nu0
        self.Psi0s = prior.nu0 * prior.Psi0
        q, R = self.q, self.R
        self.n_B = q * R
        self.n_L = R * (R + 1) // 2
        self.dim = self.n_B + self.n_L + (0 if self.fixed_nu is not None else 1)
        self._il = np.tril_indices(R)
        self._diag_pos = np.array([i * (i + 1) // 2 + i for i in range(R)])
        self._jac_w = R - np.arange(R) + 1.0  # (R - i + 2) for 1-based i
        self._const_prior = (-0.5 * self.n_B * LOG_2PI + R * np.log(2.0)
                             + 0.5 * self.nu0 * np.linalg.slogdet(self.Psi0s)[1]
                             - 0.5 * self.nu0 * R * np.log(2.0) - lmvgamma(0.5 * self.nu0, R))
        self._lik_const = -0.5 * self.n * R * LOG_PI

    # -- coordinate maps --------------------------------------------------------

    def unpack(self, theta):
        q, R = self.q, self.R
        B_spec = theta[:self.n_B].reshape(q, R)
        L = np.zeros((R, R))
        L[self._il] = theta[self.n_B:self.n_B + self.n_L]
        logd = np.diag(L).copy()
        L[np.diag_indices(R)] = np.exp(logd)
        if self.fixed_nu is None:
            zeta = theta[-1]
            nu = self.nu_lb + np.exp(zeta)
        else:
            zeta, nu = None, self.fixed_nu
        return B_spec, L, logd, nu, zeta

    def constrain(self, theta):
        B_spec, L, _, nu, _ = self.unpack(np.asarray(theta, dtype=float))
        return HierParams(self.B0 + self.C @ B_spec @ L.T, L @ L.T, float(nu))

    def unconstrain(self, B, Sigma, nu=None):
        L = np.linalg.cholesky(Sigma)
        B_spec = np.linalg.solve(self.C, np.linalg.solve(L, (B - self.B0).T).T)
        th = L.copy()
        th[np.diag_indices(self.R)] = np.log(np.diag(L))
        parts = [B_spec.ravel(), th[self._il]]
        if self.fixed_nu is None:
            parts.append([np.log(nu - self.nu_lb)])
        return np.concatenate(parts)

    def state(self, theta):
        theta = np.asarray(theta, dtype=float)
        zeta = None if self.fixed_nu is not None else float(theta[-1])
        return UnconstrainedState(theta[:self.n_B].reshape(self.q, self.R).copy(),
                                  theta[self.n_B:self.n_B + self.n_L].copy(), zeta)

    # -- density ----------------------------------------------------------------

    def log_prob(self, theta):
        return self.log_prob_and_grad(theta, need_grad=False)[0]

    def log_prob_and_grad(self, theta, need_grad=True):
        theta = np.asarray(theta, dtype=float)
        q, R, S, n = self.q, self.R, self.S, self.n
        B_spec, L, logd, nu, zeta = self.unpack(theta)
        if not (np.isfinite(theta).all() and np.isfinite(nu) and nu > 0):
            return -np.inf, None
        CB = self.C @ B_spec
        B = self.B0 + CB @ L.T
        Sigma = L @ L.T
        ld_S = 2.0 * logd.sum()
        Li = _tri_inv(L)
        Sinv = Li.T @ Li

        # prior: B_spec standard normal, Sigma ~ IW(nu0 Psi0, nu0), plus Jacobians
        W = Li @ self.Psi0s  # tr(Psi S^-1) = tr(Li Psi Li^T)
        lp = (self._const_prior - 0.5 * (B_spec * B_spec).sum()
              - 0.5 * (self.nu0 + R + 1) * ld_S - 0.5 * (W * Li).sum()
              + logd @ self._jac_w)
        d_zeta = 1.0
        if zeta is not None:
            lp += zeta
            if self.nu_prior is not None:
                a0, b0 = self.nu_prior
                e = nu - self.nu_lb
                lp += a0 * math.log(b0) - math.lgamma(a0) + (a0 - 1.0) * zeta - b0 * e
                d_zeta = a0 - b0 * e

        if need_grad:
            G_Sigma = -0.5 * (self.nu0 + R + 1) * Sinv + 0.5 * (Sinv @ self.Psi0s @ Sinv)
            G_B = None
        d_nu = 0.0
        if S:
            D = B - self.E
            QD = self.Qinv @ D
            M = nu * Sigma + self.Rm + D.transpose(0, 2, 1) @ QD
            try:
                cM = np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                return -np.inf, None
            ld_M = 2.0 * np.log(cM.diagonal(axis1=1, axis2=2)).sum(axis=1)
            a = 0.5 * (nu + n)
            lik = (S * (self._lik_const + 0.5 * nu * (R * np.log(nu) + ld_S)
                        + lmvgamma(a, R) - lmvgamma(0.5 * nu, R))
                   + self.log_c - a * ld_M.sum())
            lp += lik
            if need_grad:
                cMi = np.linalg.inv(cM)
                Minv = cMi.transpose(0, 2, 1) @ cMi
                G_B = -(nu + n) * (QD @ Minv).sum(axis=0)
                Minv_sum = Minv.sum(axis=0)
                G_Sigma = G_Sigma + (0.5 * S * nu) * Sinv - (a * nu) * Minv_sum
                if self.fixed_nu is None:
                    d_nu = (0.5 * S * (R * np.log(nu) + ld_S) + 0.5 * S * R - 0.5 * ld_M.sum()
                            - a * (Minv_sum * Sigma).sum()
                            + 0.5 * S * (mvdigamma(a, R) - mvdigamma(0.5 * nu, R)))
        if not np.isfinite(lp):
            return -np.inf, None
        if not need_grad:
            return float(lp), None

        if G_B is None:
            g_Bspec = -B_spec
            G_L = 2.0 * G_Sigma @ L
        else:
            g_Bspec = self.C.T @ G_B @ L - B_spec
            G_L = G_B.T @ CB + 2.0 * G_Sigma @ L
        g_theta = G_L[self._il]
        g_theta[self._diag_pos] = g_theta[self._diag_pos] * L.diagonal() + self._jac_w
        grad = np.empty(self.dim)
        grad[:self.n_B] = g_Bspec.ravel()
        grad[self.n_B:self.n_B + self.n_L] = g_theta
        if self.fixed_nu is None:
            grad[-1] = d_nu * (nu - self.nu_lb) + d_zeta
        if not np.isfinite(grad).all():
            return -np.inf, None
        return float(lp), grad

    # -- per-subject terms for model comparison ----------------------------------

    def pointwise(self, B, Sigma, nu):
        """log p(Y_s | B, Sigma, nu) per subject; B, Sigma, nu may be stacked over draws.

        Returns shape ``(..., S)``.
        """
        n, R = self.n, self.R
        B = np.asarray(B, dtype=float)[..., None, :, :]
        Sigma = np.asarray(Sigma, dtype=float)
        nu = np.asarray(nu, dtype=float)
        D = B - self.E
        M = nu[..., None, None, None] * Sigma[..., None, :, :] + self.Rm + np.swapaxes(D, -1, -2) @ self.Qinv @ D
        cM = np.linalg.cholesky(0.5 * (M + np.swapaxes(M, -1, -2)))
        ld_M = 2.0 * np.sum(np.log(np.diagonal(cM, axis1=-2, axis2=-1)), axis=-1)
        ld_S = np.linalg.slogdet(Sigma)[1]
        per_draw = (-0.5 * n * R * LOG_PI + 0.5 * nu * (R * np.log(nu) + ld_S)
                    + multigammaln(0.5 * (nu + n), R) - multigammaln(0.5 * nu, R))
        return per_draw[..., None] + self.log_c_each - 0.5 * (nu[..., None] + n) * ld_M


def _as_vector(state):
    if isinstance(state, UnconstrainedState):
        return state.to_vector()
    return np.asarray(state, dtype=float)


def log_target(state, stats, prior, fixed_nu=None, nu_prior=None):
    """log p(B, Sigma, nu | Y) + log-Jacobian, up to a constant; -inf if rejected."""
    return HierTarget(stats, prior, fixed_nu, nu_prior=nu_prior).log_prob(_as_vector(state))


def grad_log_target(state, stats, prior, fixed_nu=None, nu_prior=None):
    """Gradient of :func:`log_target`; ``None`` signals a rejected state."""
    target = HierTarget(stats, prior, fixed_nu, nu_prior=nu_prior)
    return target.log_prob_and_grad(_as_vector(state))[1]


def prior_logpdf_reference(B, Sigma, prior):
    """log p(B | Sigma) + log p(Sigma) evaluated directly (for checks)."""
    from .simulate import matrix_normal_logpdf
    return (matrix_normal_logpdf(B, prior.B0, prior.P0_inv, Sigma)
            + invwishart_logpdf(Sigma, prior.nu0 * prior.Psi0, prior.nu0))
