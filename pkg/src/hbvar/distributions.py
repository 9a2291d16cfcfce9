"""Random draws and log densities for inverse-Wishart and matrix-normal laws.

Inverse-Wishart convention throughout: ``IW(Psi, nu)`` has density
proportional to ``|S|^{-(nu + R + 1)/2} exp(-tr(Psi S^{-1}) / 2)`` and mean
``Psi / (nu - R - 1)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import multigammaln

from .errors import ImproperPosteriorError
from .linalg import chol, logdet_chol


def sample_invwishart(Psi, nu, size, rng):
    """Draw ``size`` matrices from IW(Psi, nu) by the Bartlett decomposition."""
    Psi = np.asarray(Psi, dtype=float)
    R = Psi.shape[0]
    if not nu > R - 1:
        raise ImproperPosteriorError(f"inverse-Wishart needs nu > R - 1 = {R - 1}, got {nu}")
    # Sigma^{-1} = C A A^T C^T with C = Lpsi^{-T}, A lower-triangular Bartlett factor
    Lpsi = chol(Psi, "inverse-Wishart scale", check_condition=False)
    A = np.zeros((size, R, R))
    dfs = nu - np.arange(R)
    A[:, np.arange(R), np.arange(R)] = np.sqrt(rng.chisquare(dfs, size=(size, R)))
    il = np.tril_indices(R, -1)
    if il[0].size:
        A[:, il[0], il[1]] = rng.standard_normal((size, il[0].size))
    # Sigma = Lpsi A^{-T} A^{-1} Lpsi^T
    Ainv = np.linalg.inv(A)
    G = Lpsi @ np.swapaxes(Ainv, -1, -2)
    S = G @ np.swapaxes(G, -1, -2)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def invwishart_logpdf(S, Psi, nu):
    """Log density of IW(Psi, nu) at ``S`` (a single matrix or a stack)."""
    S = np.asarray(S, dtype=float)
    R = Psi.shape[0]
    Ls = np.linalg.cholesky(S)
    Lp = np.linalg.cholesky(Psi)
    ld_s = logdet_chol(Ls)
    ld_p = logdet_chol(Lp)
    # tr(Psi S^{-1}) = ||Ls^{-1} Lp||_F^2
    Z = np.linalg.solve(Ls, np.broadcast_to(Lp, S.shape))
    tr = np.sum(Z * Z, axis=(-2, -1))
    return (0.5 * nu * ld_p - 0.5 * nu * R * np.log(2.0) - multigammaln(0.5 * nu, R)
            - 0.5 * (nu + R + 1) * ld_s - 0.5 * tr)


def sample_matrix_normal(M, row_chol, col_chol, rng, size=None):
    """Draw ``M + row_chol Z col_chol^T`` with standard normal Z.

    ``col_chol`` may be a stack of shape ``(size, R, R)`` (one column factor
    per draw).  The law is vec(X) ~ N(vec(M), (col col^T) kron (row row^T)).
    """
    q, R = M.shape
    n = 1 if size is None else size
    Z = rng.standard_normal((n, q, R))
    X = M + row_chol @ Z @ np.swapaxes(col_chol, -1, -2)
    return X[0] if size is None else X


def sample_invgamma(shape, scale, size, rng):
    """Inverse-gamma draws with density proportional to x^{-shape-1} exp(-scale/x)."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise ImproperPosteriorError(f"inverse-gamma needs positive shape and scale, got {shape}, {scale}")
    return scale / rng.gamma(shape, 1.0, size=(size,) + shape.shape)
