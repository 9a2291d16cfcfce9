"""Small dense linear-algebra helpers built on Cholesky factorizations."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import ConditioningError, NumericalError

MAX_CONDITION = 1e12


def sym(a):
    """Return the symmetric part ``(A + A^T) / 2`` (works on stacks)."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def condition_number(a):
    w = np.linalg.eigvalsh(sym(a))
    if w[0] <= 0:
        return np.inf
    return float(w[-1] / w[0])


def chol(a, what="matrix", check_condition=True):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises ConditioningError when the matrix is not positive definite or its
    condition number exceeds ``MAX_CONDITION``.
    """
    a = sym(np.asarray(a, dtype=float))
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} has non-finite entries")
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ConditioningError(f"{what} is not positive definite",
                                condition_number(a)) from None
    if check_condition:
        d = np.diag(c)
        # cond(A) >= (max d / min d)^2; only pay for eigenvalues when close
        if (d.max() / d.min()) ** 2 > MAX_CONDITION ** 0.5:
            k = condition_number(a)
            if k > MAX_CONDITION:
                raise ConditioningError(f"{what} is ill-conditioned", k)
    return c


def chol_inv(a, what="matrix"):
    """Inverse of an SPD matrix through its Cholesky factor."""
    c = chol(a, what)
    ci = linalg.solve_triangular(c, np.eye(len(c)), lower=True)
    return ci.T @ ci


def chol_solve(a, b, what="matrix"):
    c = chol(a, what)
    return linalg.cho_solve((c, True), b)


def logdet_chol(c):
    """log|A| from the (lower) Cholesky factor of A; works on stacks."""
    return 2.0 * np.sum(np.log(np.diagonal(c, axis1=-2, axis2=-1)), axis=-1)


def logdet_spd(a, what="matrix"):
    return float(logdet_chol(chol(a, what, check_condition=False)))
