"""Empirical-Bayes choice of the shrinkage hyperparameters.

``lambda`` (group-level shrinkage) and ``kappa_1..kappa_S`` (subject-level
shrinkage) maximize the log marginal likelihood of the common-covariance
model.  The search runs Nelder-Mead in log space.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .conjugate import log_marginal_likelihood_designs
from .data import build_default_prior, group_designs
from .errors import HbvarError, InitializationError

log = logging.getLogger(__name__)

TERMINATIONS = ("tolerance", "max_iter", "failure")


@dataclass
class TuneConfig:
    lam0: float = 0.2
    kappa0: float = 0.2
    rel_tol: float = 1e-6
    x_tol: float = 1e-5
    max_iter: int = 2000
    initial_step: float = 0.5
    two_stage: bool = False


@dataclass
class TuneResult:
    """Maximizer of the log marginal likelihood and the search record.

    ``trace`` holds ``(iteration, best objective so far)`` pairs; ``rejected``
    lists evaluations whose objective was not finite.
    """

    lam: float
    kappa: np.ndarray
    objective: float
    start_objective: float
    trace: list = field(default_factory=list)
    converged: bool = False
    termination: str = "tolerance"
    n_evals: int = 0
    rejected: list = field(default_factory=list)
    L: int = 1

    def prior(self, dataset):
        return build_default_prior(dataset, self.L, self.lam, self.kappa)

    def to_dict(self):
        return {"lam": self.lam, "kappa": [float(k) for k in self.kappa],
                "objective": self.objective, "start_objective": self.start_objective,
                "trace": [[int(i), float(v)] for i, v in self.trace],
                "converged": self.converged, "termination": self.termination,
                "n_evals": self.n_evals, "rejected": self.rejected, "L": self.L}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["lam"]), np.array(d["kappa"], dtype=float), float(d["objective"]),
                   float(d["start_objective"]), [tuple(t) for t in d.get("trace", [])],
                   bool(d.get("converged", False)), d.get("termination", "tolerance"),
                   int(d.get("n_evals", 0)), list(d.get("rejected", [])), int(d.get("L", 1)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


class _Objective:
    """Log marginal likelihood as a function of log-hyperparameters.

    Keeps the best evaluation seen so far, so the returned point reproduces the
    reported objective exactly.
    """

    def __init__(self, designs, base_prior, expand):
        self.designs = designs
        self.base = base_prior
        self.expand = expand
        self.n_evals = 0
        self.best = -np.inf
        self.best_hyper = None
        self.rejected = []

    def value(self, x):
        lam, kappa = self.expand(x)
        self.n_evals += 1
        try:
            f = log_marginal_likelihood_designs(self.designs, self.base.with_hyper(lam, kappa))
        except (HbvarError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            self.rejected.append({"eval": self.n_evals, "reason": type(exc).__name__})
            return -np.inf
        if not np.isfinite(f):
            self.rejected.append({"eval": self.n_evals, "reason": "non-finite"})
            return -np.inf
        if f > self.best:
            self.best, self.best_hyper = f, (lam, kappa)
        return f

    def __call__(self, x):
        f = self.value(x)
        return -f if np.isfinite(f) else np.inf


def _simplex(x0, step):
    return np.vstack([x0] + [x0 + step * e for e in np.eye(x0.size)])


def _nelder_mead(obj, x0, cfg, trace, it0):
    f0 = -obj(x0)
    fatol = cfg.rel_tol * max(1.0, abs(f0)) if np.isfinite(f0) else cfg.rel_tol
    it = [it0]

    def callback(xk):
        it[0] += 1
        trace.append((it[0], float(obj.best)))

    res = minimize(obj, x0, method="Nelder-Mead", callback=callback,
                   options={"maxiter": cfg.max_iter, "maxfev": 20 * cfg.max_iter,
                            "xatol": cfg.x_tol, "fatol": fatol,
                            "initial_simplex": _simplex(x0, cfg.initial_step),
                            "adaptive": x0.size > 4})
    return res, it[0]


def tune(dataset, L, config=None):
    """Maximize the log marginal likelihood over ``lambda`` and ``kappa_s``.

    Returns a :class:`TuneResult`.  Raises :class:`InitializationError` when
    the objective cannot be evaluated at the start point.
    """
    cfg = config or TuneConfig()
    S = dataset.S
    designs = group_designs(dataset, L)
    base = build_default_prior(dataset, L, cfg.lam0, cfg.kappa0)

    def full(x):
        return float(np.exp(x[0])), np.exp(x[1:])

    def shared(x):
        return float(np.exp(x[0])), np.full(S, np.exp(x[1]))

    obj = _Objective(designs, base, full)
    x_start = np.log(np.r_[cfg.lam0, np.full(S, cfg.kappa0)])
    f_start = obj.value(x_start)
    if not np.isfinite(f_start):
        raise InitializationError("log marginal likelihood is not finite at the start point")
    trace = [(0, float(f_start))]
    it = 0

    if cfg.two_stage and S > 1:
        obj.expand = shared
        res1, it = _nelder_mead(obj, np.log([cfg.lam0, cfg.kappa0]), cfg, trace, it)
        obj.expand = full
        lam, kappa = obj.best_hyper
        x_start = np.log(np.r_[lam, kappa])

    res, it = _nelder_mead(obj, x_start, cfg, trace, it)
    if res.status == 0:
        termination = "tolerance"
    elif res.status in (1, 2):
        termination = "max_iter"
    else:
        termination = "failure"
    lam, kappa = obj.best_hyper
    log.info("tune: lambda=%.4g, objective=%.6f after %d evaluations", lam, obj.best, obj.n_evals)
    return TuneResult(lam=lam, kappa=np.asarray(kappa, dtype=float).copy(), objective=float(obj.best),
                      start_objective=float(f_start), trace=trace,
                      converged=termination == "tolerance", termination=termination,
                      n_evals=obj.n_evals, rejected=obj.rejected, L=L)


def grid_search(dataset, L, lam_grid, kappa_grid=None):
    """Objective on a grid of ``lambda`` (and shared ``kappa``) values.

    Returns ``(best_lambda, best_kappa, best_objective, values)`` where
    ``values`` has shape ``(len(lam_grid), len(kappa_grid))``.
    """
    designs = group_designs(dataset, L)
    base = build_default_prior(dataset, L, 1.0, 1.0)
    if kappa_grid is None:
        kappa_grid = [base.kappa[0]]
    values = np.full((len(lam_grid), len(kappa_grid)), -np.inf)
    for i, lam in enumerate(lam_grid):
        for j, k in enumerate(kappa_grid):
            try:
                values[i, j] = log_marginal_likelihood_designs(
                    designs, base.with_hyper(float(lam), np.full(dataset.S, float(k))))
            except HbvarError:
                pass
    i, j = np.unravel_index(np.argmax(values), values.shape)
    return float(lam_grid[i]), float(kappa_grid[j]), float(values[i, j]), values
