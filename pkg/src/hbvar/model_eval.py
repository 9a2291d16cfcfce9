"""WAIC with subjects as the pointwise unit.

Subject coefficients (and, for the heterogeneous model, subject covariances)
are integrated out analytically, so the likelihood factorizes over subjects
but not over time points; each subject contributes one pointwise term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .conjugate import subject_log_marginal
from .errors import NumericalError, ValidationError
from .model1 import HierTarget


@dataclass
class WaicReport:
    lppd: float
    p_waic: float
    waic: float
    pointwise: np.ndarray   # per-subject contribution to waic
    unit: str = "subject"
    n_draws: int = 0

    def to_dict(self):
        return {"lppd": self.lppd, "p_waic": self.p_waic, "waic": self.waic,
                "pointwise": [float(v) for v in self.pointwise], "unit": self.unit,
                "n_draws": self.n_draws}


def pointwise_loglik(draws, stats, prior, chunk=2000):
    """Matrix of ``log p(Y_s | parameters of draw d)``, shape ``(n_draws, S)``.

    Chains are concatenated in order.  Model 1 draws need ``nu``.
    """
    if not stats:
        raise ValidationError("no subjects")
    if draws.q != stats[0].q or draws.R != stats[0].R:
        raise ValidationError("draws and subject statistics disagree on dimensions")
    B = draws.flat("B")
    Sigma = draws.flat("Sigma")
    N = B.shape[0]
    out = np.empty((N, len(stats)))
    if draws.model == 1:
        if draws.nu is None:
            raise ValidationError("model 1 draws need nu")
        nu = draws.flat("nu")
        target = HierTarget(stats, prior, fixed_nu=1.0)
        for a in range(0, N, chunk):
            b = min(N, a + chunk)
            out[a:b] = target.pointwise(B[a:b], Sigma[a:b], nu[a:b])
    else:
        for s, st in enumerate(stats):
            out[:, s] = subject_log_marginal(st, B, Sigma)
    bad = np.argwhere(~np.isfinite(out))
    if bad.size:
        d, s = bad[0]
        raise NumericalError(f"non-finite pointwise log-likelihood at draw {d}, subject {s}")
    return out


def waic(pointwise):
    """WAIC from an ``(n_draws, S)`` pointwise log-likelihood matrix."""
    ll = np.asarray(pointwise, dtype=float)
    if ll.ndim != 2:
        raise ValidationError("pointwise log-likelihood must be (draws, points)")
    N = ll.shape[0]
    if N < 2:
        raise ValidationError("WAIC needs at least 2 draws")
    lppd_i = logsumexp(ll, axis=0) - np.log(N)
    p_i = ll.var(axis=0, ddof=1)
    contrib = -2.0 * (lppd_i - p_i)
    return WaicReport(float(lppd_i.sum()), float(p_i.sum()), float(contrib.sum()), contrib,
                      n_draws=N)


def waic_table(reports, lags=(1, 2, 3), models=(1, 2, 3)):
    """Markdown table with one row per lag and one column per (group, model).

    ``reports`` maps ``(group, L, model)`` to a :class:`WaicReport` (or a
    number).  The lowest value per group is marked with ``*``.
    """
    groups = list(dict.fromkeys(k[0] for k in reports))

    def val(r):
        return r.waic if isinstance(r, WaicReport) else float(r)

    best = {}
    for g in groups:
        cells = {k: val(r) for k, r in reports.items() if k[0] == g}
        best[g] = min(cells, key=cells.get) if cells else None
    header = ["L"] + [f"{g} Model {m}" for g in groups for m in models]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for L in lags:
        row = [str(L)]
        for g in groups:
            for m in models:
                r = reports.get((g, L, m))
                if r is None:
                    row.append("")
                else:
                    row.append(f"{val(r):.1f}" + ("*" if best[g] == (g, L, m) else ""))
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def best_lag(reports, group, model=1):
    """Lag with the lowest WAIC for a group and model."""
    cands = {k[1]: (r.waic if isinstance(r, WaicReport) else float(r))
             for k, r in reports.items() if k[0] == group and k[2] == model}
    if not cands:
        raise ValidationError(f"no WAIC values for group {group!r}, model {model}")
    return min(cands, key=cands.get)
