"""Thresholded effective and functional connectivity edge lists.

Effective connectivity (EC) edges are lagged coefficients ``B[(l-1)R + j, k]``
(region ``j`` at lag ``l`` driving region ``k``).  Functional connectivity
(FC) edges are contemporaneous correlations derived from ``Sigma``.
Credible intervals are equal-tailed empirical quantiles of the draws.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, UnsupportedModelError, ValidationError

ALL_DRAWS = "all_draws_same_sign"
CI = "ci_excludes_zero"


@dataclass(frozen=True)
class ThresholdRule:
    kind: str = CI
    ci_level: float = 0.95
    magnitude_floor: float = 0.0

    def __post_init__(self):
        if self.kind not in (ALL_DRAWS, CI):
            raise ValidationError(f"unknown rule kind {self.kind!r}")
        if not 0 < self.ci_level < 1:
            raise ValidationError("ci_level must lie in (0, 1)")
        if not self.magnitude_floor >= 0:
            raise ValidationError("magnitude_floor must be non-negative")

    def keep(self, x, mean, lo, hi):
        if abs(mean) < self.magnitude_floor:
            return False
        if self.kind == ALL_DRAWS:
            return bool(np.all(x > 0) or np.all(x < 0))
        return bool(lo > 0 or hi < 0)

    def to_dict(self):
        return asdict(self)


DEFAULT_EC_RULES = {1: ThresholdRule(ALL_DRAWS), 2: ThresholdRule(CI, 0.95)}
DEFAULT_FC_RULE = ThresholdRule(ALL_DRAWS, magnitude_floor=0.35)
DEFAULT_EC_DIFF_RULE = ThresholdRule(CI, 0.95)
DEFAULT_FC_DIFF_RULE = ThresholdRule(CI, 0.95, magnitude_floor=0.05)


def ec_rule_for_lag(rules, lag):
    rules = DEFAULT_EC_RULES if rules is None else rules
    if isinstance(rules, ThresholdRule):
        return rules
    return rules.get(lag, rules.get("default", ThresholdRule(CI, 0.95)))


@dataclass(frozen=True)
class EcEdge:
    from_region: int
    to_region: int
    lag: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    sign: str


@dataclass(frozen=True)
class FcEdge:
    region_a: int
    region_b: int
    mean: float
    sd: float
    ci_low: float
    ci_high: float

    @property
    def sign(self):
        return "positive" if self.mean > 0 else "negative"


def _summary(x, level):
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(x, [a, 1.0 - a], axis=0)
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1:])
    return x.mean(axis=0), sd, lo, hi


def _ec_edges(B, R, rules):
    """Edges from coefficient draws shaped ``(N, q, R)``."""
    q = B.shape[1]
    edges = []
    for row in range(q):
        lag, frm = divmod(row, R)
        rule = ec_rule_for_lag(rules, lag + 1)
        x = B[:, row, :]
        mean, sd, lo, hi = _summary(x, rule.ci_level)
        for to in range(R):
            if rule.keep(x[:, to], mean[to], lo[to], hi[to]):
                edges.append(EcEdge(frm, to, lag + 1, float(mean[to]), float(sd[to]),
                                    float(lo[to]), float(hi[to]),
                                    "positive" if mean[to] > 0 else "negative"))
    return edges


def _fc_edges(C, rule):
    R = C.shape[1]
    iu = np.triu_indices(R, 1)
    x = C[:, iu[0], iu[1]]
    mean, sd, lo, hi = _summary(x, rule.ci_level)
    edges = []
    for k, (a, b) in enumerate(zip(*iu)):
        if rule.keep(x[:, k], mean[k], lo[k], hi[k]):
            edges.append(FcEdge(int(a), int(b), float(mean[k]), float(sd[k]),
                                float(lo[k]), float(hi[k])))
    return edges


def ec_extract(draws, rules=None):
    """Retained lagged coefficients.  ``rules`` maps lag -> ThresholdRule."""
    return _ec_edges(draws.flat("B"), draws.R, rules)


def _require_full_cov(draws):
    if draws.model == 3:
        raise UnsupportedModelError("Model 3 has a diagonal covariance matrix; no FC to extract")


def correlation_draws(draws):
    return draws.correlations().reshape((-1, draws.R, draws.R))


def fc_extract(draws, rule=None):
    """Retained contemporaneous correlations (default: |mean| >= 0.35, one sign)."""
    _require_full_cov(draws)
    return _fc_edges(correlation_draws(draws), rule or DEFAULT_FC_RULE)


def _paired(draws_a, draws_b):
    if (draws_a.q, draws_a.R) != (draws_b.q, draws_b.R):
        raise DimensionError(f"draw sets differ in shape: q,R = {(draws_a.q, draws_a.R)} "
                             f"vs {(draws_b.q, draws_b.R)}")
    n = min(draws_a.n_chains * draws_a.n_draws, draws_b.n_chains * draws_b.n_draws)
    return n


def group_diff(draws_a, draws_b, kind="ec", rule=None):
    """Edges of the difference ``a - b`` from index-paired draws.

    Draw counts are equalized by truncating the chain-concatenated draws to
    the shorter set.  ``kind`` is 'ec' or 'fc'.
    """
    n = _paired(draws_a, draws_b)
    if kind == "ec":
        D = draws_a.flat("B")[:n] - draws_b.flat("B")[:n]
        return _ec_edges(D, draws_a.R, rule or DEFAULT_EC_DIFF_RULE)
    if kind == "fc":
        _require_full_cov(draws_a)
        _require_full_cov(draws_b)
        D = correlation_draws(draws_a)[:n] - correlation_draws(draws_b)[:n]
        return _fc_edges(D, rule or DEFAULT_FC_DIFF_RULE)
    raise ValidationError(f"kind must be 'ec' or 'fc', got {kind!r}")


def summarize_scatter(draws_a, draws_b):
    """Posterior means, SDs and mean/SD ratios of matching parameters.

    Rows cover every coefficient and, when both sets have full covariances,
    every off-diagonal correlation.
    """
    _paired(draws_a, draws_b)
    names, xa, xb = [], [], []
    R = draws_a.R
    Ba, Bb = draws_a.flat("B"), draws_b.flat("B")
    for row in range(draws_a.q):
        lag, frm = divmod(row, R)
        for to in range(R):
            names.append(f"B_{lag + 1}_{frm + 1}_{to + 1}")
            xa.append(Ba[:, row, to])
            xb.append(Bb[:, row, to])
    if draws_a.model != 3 and draws_b.model != 3:
        Ca, Cb = correlation_draws(draws_a), correlation_draws(draws_b)
        for i in range(R):
            for j in range(i + 1, R):
                names.append(f"corr_{i + 1}_{j + 1}")
                xa.append(Ca[:, i, j])
                xb.append(Cb[:, i, j])
    rows = []
    for name, a, b in zip(names, xa, xb):
        ma, mb = float(a.mean()), float(b.mean())
        sa, sb = float(a.std(ddof=1)), float(b.std(ddof=1))
        rows.append({"parameter": name, "mean_a": ma, "mean_b": mb, "sd_a": sa, "sd_b": sb,
                     "tratio_a": ma / sa if sa > 0 else float("nan"),
                     "tratio_b": mb / sb if sb > 0 else float("nan")})
    return rows


def region_weights(edges, R):
    """Sum of absolute retained edge means touching each region.

    Returns an ``(R, 3)`` array of (outgoing, incoming, total).  Undirected
    FC edges count in all three columns of both endpoints.
    """
    w = np.zeros((R, 3))
    for e in edges:
        m = abs(e.mean)
        if isinstance(e, EcEdge):
            w[e.from_region, 0] += m
            w[e.to_region, 1] += m
            w[e.from_region, 2] += m
            w[e.to_region, 2] += m
        else:
            w[e.region_a] += m
            w[e.region_b] += m
    return w


EDGE_COLUMNS = ["from", "to", "lag", "mean", "sd", "ci_low", "ci_high", "sign"]


def write_edges_csv(edges, labels, path):
    """``from,to,lag,...`` rows; FC edges are written with lag 0."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_COLUMNS)
        for e in edges:
            if isinstance(e, EcEdge):
                a, b, lag = e.from_region, e.to_region, e.lag
            else:
                a, b, lag = e.region_a, e.region_b, 0
            w.writerow([labels[a], labels[b], lag, repr(e.mean), repr(e.sd), repr(e.ci_low),
                        repr(e.ci_high), e.sign])


def write_region_weights_csv(weights, labels, path):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "outgoing", "incoming", "total"])
        for lab, row in zip(labels, weights):
            w.writerow([lab] + [repr(float(v)) for v in row])


def write_scatter_csv(rows, path):
    cols = ["parameter", "mean_a", "mean_b", "sd_a", "sd_b", "tratio_a", "tratio_b"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["parameter"]] + [repr(r[c]) for c in cols[1:]])
