"""Container for posterior draws and its CSV + JSON sidecar format.

CSV layout: one row per draw, chain-major; columns are the flattened
coefficient matrix (``B_<lag>_<from>_<to>``, 1-based), the lower triangle of
the covariance (``Sigma_<i>_<j>``, row-major over ``i >= j``) and ``nu`` when
present.  Values are written with ``repr`` so files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError

FORMAT_VERSION = 1


@dataclass(eq=False)
class PosteriorDraws:
    """Ordered draws of (B, Sigma[, nu]), shaped ``(chains, draws, ...)``."""

    model: int
    B: np.ndarray
    Sigma: np.ndarray
    nu: np.ndarray | None = None
    L: int = 1
    region_labels: tuple[str, ...] | None = None
    seeds: list = field(default_factory=list)
    warmup: int = 0
    diagnostics: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.B.ndim != 4 or self.Sigma.ndim != 4:
            raise DimensionError("B and Sigma must be (chains, draws, ., .)")
        if self.B.shape[:2] != self.Sigma.shape[:2]:
            raise DimensionError("B and Sigma disagree on chain/draw counts")
        if self.nu is not None:
            self.nu = np.asarray(self.nu, dtype=float)
            if self.nu.shape != self.B.shape[:2]:
                raise DimensionError("nu must be (chains, draws)")
        if self.region_labels is None:
            self.region_labels = tuple(f"R{j + 1}" for j in range(self.R))
        self.region_labels = tuple(self.region_labels)

    @property
    def n_chains(self):
        return self.B.shape[0]

    @property
    def n_draws(self):
        return self.B.shape[1]

    @property
    def q(self):
        return self.B.shape[2]

    @property
    def R(self):
        return self.B.shape[3]

    def flat(self, name):
        """Draws of ``name`` ('B', 'Sigma', 'nu') with chains concatenated."""
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])

    def correlations(self):
        """Per-draw correlation matrices, shape ``(chains, draws, R, R)``."""
        sd = np.sqrt(np.diagonal(self.Sigma, axis1=-2, axis2=-1))
        C = self.Sigma / (sd[..., :, None] * sd[..., None, :])
        idx = np.arange(self.R)
        C[..., idx, idx] = 1.0
        return C

    def column_names(self):
        return column_names(self.q, self.R, self.L, self.nu is not None)

    def scalar_parameters(self):
        """Mapping from column name to a ``(chains, draws)`` array."""
        table = self.as_table().reshape(self.n_chains, self.n_draws, -1)
        return {name: table[:, :, k] for k, name in enumerate(self.column_names())}

    def as_table(self):
        """Row-per-draw matrix matching ``column_names``."""
        C, N = self.n_chains, self.n_draws
        il = np.tril_indices(self.R)
        parts = [self.B.reshape(C * N, -1), self.Sigma[..., il[0], il[1]].reshape(C * N, -1)]
        if self.nu is not None:
            parts.append(self.nu.reshape(C * N, 1))
        return np.hstack(parts)

    def truncate(self, n):
        """Keep the first ``n`` draws of every chain."""
        return PosteriorDraws(self.model, self.B[:, :n], self.Sigma[:, :n],
                              None if self.nu is None else self.nu[:, :n], self.L,
                              self.region_labels, list(self.seeds), self.warmup,
                              dict(self.diagnostics), dict(self.flags))

    def sidecar(self):
        return {
            "format_version": FORMAT_VERSION,
            "model": self.model,
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "q": self.q,
            "R": self.R,
            "L": self.L,
            "has_nu": self.nu is not None,
            "region_labels": list(self.region_labels),
            "seeds": self.seeds,
            "warmup": self.warmup,
            "diagnostics": self.diagnostics,
            "flags": self.flags,
            "columns": self.column_names(),
        }

    def save(self, csv_path, json_path=None):
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        table = self.as_table()
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.column_names())
            for row in table:
                w.writerow([repr(float(x)) for x in row])
        json_path.write_text(json.dumps(_jsonable(self.sidecar()), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path, json_path=None):
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        meta = json.loads(json_path.read_text())
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header != meta["columns"]:
            raise ValidationError(f"{csv_path}: header does not match sidecar")
        table = np.array([[float(x) for x in r] for r in body], dtype=float)
        C, N, q, R = meta["n_chains"], meta["n_draws"], meta["q"], meta["R"]
        if table.shape != (C * N, len(header)):
            raise DimensionError(f"{csv_path}: expected {C * N} rows of {len(header)} values")
        nB, nS = q * R, R * (R + 1) // 2
        B = table[:, :nB].reshape(C, N, q, R)
        il = np.tril_indices(R)
        Sigma = np.zeros((C * N, R, R))
        Sigma[:, il[0], il[1]] = table[:, nB:nB + nS]
        Sigma[:, il[1], il[0]] = table[:, nB:nB + nS]
        nu = table[:, nB + nS].reshape(C, N) if meta["has_nu"] else None
        return cls(meta["model"], B, Sigma.reshape(C, N, R, R), nu, meta["L"],
                   tuple(meta["region_labels"]), meta["seeds"], meta["warmup"],
                   meta["diagnostics"], meta["flags"])


def column_names(q, R, L, has_nu):
    names = []
    for row in range(q):
        lag, frm = divmod(row, R)
        for to in range(R):
            names.append(f"B_{lag + 1}_{frm + 1}_{to + 1}")
    names += [f"Sigma_{i + 1}_{j + 1}" for i in range(R) for j in range(i + 1)]
    if has_nu:
        names.append("nu")
    return names


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj
