"""Panel time series, lagged regression designs and the shrinkage prior.

A subject's series is stored as a ``T x R`` array.  For lag order ``L`` the
regression form is ``Y_s = X_s B_s + E`` with ``Y_s`` the last ``n = T - L``
rows and row ``t`` of ``X_s`` equal to ``(y_{t-1}, ..., y_{t-L})``, so ``B_s``
is ``q x R`` with ``q = L R``.  Row ``(l - 1) R + j`` of ``B_s`` holds the
effect of region ``j`` at lag ``l`` on every region (one column per receiving
region).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegeneratePriorError, DimensionError, ValidationError


@dataclass(frozen=True, eq=False)
class SubjectPanel:
    subject_id: str
    values: np.ndarray
    region_labels: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DimensionError(f"subject {self.subject_id}: values must be T x R")
        T, R = values.shape
        if T < 2 or R < 1:
            raise DimensionError(f"subject {self.subject_id}: need T >= 2 and R >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"subject {self.subject_id}: non-finite values")
        labels = tuple(str(x) for x in self.region_labels)
        if len(labels) != R:
            raise DimensionError(f"subject {self.subject_id}: {len(labels)} labels for {R} regions")
        if len(set(labels)) != R:
            raise ValidationError(f"subject {self.subject_id}: region labels are not unique")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "region_labels", labels)

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def R(self):
        return self.values.shape[1]

    def centered(self):
        return replace(self, values=self.values - self.values.mean(axis=0))

    def drop_initial(self, k):
        return replace(self, values=self.values[k:])


@dataclass(frozen=True, eq=False)
class GroupDataset:
    group_id: str
    subjects: tuple[SubjectPanel, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise ValidationError(f"group {self.group_id}: no subjects")
        first = subjects[0]
        for p in subjects[1:]:
            if p.values.shape != first.values.shape:
                raise DimensionError(
                    f"group {self.group_id}: subject {p.subject_id} has shape "
                    f"{p.values.shape}, expected {first.values.shape}")
            if p.region_labels != first.region_labels:
                raise ValidationError(
                    f"group {self.group_id}: subject {p.subject_id} has different region labels")
        object.__setattr__(self, "subjects", subjects)

    @property
    def S(self):
        return len(self.subjects)

    @property
    def T(self):
        return self.subjects[0].T

    @property
    def R(self):
        return self.subjects[0].R

    @property
    def region_labels(self):
        return self.subjects[0].region_labels

    @property
    def subject_ids(self):
        return [p.subject_id for p in self.subjects]

    def centered(self):
        return replace(self, subjects=tuple(p.centered() for p in self.subjects))

    def drop_initial(self, k):
        """Discard the first ``k`` time points of every subject."""
        if k == 0:
            return self
        return replace(self, subjects=tuple(p.drop_initial(k) for p in self.subjects))

    def subset(self, order):
        """Dataset with subjects reordered/selected by index."""
        return replace(self, subjects=tuple(self.subjects[i] for i in order))

    @classmethod
    def from_arrays(cls, arrays, group_id="group", region_labels=None, subject_ids=None):
        arrays = [np.asarray(a, dtype=float) for a in arrays]
        R = arrays[0].shape[1] if arrays[0].ndim == 2 else 1
        if region_labels is None:
            region_labels = [f"R{j + 1}" for j in range(R)]
        if subject_ids is None:
            subject_ids = [f"s{i + 1:03d}" for i in range(len(arrays))]
        return cls(group_id, tuple(SubjectPanel(sid, a, tuple(region_labels))
                                   for sid, a in zip(subject_ids, arrays)))


@dataclass(frozen=True, eq=False)
class LagDesign:
    Y: np.ndarray
    X: np.ndarray
    L: int

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def q(self):
        return self.X.shape[1]

    @property
    def R(self):
        return self.Y.shape[1]


def build_lag_design(panel, L):
    """Response and lagged-regressor matrices for one subject.

    Parameters
    ----------
    panel : SubjectPanel or array_like, shape (T, R)
    L : int
        Lag order, ``1 <= L < T``.

    Returns
    -------
    LagDesign
        ``Y`` is ``(T - L, R)`` and ``X`` is ``(T - L, L R)``; column block
        ``l - 1`` of ``X`` holds the lag-``l`` values.
    """
    values = panel.values if isinstance(panel, SubjectPanel) else np.asarray(panel, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if not np.all(np.isfinite(values)):
        raise ValidationError("non-finite values in series")
    L = int(L)
    T, R = values.shape
    if L < 1:
        raise DimensionError(f"lag order must be positive, got {L}")
    if L >= T:
        raise DimensionError(f"lag order L={L} must be smaller than T={T}")
    n = T - L
    Y = values[L:].copy()
    X = np.hstack([values[L - l:T - l] for l in range(1, L + 1)])
    if n < L * R:
        warnings.warn(f"n={n} < q={L * R}: OLS statistics are not identified; "
                      "relying on the prior", RuntimeWarning, stacklevel=2)
    return LagDesign(Y, X, L)


def group_designs(dataset, L):
    return [build_lag_design(p, L) for p in dataset.subjects]


def sample_variance_summaries(dataset):
    """Per-region max and mean (over subjects) of sample variances (ddof 1)."""
    v = np.array([p.values.var(axis=0, ddof=1) for p in dataset.subjects])
    return v.max(axis=0), v.mean(axis=0)


@dataclass(frozen=True, eq=False)
class ShrinkagePrior:
    """Hyperparameters of the hierarchy.

    ``P0 = (lam D)^-1`` is the prior precision of the group coefficients and
    ``P_s = (kappa_s D)^-1`` the precision of subject ``s`` around them.
    ``d`` holds the diagonal of ``D``.
    """

    B0: np.ndarray
    lam: float
    kappa: np.ndarray
    d: np.ndarray
    Psi0: np.ndarray
    nu0: float

    def __post_init__(self):
        B0 = np.array(self.B0, dtype=float)
        d = np.array(self.d, dtype=float).ravel()
        kappa = np.array(self.kappa, dtype=float).ravel()
        Psi0 = np.array(self.Psi0, dtype=float)
        R = Psi0.shape[0]
        if Psi0.shape != (R, R):
            raise DimensionError("Psi0 must be square")
        if B0.shape != (d.size, R):
            raise DimensionError(f"B0 has shape {B0.shape}, expected {(d.size, R)}")
        if not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise DegeneratePriorError("D must have strictly positive finite diagonal")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValidationError(f"lambda must be positive, got {self.lam}")
        if not (np.all(np.isfinite(kappa)) and np.all(kappa > 0)):
            raise ValidationError("kappa must be positive")
        if not np.allclose(Psi0, Psi0.T, rtol=1e-12, atol=0):
            raise ValidationError("Psi0 must be symmetric")
        if np.linalg.eigvalsh(Psi0)[0] <= 0:
            raise DegeneratePriorError("Psi0 must be positive definite")
        if not self.nu0 > R + 1:
            raise ValidationError(f"nu0 must exceed R + 1 = {R + 1}, got {self.nu0}")
        for name, a in (("B0", B0), ("d", d), ("kappa", kappa), ("Psi0", Psi0)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "nu0", float(self.nu0))

    @property
    def q(self):
        return self.d.size

    @property
    def R(self):
        return self.Psi0.shape[0]

    @property
    def S(self):
        return self.kappa.size

    @property
    def P0(self):
        return np.diag(1.0 / (self.lam * self.d))

    @property
    def P0_inv(self):
        return np.diag(self.lam * self.d)

    def P_s(self, s):
        return np.diag(1.0 / (self.kappa[s] * self.d))

    def P_s_inv(self, s):
        return np.diag(self.kappa[s] * self.d)

    def with_hyper(self, lam, kappa):
        return replace(self, lam=lam, kappa=np.broadcast_to(np.asarray(kappa, float), (self.S,)).copy())

    def check_dims(self, q, R, S=None):
        if self.q != q or self.R != R:
            raise DimensionError(f"prior is for q={self.q}, R={self.R}; data has q={q}, R={R}")
        if S is not None and self.S != S:
            raise DimensionError(f"prior has {self.S} subject precisions, data has {S} subjects")

    def to_dict(self):
        return {"B0": self.B0.tolist(), "lam": self.lam, "kappa": self.kappa.tolist(),
                "d": self.d.tolist(), "Psi0": self.Psi0.tolist(), "nu0": self.nu0}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["B0"]), d["lam"], np.array(d["kappa"]), np.array(d["d"]),
                   np.array(d["Psi0"]), d["nu0"])


def lag_scaling(mean_var, L):
    """Diagonal of D: entry for (lag l, region r) is 1 / (l^2 mean_var[r])."""
    mean_var = np.asarray(mean_var, dtype=float)
    lags = np.repeat(np.arange(1, L + 1), mean_var.size)
    return 1.0 / (lags ** 2 * np.tile(mean_var, L))


def build_default_prior(dataset, L, lam, kappa, B0=None):
    """Data-scaled shrinkage prior.

    ``Psi0`` is diagonal with the largest per-subject sample variance of each
    region, ``nu0 = R + 2``, and the lag scaling ``D`` uses the mean sample
    variance across subjects.  ``kappa`` may be a scalar (shared by all
    subjects) or one value per subject.
    """
    max_var, mean_var = sample_variance_summaries(dataset)
    bad = np.flatnonzero(~(max_var > 0) | ~(mean_var > 0))
    if bad.size:
        names = [dataset.region_labels[j] for j in bad]
        raise DegeneratePriorError(f"zero sample variance in region(s) {names}")
    R, S = dataset.R, dataset.S
    q = L * R
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (S,)).copy()
    if B0 is None:
        B0 = np.zeros((q, R))
    return ShrinkagePrior(B0=B0, lam=lam, kappa=kappa, d=lag_scaling(mean_var, L),
                          Psi0=np.diag(max_var), nu0=R + 2)


# -- file formats -------------------------------------------------------------

def read_subject_csv(path):
    """Read a subject file: header row of region labels, one row per time point."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    labels = [c.strip() for c in rows[0]]
    try:
        values = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if values.ndim != 2 or values.shape[1] != len(labels):
        raise DimensionError(f"{path}: ragged rows or label count mismatch")
    return SubjectPanel(path.stem, values, tuple(labels))


def write_subject_csv(panel, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(panel.region_labels)
        for row in panel.values:
            w.writerow([repr(float(x)) for x in row])


def load_group(manifest_path):
    """Load a group from its JSON manifest; subject paths are manifest-relative."""
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{manifest_path}: {exc}") from None
    if not isinstance(spec, dict) or "group_id" not in spec or "subjects" not in spec:
        raise ValidationError(f"{manifest_path}: manifest needs 'group_id' and 'subjects'")
    base = manifest_path.parent
    panels = []
    for p in spec["subjects"]:
        p = Path(p)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ValidationError(f"{manifest_path}: subject file {p} not found")
        panels.append(read_subject_csv(p))
    meta = {k: v for k, v in spec.items() if k not in ("group_id", "subjects")}
    return GroupDataset(str(spec["group_id"]), tuple(panels), meta)


def save_group(dataset, directory, tr_seconds=None):
    """Write one CSV per subject plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for p in dataset.subjects:
        name = f"{p.subject_id}.csv"
        write_subject_csv(p, directory / name)
        names.append(name)
    spec = {"group_id": dataset.group_id, "subjects": names}
    if tr_seconds is not None:
        spec["tr_seconds"] = tr_seconds
    path = directory / "manifest.json"
    path.write_text(json.dumps(spec, indent=2) + "\n")
    return path
