"""Command line interface.

Usage: ``hbvar <command> [--config cfg.json] [options]``.

Settings are resolved as built-in defaults, then the JSON config file, then
command-line flags (flags win).  Relative paths inside a config file are
resolved against the file's directory.  Runs write to
``<runs_dir>/<UTC timestamp>-<config hash>/{draws/, reports/, manifest.json}``
unless ``--run-dir`` names a directory explicitly.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 convergence
warning (R-hat above 1.05 or too many divergent transitions).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .conjugate import all_subject_stats, combine, sample_model2, sample_model3
from .connectivity import (ALL_DRAWS, CI, DEFAULT_EC_DIFF_RULE, DEFAULT_EC_RULES,
                           DEFAULT_FC_DIFF_RULE, DEFAULT_FC_RULE, ThresholdRule,
                           ec_extract, fc_extract, group_diff, region_weights,
                           summarize_scatter, write_edges_csv,
                           write_scatter_csv)
from .data import ShrinkagePrior, build_default_prior, group_designs, load_group, save_group
from .diagnostics import rhat
from .draws import PosteriorDraws, _jsonable
from .empirical_bayes import TuneConfig, TuneResult, tune
from .errors import HbvarError, NumericalError, SpecInfeasibleError, ValidationError
from .hier_sampler import nuts_fit
from .model_eval import best_lag, pointwise_loglik, waic, waic_table
from .simulate import GeneratorSpec, generate

log = logging.getLogger("hbvar")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CONVERGENCE = 4
RHAT_LIMIT = 1.05

DEFAULTS = {
    "manifest": None, "model": 2, "L": 1, "chains": 3, "warmup": 200, "draws": 500,
    "seed": None, "hyper": None, "lam": None, "kappa": None, "dof": "exact",
    "model3_mode": "exact", "nu_prior": None, "fixed_nu": None, "center": True,
    "common_sample": True,
    "two_stage": False, "lags": [1, 2, 3], "models": [1, 2, 3], "jobs": 1,
    "runs_dir": "runs", "run_dir": None, "draws_files": None, "draws_a": None, "draws_b": None,
    "ec_rules": None, "fc_rule": None, "ec_diff_rule": None, "fc_diff_rule": None,
    # simulate
    "out": None, "R": 3, "S": 5, "T": 100, "nu": None, "b_diag": 0.3, "sigma_corr": 0.3,
    "subject_scale": 0.01, "group_id": "synthetic", "burn_in": 200,
}
PATH_KEYS = {"manifest", "hyper", "runs_dir", "run_dir", "draws_files", "draws_a", "draws_b", "out"}


class StageError(HbvarError):
    """Failure inside a pipeline stage; ``cause`` keeps the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


# -- configuration ------------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path}: expected a JSON object")
    unknown = sorted(set(cfg) - set(DEFAULTS) - {"groups"})
    if unknown:
        raise ValidationError(f"config {path}: unknown keys {unknown}")
    base = path.parent

    def fix(v):
        if v is None:
            return v
        if isinstance(v, list):
            return [fix(x) for x in v]
        p = Path(v)
        return str(p if p.is_absolute() else base / p)

    for k in PATH_KEYS & set(cfg):
        cfg[k] = fix(cfg[k])
    if "groups" in cfg:
        cfg["groups"] = {g: fix(p) for g, p in cfg["groups"].items()}
    return cfg


def resolve_config(args):
    cfg = dict(DEFAULTS)
    cfg["groups"] = None
    cfg.update(_load_config(getattr(args, "config", None)))
    for k, v in vars(args).items():
        if k in ("config", "command", "func", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError(f"missing required setting(s): {', '.join(missing)}")


def parse_rule(text):
    """``kind[:ci_level[:floor]]`` -> ThresholdRule; kind may be 'all' or 'ci'."""
    if isinstance(text, dict):
        return ThresholdRule(**text)
    parts = str(text).split(":")
    kind = {"all": ALL_DRAWS, "ci": CI}.get(parts[0], parts[0])
    level = float(parts[1]) if len(parts) > 1 and parts[1] else 0.95
    floor = float(parts[2]) if len(parts) > 2 and parts[2] else 0.0
    return ThresholdRule(kind, level, floor)


def ec_rules_from(cfg_value):
    """Per-lag EC rules from ``{"1": rule, ...}`` or a list of ``lag=rule`` strings."""
    if cfg_value is None:
        return dict(DEFAULT_EC_RULES)
    rules = dict(DEFAULT_EC_RULES)
    items = cfg_value.items() if isinstance(cfg_value, dict) else (
        s.split("=", 1) for s in cfg_value)
    for lag, spec in items:
        key = "default" if lag == "default" else int(lag)
        rules[key] = parse_rule(spec)
    return rules


def _rules_json(rules):
    return {str(k): v.to_dict() for k, v in rules.items()}


# -- hashing and run directories ---------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()[:12]


def versions():
    return {"hbvar": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def make_run_dir(cfg, command):
    if cfg.get("run_dir"):
        run = Path(cfg["run_dir"])
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        run = Path(cfg["runs_dir"]) / f"{stamp}-{config_hash({'command': command, **cfg})}"
    (run / "draws").mkdir(parents=True, exist_ok=True)
    (run / "reports").mkdir(parents=True, exist_ok=True)
    return run


def dataset_inputs(manifest):
    """Hashes of a group manifest and every subject file it lists."""
    manifest = Path(manifest)
    spec = json.loads(manifest.read_text())
    out = {str(manifest): sha256_file(manifest)}
    for p in spec.get("subjects", []):
        p = Path(p) if Path(p).is_absolute() else manifest.parent / p
        out[str(p)] = sha256_file(p)
    return out


def write_manifest(run, command, cfg, inputs, outputs, extra=None):
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "config_hash": config_hash({"command": command, **cfg}),
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "versions": versions(),
        "inputs": inputs,
        "outputs": {str(Path(p).relative_to(run)): sha256_file(p) for p in sorted(map(str, outputs))},
    }
    doc.update(extra or {})
    (run / "manifest.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


# -- shared steps -------------------------------------------------------------------

def load_dataset(path, center=True, drop=0):
    """Load a group, optionally demean each subject, then drop initial time points."""
    ds = load_group(path)
    return (ds.centered() if center else ds).drop_initial(drop)


def resolve_prior(cfg, dataset, L):
    if cfg.get("hyper"):
        tr = TuneResult.load(cfg["hyper"])
        if len(tr.kappa) != dataset.S:
            raise ValidationError(f"{cfg['hyper']}: {len(tr.kappa)} kappa values for "
                                  f"{dataset.S} subjects")
        if tr.L != L:
            log.warning("hyperparameters were tuned at L=%d but the fit uses L=%d", tr.L, L)
        return build_default_prior(dataset, L, tr.lam, tr.kappa)
    if cfg.get("lam") is not None and cfg.get("kappa") is not None:
        return build_default_prior(dataset, L, float(cfg["lam"]), cfg["kappa"])
    raise ValidationError("hyperparameters required: give --hyper or both --lam and --kappa")


def fit_model(dataset, prior, L, model, cfg, seed):
    """Draws for one (model, L) fit, with the prior stored in the sidecar flags."""
    if model == 1:
        nu_prior = cfg.get("nu_prior")
        draws = nuts_fit(dataset, prior, L, chains=int(cfg["chains"]), warmup=int(cfg["warmup"]),
                         draws=int(cfg["draws"]), seed=seed, fixed_nu=cfg.get("fixed_nu"),
                         nu_prior=tuple(nu_prior) if nu_prior else None)
    elif model in (2, 3):
        post = combine(all_subject_stats(group_designs(dataset, L), prior), prior, cfg["dof"])
        n = int(cfg["chains"]) * int(cfg["draws"])
        if model == 2:
            draws = sample_model2(post, n, seed, L, dataset.region_labels)
        else:
            draws = sample_model3(post, n, seed, cfg["model3_mode"], L, dataset.region_labels)
    else:
        raise ValidationError(f"model must be 1, 2 or 3, got {model}")
    draws.flags["prior"] = prior.to_dict()
    draws.flags["group_id"] = dataset.group_id
    return draws


def rhat_report(draws, path):
    """Write the R-hat table; returns the largest value (NaN-aware)."""
    if draws.model != 1:
        return None
    values = rhat(draws)
    with open(path, "w") as fh:
        fh.write("parameter,rhat\n")
        for k, v in values.items():
            fh.write(f"{k},{v!r}\n")
    finite = [v for v in values.values() if np.isfinite(v)]
    return max(finite) if finite else float("nan")


def convergence_ok(draws, max_rhat):
    if draws.model != 1:
        return True
    return (max_rhat is not None and max_rhat <= RHAT_LIMIT
            and not draws.flags.get("unreliable", False))


def _fit_seed(seed, *keys):
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _draws_name(group, model, L):
    return f"{group}_model{model}_L{L}"


# -- commands -----------------------------------------------------------------------

def cmd_validate(cfg):
    _require(cfg, "manifest")
    manifests = cfg["manifest"] if isinstance(cfg["manifest"], list) else [cfg["manifest"]]
    report = []
    for m in manifests:
        ds = load_dataset(m, cfg["center"])
        L = int(cfg["L"])
        designs = group_designs(ds, L)
        build_default_prior(ds, L, 1.0, 1.0)
        report.append({"manifest": str(m), "group_id": ds.group_id, "S": ds.S, "T": ds.T,
                       "R": ds.R, "L": L, "n": designs[0].n, "q": designs[0].q,
                       "region_labels": list(ds.region_labels),
                       "subject_ids": list(ds.subject_ids)})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_simulate(cfg):
    _require(cfg, "out", "seed")
    R, S, T, L = int(cfg["R"]), int(cfg["S"]), int(cfg["T"]), int(cfg["L"])
    B = np.zeros((L * R, R))
    B[:R] = cfg["b_diag"] * np.eye(R)
    Sigma = (1.0 - cfg["sigma_corr"]) * np.eye(R) + cfg["sigma_corr"]
    spec = GeneratorSpec(R, S, T, L, B, Sigma, cfg["nu"], cfg["subject_scale"] * np.eye(L * R),
                         seed=int(cfg["seed"]), burn_in=int(cfg["burn_in"]),
                         group_id=cfg["group_id"])
    ds, truth = generate(spec)
    out = Path(cfg["out"])
    manifest = save_group(ds, out)
    truth.save(out / "ground_truth.json")
    print(str(manifest))
    return EXIT_OK


def cmd_tune(cfg):
    _require(cfg, "manifest")
    run = make_run_dir(cfg, "tune")
    ds = load_dataset(cfg["manifest"], cfg["center"])
    L = int(cfg["L"])
    res = tune(ds, L, TuneConfig(two_stage=bool(cfg["two_stage"])))
    path = run / "reports" / f"tune_{ds.group_id}_L{L}.json"
    res.save(path)
    write_manifest(run, "tune", cfg, dataset_inputs(cfg["manifest"]), [path])
    print(str(path))
    return EXIT_OK


def cmd_fit(cfg):
    _require(cfg, "manifest", "seed")
    run = make_run_dir(cfg, "fit")
    ds = load_dataset(cfg["manifest"], cfg["center"])
    L, model = int(cfg["L"]), int(cfg["model"])
    prior = resolve_prior(cfg, ds, L)
    draws = fit_model(ds, prior, L, model, cfg, int(cfg["seed"]))
    name = _draws_name(ds.group_id, model, L)
    csv_path, json_path = draws.save(run / "draws" / f"{name}.csv")
    outputs = [csv_path, json_path]
    max_rhat = None
    if model == 1:
        rpath = run / "reports" / f"rhat_{name}.csv"
        max_rhat = rhat_report(draws, rpath)
        outputs.append(rpath)
    inputs = dataset_inputs(cfg["manifest"])
    if cfg.get("hyper"):
        inputs[str(cfg["hyper"])] = sha256_file(cfg["hyper"])
    ok = convergence_ok(draws, max_rhat)
    write_manifest(run, "fit", cfg, inputs, outputs,
                   {"max_rhat": max_rhat, "converged": ok, "seeds": draws.seeds})
    print(str(csv_path))
    if not ok:
        log.warning("convergence check failed (max R-hat %s, flags %s)", max_rhat, draws.flags)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _waic_for(draws, dataset):
    prior = ShrinkagePrior.from_dict(draws.flags["prior"])
    stats = all_subject_stats(group_designs(dataset, draws.L), prior)
    return waic(pointwise_loglik(draws, stats, prior))


def cmd_waic(cfg):
    _require(cfg, "manifest", "draws_files")
    run = make_run_dir(cfg, "waic")
    manifests = cfg["manifest"] if isinstance(cfg["manifest"], list) else [cfg["manifest"]]
    datasets = {}
    inputs = {}
    for m in manifests:
        ds = load_dataset(m, cfg["center"])
        datasets[ds.group_id] = ds
        inputs.update(dataset_inputs(m))
    reports, rows = {}, []
    for f in cfg["draws_files"]:
        d = PosteriorDraws.load(f)
        inputs[str(f)] = sha256_file(f)
        g = d.flags.get("group_id")
        if g not in datasets:
            raise ValidationError(f"{f}: no dataset for group {g!r}")
        rep = _waic_for(d, datasets[g])
        reports[(g, d.L, d.model)] = rep
        rows.append({"group": g, "L": d.L, "model": d.model, **rep.to_dict()})
    jpath = run / "reports" / "waic.json"
    jpath.write_text(json.dumps(_jsonable(rows), indent=2, sort_keys=True) + "\n")
    mpath = run / "reports" / "waic_table.md"
    mpath.write_text(waic_table(reports))
    write_manifest(run, "waic", cfg, inputs, [jpath, mpath])
    print(mpath.read_text(), end="")
    return EXIT_OK


def connectivity_outputs(draws, cfg, outdir, prefix=""):
    ec_rules = ec_rules_from(cfg.get("ec_rules"))
    fc_rule = parse_rule(cfg["fc_rule"]) if cfg.get("fc_rule") else DEFAULT_FC_RULE
    ec = ec_extract(draws, ec_rules)
    fc, fc_note = [], None
    if draws.model == 3:
        fc_note = "Model 3 has a diagonal covariance matrix; FC not extracted"
    else:
        fc = fc_extract(draws, fc_rule)
    labels = draws.region_labels
    e_path = outdir / f"{prefix}edges.csv"
    write_edges_csv(ec + fc, labels, e_path)
    w = np.hstack([region_weights(ec, draws.R), region_weights(fc, draws.R)[:, 2:]])
    w_path = outdir / f"{prefix}region_weights.csv"
    _write_weights(w, labels, w_path)
    meta = {"ec_rules": _rules_json(ec_rules), "fc_rule": fc_rule.to_dict(),
            "n_ec_edges": len(ec), "n_fc_edges": len(fc), "fc_note": fc_note,
            "model": draws.model, "L": draws.L}
    j_path = outdir / f"{prefix}connectivity.json"
    j_path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    return [e_path, w_path, j_path]


def _write_weights(w, labels, path):
    with open(path, "w") as fh:
        fh.write("region,ec_outgoing,ec_incoming,ec_total,fc_total\n")
        for lab, row in zip(labels, w):
            fh.write(",".join([lab] + [repr(float(v)) for v in row]) + "\n")


def cmd_connectivity(cfg):
    _require(cfg, "draws_files")
    run = make_run_dir(cfg, "connectivity")
    outputs, inputs = [], {}
    files = cfg["draws_files"]
    for f in files:
        d = PosteriorDraws.load(f)
        inputs[str(f)] = sha256_file(f)
        prefix = f"{Path(f).stem}_" if len(files) > 1 else ""
        outputs += connectivity_outputs(d, cfg, run / "reports", prefix)
    write_manifest(run, "connectivity", cfg, inputs, outputs)
    print(str(run / "reports"))
    return EXIT_OK


def diff_outputs(da, db, cfg, outdir, prefix=""):
    ec_rule = parse_rule(cfg["ec_diff_rule"]) if cfg.get("ec_diff_rule") else None
    fc_rule = parse_rule(cfg["fc_diff_rule"]) if cfg.get("fc_diff_rule") else None
    ec = group_diff(da, db, "ec", ec_rule)
    fc = [] if 3 in (da.model, db.model) else group_diff(da, db, "fc", fc_rule)
    labels = da.region_labels
    e_path = outdir / f"{prefix}diff_edges.csv"
    write_edges_csv(ec + fc, labels, e_path)
    w = np.hstack([region_weights(ec, da.R), region_weights(fc, da.R)[:, 2:]])
    w_path = outdir / f"{prefix}diff_region_weights.csv"
    _write_weights(w, labels, w_path)
    s_path = outdir / f"{prefix}scatter.csv"
    write_scatter_csv(summarize_scatter(da, db), s_path)
    meta = {"ec_rule": (ec_rule or DEFAULT_EC_DIFF_RULE).to_dict(),
            "fc_rule": (fc_rule or DEFAULT_FC_DIFF_RULE).to_dict(),
            "n_ec_edges": len(ec), "n_fc_edges": len(fc),
            "paired_draws": min(da.n_chains * da.n_draws, db.n_chains * db.n_draws),
            "groups": [da.flags.get("group_id"), db.flags.get("group_id")]}
    j_path = outdir / f"{prefix}diff.json"
    j_path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    return [e_path, w_path, s_path, j_path]


def cmd_diff(cfg):
    _require(cfg, "draws_a", "draws_b")
    run = make_run_dir(cfg, "diff")
    da, db = PosteriorDraws.load(cfg["draws_a"]), PosteriorDraws.load(cfg["draws_b"])
    outputs = diff_outputs(da, db, cfg, run / "reports")
    inputs = {str(cfg["draws_a"]): sha256_file(cfg["draws_a"]),
              str(cfg["draws_b"]): sha256_file(cfg["draws_b"])}
    write_manifest(run, "diff", cfg, inputs, outputs)
    print(str(run / "reports"))
    return EXIT_OK


# -- pipeline -----------------------------------------------------------------------

class StageCache:
    """Stage records keyed by a hash of the stage's inputs and settings.

    A stage is reused only when its key matches and every recorded output
    still exists with the recorded content hash.
    """

    def __init__(self, run):
        self.dir = run / "stages"
        self.dir.mkdir(exist_ok=True)
        self.run = run

    def key(self, **parts):
        return hashlib.sha256(_canonical(parts).encode()).hexdigest()

    def lookup(self, name, key):
        rec = self.dir / f"{name}.json"
        if not rec.exists():
            return None
        doc = json.loads(rec.read_text())
        if doc.get("key") != key:
            log.info("stage %s: inputs changed, recomputing", name)
            return None
        for rel, h in doc["outputs"].items():
            p = self.run / rel
            if not p.exists() or sha256_file(p) != h:
                log.info("stage %s: output %s missing or modified, recomputing", name, rel)
                return None
        log.info("stage %s: reusing cached outputs", name)
        return [self.run / rel for rel in doc["outputs"]]

    def store(self, name, key, outputs):
        doc = {"key": key,
               "outputs": {str(Path(p).relative_to(self.run)): sha256_file(p) for p in outputs}}
        (self.dir / f"{name}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fit_task(args):
    manifest, center, drop, prior_dict, L, model, cfg, seed, out_csv = args
    ds = load_dataset(manifest, center, drop)
    draws = fit_model(ds, ShrinkagePrior.from_dict(prior_dict), L, model, cfg, seed)
    draws.save(out_csv)
    return str(out_csv)


def _groups(cfg):
    if cfg.get("groups"):
        return dict(cfg["groups"])
    _require(cfg, "manifest")
    manifests = cfg["manifest"] if isinstance(cfg["manifest"], list) else [cfg["manifest"]]
    out = {}
    for m in manifests:
        out[load_group(m).group_id] = m
    return out


def _stage(name, fn):
    try:
        return fn()
    except StageError:
        raise
    except (HbvarError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def cmd_pipeline(cfg):
    _require(cfg, "seed")
    groups = _groups(cfg)
    run = make_run_dir(cfg, "pipeline")
    cache = StageCache(run)
    lags = [int(x) for x in cfg["lags"]]
    models = [int(x) for x in cfg["models"]]
    seed = int(cfg["seed"])
    inputs, outputs = {}, []
    datasets = {}
    fit_settings = {k: cfg[k] for k in ("chains", "warmup", "draws", "dof", "model3_mode",
                                        "nu_prior", "fixed_nu", "center")}
    # With a common sample every lag order scores the same responses, which
    # keeps WAIC comparable across L.
    drop = {L: (max(lags) - L if cfg["common_sample"] else 0) for L in lags}

    for g, m in groups.items():
        inputs.update(dataset_inputs(m))
        for L in lags:
            datasets[(g, L)] = _stage(f"load:{g}", lambda m=m, L=L: load_dataset(m, cfg["center"],
                                                                                drop[L]))
    data_hash = {g: hashlib.sha256(_canonical(dataset_inputs(m)).encode()).hexdigest()
                 for g, m in groups.items()}

    # tune per (group, L)
    priors = {}
    for g in groups:
        for L in lags:
            name = f"tune_{g}_L{L}"
            key = cache.key(stage="tune", data=data_hash[g], L=L, two_stage=cfg["two_stage"],
                            center=cfg["center"], drop=drop[L], version=__version__)
            hit = cache.lookup(name, key)
            if hit is None:
                res = _stage(name, lambda g=g, L=L: tune(
                    datasets[(g, L)], L, TuneConfig(two_stage=bool(cfg["two_stage"]))))
                path = run / "reports" / f"{name}.json"
                res.save(path)
                cache.store(name, key, [path])
                hit = [path]
            outputs += hit
            tr = TuneResult.load(hit[0])
            priors[(g, L)] = build_default_prior(datasets[(g, L)], L, tr.lam, tr.kappa)

    # fits
    tasks, keys, draws_paths = [], {}, {}
    for gi, g in enumerate(groups):
        for L in lags:
            for model in models:
                name = _draws_name(g, model, L)
                fseed = _fit_seed(seed, gi, L, model)
                key = cache.key(stage="fit", data=data_hash[g], prior=priors[(g, L)].to_dict(),
                                model=model, L=L, seed=fseed, settings=fit_settings,
                                drop=drop[L], version=__version__)
                csv_path = run / "draws" / f"{name}.csv"
                draws_paths[(g, L, model)] = csv_path
                hit = cache.lookup(name, key)
                if hit is None:
                    keys[name] = (key, csv_path)
                    tasks.append((groups[g], cfg["center"], drop[L], priors[(g, L)].to_dict(),
                                  L, model, cfg, fseed, csv_path))
                else:
                    outputs += hit
    try:
        if int(cfg["jobs"]) > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=int(cfg["jobs"])) as ex:
                list(ex.map(_fit_task, tasks))
        else:
            for t in tasks:
                _stage(f"fit:{Path(t[-1]).stem}", lambda t=t: _fit_task(t))
    except StageError:
        raise
    except HbvarError as exc:
        raise StageError("fit", exc) from exc
    for name, (key, csv_path) in keys.items():
        files = [csv_path, csv_path.with_suffix(".json")]
        cache.store(name, key, files)
        outputs += files

    # diagnostics and WAIC
    reports, rows, rhats = {}, [], {}
    converged = True
    for (g, L, model), path in draws_paths.items():
        d = PosteriorDraws.load(path)
        if model == 1:
            rpath = run / "reports" / f"rhat_{path.stem}.csv"
            mr = rhat_report(d, rpath)
            rhats[path.stem] = mr
            outputs.append(rpath)
            converged &= convergence_ok(d, mr)
        rep = _stage(f"waic:{path.stem}", lambda d=d, g=g, L=L: _waic_for(d, datasets[(g, L)]))
        reports[(g, L, model)] = rep
        rows.append({"group": g, "L": L, "model": model, **rep.to_dict()})
    jpath = run / "reports" / "waic.json"
    jpath.write_text(json.dumps(_jsonable(rows), indent=2, sort_keys=True) + "\n")
    mpath = run / "reports" / "waic_table.md"
    mpath.write_text(waic_table(reports, lags, models))
    outputs += [jpath, mpath]

    # connectivity at the WAIC-optimal lag
    sel_model = 1 if 1 in models else models[0]
    chosen = {}
    for g in groups:
        L = best_lag(reports, g, sel_model)
        chosen[g] = L
        d = PosteriorDraws.load(draws_paths[(g, L, sel_model)])
        outputs += _stage(f"connectivity:{g}",
                          lambda d=d, g=g, L=L: connectivity_outputs(
                              d, cfg, run / "reports", f"{g}_model{sel_model}_L{L}_"))
    diff_info = None
    names = list(groups)
    if len(names) >= 2:
        a, b = names[0], names[1]
        L = min(lags, key=lambda l: reports[(a, l, sel_model)].waic + reports[(b, l, sel_model)].waic)
        da = PosteriorDraws.load(draws_paths[(a, L, sel_model)])
        db = PosteriorDraws.load(draws_paths[(b, L, sel_model)])
        outputs += _stage("diff", lambda: diff_outputs(da, db, cfg, run / "reports",
                                                       f"{a}_vs_{b}_L{L}_"))
        diff_info = {"groups": [a, b], "L": L, "model": sel_model}
    summary = {"selected_model": sel_model, "optimal_L": chosen, "diff": diff_info,
               "common_sample": bool(cfg["common_sample"]), "dropped_initial": drop,
               "max_rhat": rhats, "converged": converged}
    spath = run / "reports" / "pipeline.json"
    spath.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    outputs.append(spath)
    write_manifest(run, "pipeline", cfg, inputs, sorted(set(map(str, outputs))),
                   {"stages": sorted(p.stem for p in (run / "stages").glob("*.json"))})
    print(mpath.read_text(), end="")
    return EXIT_OK if converged else EXIT_CONVERGENCE


# -- argument parsing ----------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_run(p):
    p.add_argument("--runs-dir", dest="runs_dir", help="parent directory for run folders")
    p.add_argument("--run-dir", dest="run_dir", help="write into this directory instead")


def _add_data(p, multiple=False):
    if multiple:
        p.add_argument("--manifest", action="append", help="group manifest (repeatable)")
    else:
        p.add_argument("--manifest", help="group manifest JSON")
    p.add_argument("--no-center", dest="center", action="store_false", default=None,
                   help="do not subtract each subject's region means")


def _add_fit(p):
    p.add_argument("--model", type=int, choices=(1, 2, 3))
    p.add_argument("--L", type=int, help="lag order")
    p.add_argument("--chains", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--draws", type=int, help="draws per chain")
    p.add_argument("--seed", type=int)
    p.add_argument("--hyper", help="TuneResult JSON from 'tune'")
    p.add_argument("--lam", type=float)
    p.add_argument("--kappa", type=float, help="shared kappa")
    p.add_argument("--dof", choices=("exact", "reduced"))
    p.add_argument("--model3-mode", dest="model3_mode", choices=("exact", "literal"))
    p.add_argument("--nu-prior", dest="nu_prior", type=float, nargs=2, metavar=("SHAPE", "RATE"),
                   help="gamma prior on nu - nu_lb (default flat)")
    p.add_argument("--fixed-nu", dest="fixed_nu", type=float)


def _add_rules(p):
    p.add_argument("--ec-rule", dest="ec_rules", action="append",
                   help="LAG=KIND[:LEVEL[:FLOOR]], KIND 'all' or 'ci' (repeatable)")
    p.add_argument("--fc-rule", dest="fc_rule", help="KIND[:LEVEL[:FLOOR]]")


def build_parser():
    parser = argparse.ArgumentParser(prog="hbvar", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"hbvar {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check data files and print their dimensions")
    _add_common(p)
    _add_data(p, multiple=True)
    p.add_argument("--L", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="generate a synthetic group")
    _add_common(p)
    for name, typ in (("R", int), ("S", int), ("T", int), ("L", int), ("nu", float),
                      ("seed", int), ("burn-in", int)):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    p.add_argument("--b-diag", dest="b_diag", type=float, help="lag-1 self coefficient")
    p.add_argument("--sigma-corr", dest="sigma_corr", type=float, help="innovation correlation")
    p.add_argument("--subject-scale", dest="subject_scale", type=float,
                   help="prior variance of subject coefficients around B")
    p.add_argument("--group-id", dest="group_id")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="empirical-Bayes hyperparameters")
    _add_common(p)
    _add_run(p)
    _add_data(p)
    p.add_argument("--L", type=int)
    p.add_argument("--two-stage", dest="two_stage", action="store_true", default=None)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fit", help="posterior draws for one model and lag order")
    _add_common(p)
    _add_run(p)
    _add_data(p)
    _add_fit(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("waic", help="WAIC report and table")
    _add_common(p)
    _add_run(p)
    _add_data(p, multiple=True)
    p.add_argument("--draws-file", dest="draws_files", action="append", help="draws CSV (repeatable)")
    p.set_defaults(func=cmd_waic)

    p = sub.add_parser("connectivity", help="thresholded EC/FC edge lists")
    _add_common(p)
    _add_run(p)
    p.add_argument("--draws-file", dest="draws_files", action="append", help="draws CSV (repeatable)")
    _add_rules(p)
    p.set_defaults(func=cmd_connectivity)

    p = sub.add_parser("diff", help="group-difference edges and scatter table")
    _add_common(p)
    _add_run(p)
    p.add_argument("--draws-a", dest="draws_a")
    p.add_argument("--draws-b", dest="draws_b")
    p.add_argument("--ec-rule", dest="ec_diff_rule", help="KIND[:LEVEL[:FLOOR]]")
    p.add_argument("--fc-rule", dest="fc_diff_rule", help="KIND[:LEVEL[:FLOOR]]")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("pipeline", help="tune, fit, WAIC and connectivity for every lag and model")
    _add_common(p)
    _add_run(p)
    _add_data(p, multiple=True)
    _add_fit(p)
    _add_rules(p)
    p.add_argument("--lags", type=int, nargs="+")
    p.add_argument("--models", type=int, nargs="+")
    p.add_argument("--jobs", type=int, help="parallel fits")
    p.add_argument("--two-stage", dest="two_stage", action="store_true", default=None)
    p.add_argument("--no-common-sample", dest="common_sample", action="store_false", default=None,
                   help="fit each lag on all available responses (WAIC then not comparable across L)")
    p.set_defaults(func=cmd_pipeline)
    return parser


def _exit_code(exc):
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, (ValidationError, FileNotFoundError)):
        return EXIT_VALIDATION
    if isinstance(exc, (NumericalError, SpecInfeasibleError, np.linalg.LinAlgError)):
        return EXIT_NUMERICAL
    return EXIT_NUMERICAL


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(cfg)
    except (HbvarError, FileNotFoundError, np.linalg.LinAlgError) as exc:
        stage = f"[{exc.stage}] " if isinstance(exc, StageError) else ""
        print(f"hbvar {args.command}: {stage}{exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
