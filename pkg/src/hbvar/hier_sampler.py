"""NUTS fits of the subject-specific-covariance model.

Chains start from independent draws of the common-covariance posterior, which
is usually close to the bulk of the target and avoids long transients.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .conjugate import all_subject_stats, combine, sample_model2
from .data import group_designs
from .diagnostics import rhat
from .draws import PosteriorDraws
from .errors import InitializationError
from .model1 import HierParams, HierTarget, UnconstrainedState, grad_log_target, log_target
from .nuts import NutsConfig, NutsSampler

__all__ = ["nuts_fit", "nuts_fit_stats", "rhat", "log_target", "grad_log_target",
           "HierParams", "UnconstrainedState", "HierTarget", "DIVERGENCE_LIMIT"]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 0.10
NU_RUNAWAY = 1e6


def _initial_points(target, stats, prior, n_chains, rng):
    post = combine(stats, prior)
    init = sample_model2(post, n_chains, int(rng.integers(2**63)))
    points = []
    for c in range(n_chains):
        nu = None
        if target.fixed_nu is None:
            nu = target.nu_lb + float(np.exp(rng.uniform(np.log(2.0), np.log(30.0))))
        points.append(target.unconstrain(init.B[0, c], init.Sigma[0, c], nu))
    return points


def _run_chain(args):
    target, theta0, seed_seq, warmup, draws, config = args
    rng = np.random.default_rng(seed_seq)
    sampler = NutsSampler(target.log_prob_and_grad, target.dim, rng, config)
    return sampler.run(theta0, warmup, draws)


def nuts_fit_stats(stats, prior, L=1, chains=3, warmup=200, draws=500, seed=0,
                   fixed_nu=None, nu_lb=None, nu_prior=None, config=None, n_jobs=1,
                   region_labels=None, init=None):
    """NUTS on the marginal posterior of (B, Sigma, nu) given subject statistics.

    Parameters
    ----------
    stats : list of SubjectStats
        May be empty, in which case the prior is sampled.
    fixed_nu : float, optional
        Clamp ``nu``; the sampler then runs over (B, Sigma) only.
    nu_prior : (shape, rate), optional
        Gamma prior on ``nu - nu_lb``; flat when omitted.
    n_jobs : int
        Chains run in separate processes when greater than one; results do
        not depend on this setting.
    init : list of arrays, optional
        Unconstrained starting points, one per chain.
    """
    if chains < 1:
        raise ValueError("chains must be positive")
    config = config or NutsConfig()
    target = HierTarget(stats, prior, fixed_nu=fixed_nu, nu_lb=nu_lb, nu_prior=nu_prior)
    root = np.random.SeedSequence(seed)
    init_seq, *chain_seqs = root.spawn(chains + 1)
    if init is None:
        init = _initial_points(target, stats, prior, chains, np.random.default_rng(init_seq))
    for c, th in enumerate(init):
        if not np.isfinite(target.log_prob(th)):
            raise InitializationError(f"chain {c}: log target not finite at the initial point")

    jobs = [(target, np.asarray(init[c], dtype=float), chain_seqs[c], warmup, draws, config)
            for c in range(chains)]
    if n_jobs > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, chains)) as ex:
            results = list(ex.map(_run_chain, jobs))
    else:
        results = [_run_chain(j) for j in jobs]

    q, R = target.q, target.R
    B = np.empty((chains, draws, q, R))
    Sigma = np.empty((chains, draws, R, R))
    nu = np.empty((chains, draws))
    for c, res in enumerate(results):
        for i, th in enumerate(res.samples):
            p = target.constrain(th)
            B[c, i], Sigma[c, i], nu[c, i] = p.B, p.Sigma, p.nu

    n_div = [int(r.divergent.sum()) for r in results]
    frac = sum(n_div) / max(chains * draws, 1)
    diagnostics = {
        "sampler": "nuts",
        "divergences": n_div,
        "divergence_fraction": frac,
        "warmup_divergences": [r.warmup_divergences for r in results],
        "step_size": [r.step_size for r in results],
        "mean_tree_depth": [float(r.depth.mean()) if draws else 0.0 for r in results],
        "max_tree_depth_hits": [int((r.depth >= config.max_depth).sum()) for r in results],
        "mean_accept_stat": [float(r.accept_stat.mean()) if draws else 0.0 for r in results],
        "n_leapfrog": [int(r.n_leapfrog.sum()) for r in results],
        "target_accept": config.target_accept,
        "max_depth": config.max_depth,
    }
    flags = {"nu_fixed": fixed_nu is not None, "nu_lb": target.nu_lb,
             "nu_prior": "flat" if nu_prior is None else {"gamma": list(target.nu_prior)},
             "unreliable": frac > DIVERGENCE_LIMIT,
             "nu_runaway": bool(draws and fixed_nu is None and np.median(nu) > NU_RUNAWAY)}
    if flags["unreliable"]:
        log.warning("%.1f%% divergent transitions; fit flagged unreliable", 100 * frac)
    if flags["nu_runaway"]:
        log.warning("nu drifted above %g; the data do not identify it under a flat prior",
                    NU_RUNAWAY)
    seeds = [{"seed": seed, "chain": c, "spawn_key": list(chain_seqs[c].spawn_key)}
             for c in range(chains)]
    return PosteriorDraws(1, B, Sigma, nu, L, region_labels, seeds, warmup, diagnostics, flags)


def nuts_fit(dataset, prior, L, chains=3, warmup=200, draws=500, seed=0, fixed_nu=None,
             **kwargs):
    """Fit the subject-specific-covariance model to a dataset by NUTS."""
    designs = group_designs(dataset, L)
    stats = all_subject_stats(designs, prior)
    return nuts_fit_stats(stats, prior, L, chains, warmup, draws, seed, fixed_nu,
                          region_labels=dataset.region_labels, **kwargs)
