"""Convergence diagnostics: split-R-hat and effective sample size."""

from __future__ import annotations

import warnings

import numpy as np


def split_rhat(x):
    """Split-R-hat of one scalar from an array shaped ``(chains, draws)``.

    Each chain is cut into two halves (the middle draw is dropped for odd
    lengths) and the classic potential scale reduction factor
    ``sqrt(((N-1)/N W + B/N) / W)`` is computed over the halves.
    Returns NaN, with a warning, when the within-chain variance is zero.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 4:
        raise ValueError("split-R-hat needs (chains, draws) with at least 4 draws")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    W = parts.var(axis=1, ddof=1).mean()
    B = n * parts.mean(axis=1).var(ddof=1)
    if not W > 0:
        warnings.warn("zero within-chain variance; R-hat undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def rhat(draws):
    """Split-R-hat for every scalar parameter of a :class:`PosteriorDraws`.

    Returns a dict keyed by the draw-file column names.
    """
    if draws.n_chains < 2:
        raise ValueError("R-hat needs at least 2 chains")
    return {name: split_rhat(v) for name, v in draws.scalar_parameters().items()}


def _autocov(x):
    n = len(x)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), m)
    ac = np.fft.irfft(f * np.conjugate(f), m)[:n]
    return ac / n


def ess(x):
    """Multi-chain effective sample size (Geyer initial monotone sequence).

    ``x`` is ``(chains, draws)``; a 1-D input is treated as one chain.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    C, N = x.shape
    if N < 4:
        return float(C * N)
    acov = np.stack([_autocov(c) for c in x])
    chain_var = acov[:, 0] * N / (N - 1.0)
    W = chain_var.mean()
    var_plus = W * (N - 1.0) / N
    if C > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float(C * N)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum adjacent pairs while positive, enforcing monotone decrease
    pairs = []
    t = 0
    while t + 1 < N:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        if pairs and p > pairs[-1]:
            p = pairs[-1]
        pairs.append(p)
        t += 2
    tau = -1.0 + 2.0 * sum(pairs)
    tau = max(tau, 1.0 / np.log10(C * N))
    return float(C * N / tau)


def mc_se(x):
    """Monte Carlo standard error of the mean of ``x`` (chains, draws)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return float(x.std(ddof=1) / np.sqrt(ess(x)))
