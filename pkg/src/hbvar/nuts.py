"""No-U-Turn sampler with multinomial trajectory sampling.

Warmup follows the usual windowed scheme: a fast initial buffer where only
the step size adapts, a sequence of doubling slow windows that estimate a
diagonal inverse metric from the draws, and a terminal fast buffer.  The step
size is tuned by dual averaging toward a target mean acceptance statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class NutsConfig:
    target_accept: float = 0.8
    max_depth: int = 10
    max_energy_error: float = 1000.0
    adapt_metric: bool = True
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25
    # dual averaging
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75


@dataclass
class ChainResult:
    samples: np.ndarray          # (draws, dim)
    logp: np.ndarray             # (draws,)
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    depth: np.ndarray
    divergent: np.ndarray
    energy: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0
    extra: dict = field(default_factory=dict)


class _Point:
    __slots__ = ("theta", "rho", "grad", "logp")

    def __init__(self, theta, rho, grad, logp):
        self.theta, self.rho, self.grad, self.logp = theta, rho, grad, logp


class _Tree:
    __slots__ = ("minus", "plus", "prop", "log_w", "rho_sum", "valid", "divergent",
                 "sum_accept", "n_leapfrog")


def adaptation_windows(n_warmup, cfg):
    """Iteration indices (exclusive ends) at which the metric is updated."""
    init, term, base = cfg.init_buffer, cfg.term_buffer, cfg.base_window
    if n_warmup < 20 or not cfg.adapt_metric:
        return 0, n_warmup, []
    if init + term + base > n_warmup:
        init = int(0.15 * n_warmup)
        term = int(0.1 * n_warmup)
        base = n_warmup - init - term
    ends = []
    start, size = init, base
    while True:
        end = start + size
        if end + 2 * size > n_warmup - term:
            ends.append(n_warmup - term)
            break
        ends.append(end)
        start, size = end, 2 * size
    return init, n_warmup - term, ends


class NutsSampler:
    """One NUTS chain for a log density ``fn(theta) -> (logp, grad)``.

    ``fn`` returns ``(-inf, None)`` for rejected states.
    """

    def __init__(self, fn, dim, rng, config=None):
        self.fn = fn
        self.dim = dim
        self.rng = rng
        self.cfg = config or NutsConfig()
        self.inv_metric = np.ones(dim)
        self.step_size = 1.0

    # -- dynamics ---------------------------------------------------------------

    def _kinetic(self, rho):
        return 0.5 * float(rho @ (self.inv_metric * rho))

    def _leapfrog(self, p, eps):
        rho = p.rho + 0.5 * eps * p.grad
        theta = p.theta + eps * self.inv_metric * rho
        logp, grad = self.fn(theta)
        if grad is None:
            return _Point(theta, rho, None, -np.inf)
        rho = rho + 0.5 * eps * grad
        return _Point(theta, rho, grad, logp)

    def _no_uturn(self, minus, plus, rho_sum):
        return (float((self.inv_metric * minus.rho) @ rho_sum) > 0
                and float((self.inv_metric * plus.rho) @ rho_sum) > 0)

    def _build(self, start, depth, direction, H0):
        if depth == 0:
            p = self._leapfrog(start, direction * self.step_size)
            t = _Tree()
            t.minus = t.plus = t.prop = p
            t.n_leapfrog = 1
            if p.grad is None:
                delta = np.inf
            else:
                delta = -p.logp + self._kinetic(p.rho) - H0
                if math.isnan(delta):
                    delta = np.inf
            t.divergent = delta > self.cfg.max_energy_error
            t.valid = not t.divergent
            t.log_w = -delta
            t.sum_accept = math.exp(min(0.0, -delta))
            t.rho_sum = p.rho if p.grad is not None else np.zeros(self.dim)
            return t
        first = self._build(start, depth - 1, direction, H0)
        if not first.valid:
            return first
        outer = first.plus if direction > 0 else first.minus
        second = self._build(outer, depth - 1, direction, H0)
        first.n_leapfrog += second.n_leapfrog
        first.sum_accept += second.sum_accept
        if not second.valid:
            first.valid = False
            first.divergent = second.divergent
            return first
        log_w = np.logaddexp(first.log_w, second.log_w)
        if math.log(self.rng.random()) < second.log_w - log_w:
            first.prop = second.prop
        first.log_w = log_w
        first.rho_sum = first.rho_sum + second.rho_sum
        if direction > 0:
            first.plus = second.plus
        else:
            first.minus = second.minus
        first.valid = self._no_uturn(first.minus, first.plus, first.rho_sum)
        return first

    def transition(self, point):
        """One NUTS transition; returns (new point, stats dict)."""
        rho0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        cur = _Point(point.theta, rho0, point.grad, point.logp)
        H0 = -cur.logp + self._kinetic(rho0)
        minus = plus = cur
        prop = cur
        log_sum_w = 0.0
        rho_sum = rho0.copy()
        depth = 0
        n_leapfrog = 0
        sum_accept = 0.0
        divergent = False
        while depth < self.cfg.max_depth:
            direction = 1 if self.rng.random() < 0.5 else -1
            start = plus if direction > 0 else minus
            sub = self._build(start, depth, direction, H0)
            n_leapfrog += sub.n_leapfrog
            sum_accept += sub.sum_accept
            if not sub.valid:
                divergent = sub.divergent
                break
            depth += 1
            if sub.log_w > log_sum_w or math.log(self.rng.random()) < sub.log_w - log_sum_w:
                prop = sub.prop
            log_sum_w = np.logaddexp(log_sum_w, sub.log_w)
            rho_sum = rho_sum + sub.rho_sum
            if direction > 0:
                plus = sub.plus
            else:
                minus = sub.minus
            if not self._no_uturn(minus, plus, rho_sum):
                break
        new = _Point(prop.theta, None, prop.grad, prop.logp)
        stats = {"accept_stat": sum_accept / max(n_leapfrog, 1), "n_leapfrog": n_leapfrog,
                 "depth": depth, "divergent": divergent,
                 "energy": -new.logp + self._kinetic(rho0)}
        return new, stats

    # -- adaptation -------------------------------------------------------------

    def init_step_size(self, point):
        """Double or halve the step size until one leapfrog step crosses 80% acceptance."""
        eps = self.step_size
        log_target = math.log(0.8)

        def delta_h(eps):
            rho = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
            p = self._leapfrog(_Point(point.theta, rho, point.grad, point.logp), eps)
            if p.grad is None:
                return -np.inf
            h0 = -point.logp + self._kinetic(rho)
            h = -p.logp + self._kinetic(p.rho)
            return h0 - h

        dh = delta_h(eps)
        direction = 1 if dh > log_target else -1
        for _ in range(100):
            eps = eps * 2.0 if direction > 0 else eps / 2.0
            dh = delta_h(eps)
            if direction > 0 and not dh > log_target:
                break
            if direction < 0 and not dh < log_target:
                break
            if eps > 1e7 or eps < 1e-10:
                break
        self.step_size = eps
        return eps

    def run(self, theta0, n_warmup, n_draws):
        # extreme trial steps overflow harmlessly; those states are rejected
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._run(theta0, n_warmup, n_draws)

    def _run(self, theta0, n_warmup, n_draws):
        cfg = self.cfg
        logp, grad = self.fn(np.asarray(theta0, dtype=float))
        if grad is None:
            raise ValueError("log density is not finite at the initial point")
        point = _Point(np.asarray(theta0, dtype=float), None, grad, logp)
        self.init_step_size(point)

        slow_start, slow_end, window_ends = adaptation_windows(n_warmup, cfg)
        mu = math.log(10 * self.step_size)
        s_bar, x_bar, counter = 0.0, 0.0, 0
        w_n, w_mean, w_m2 = 0, np.zeros(self.dim), np.zeros(self.dim)
        warm_div = 0

        for it in range(n_warmup):
            point, st = self.transition(point)
            warm_div += st["divergent"]
            counter += 1
            eta = 1.0 / (counter + cfg.t0)
            s_bar = (1 - eta) * s_bar + eta * (cfg.target_accept - st["accept_stat"])
            x = mu - s_bar * math.sqrt(counter) / cfg.gamma
            x_eta = counter ** (-cfg.kappa)
            x_bar = (1 - x_eta) * x_bar + x_eta * x
            self.step_size = math.exp(x)
            if slow_start <= it < slow_end:
                w_n += 1
                delta = point.theta - w_mean
                w_mean = w_mean + delta / w_n
                w_m2 = w_m2 + delta * (point.theta - w_mean)
                if it + 1 in window_ends:
                    var = w_m2 / max(w_n - 1, 1)
                    self.inv_metric = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                    w_n, w_mean, w_m2 = 0, np.zeros(self.dim), np.zeros(self.dim)
                    self.init_step_size(point)
                    mu = math.log(10 * self.step_size)
                    s_bar, x_bar, counter = 0.0, 0.0, 0
        if n_warmup > 0:
            self.step_size = math.exp(x_bar)

        out = np.empty((n_draws, self.dim))
        logps = np.empty(n_draws)
        acc = np.empty(n_draws)
        nlf = np.empty(n_draws, dtype=int)
        dep = np.empty(n_draws, dtype=int)
        div = np.zeros(n_draws, dtype=bool)
        energy = np.empty(n_draws)
        for i in range(n_draws):
            point, st = self.transition(point)
            out[i] = point.theta
            logps[i] = point.logp
            acc[i] = st["accept_stat"]
            nlf[i] = st["n_leapfrog"]
            dep[i] = st["depth"]
            div[i] = st["divergent"]
            energy[i] = st["energy"]
        return ChainResult(out, logps, acc, nlf, dep, div, energy, self.step_size,
                           self.inv_metric.copy(), warm_div)
