import numpy as np
import pytest

from hbvar.diagnostics import ess
from hbvar.nuts import NutsConfig, NutsSampler, adaptation_windows


def gaussian(cov):
    P = np.linalg.inv(cov)

    def fn(x):
        g = -P @ x
        return 0.5 * float(x @ g), g
    return fn


def run(fn, dim, seed, warmup=500, draws=2000, x0=None, **cfg):
    s = NutsSampler(fn, dim, np.random.default_rng(seed), NutsConfig(**cfg))
    return s.run(np.zeros(dim) if x0 is None else x0, warmup, draws)


def test_standard_normal_moments():
    res = run(gaussian(np.eye(3)), 3, 0, x0=np.ones(3))
    x = res.samples
    n_eff = min(ess(c) for c in x.T)
    assert np.all(np.abs(x.mean(axis=0)) < 4 / np.sqrt(n_eff))
    np.testing.assert_allclose(x.var(axis=0), 1.0, atol=0.15)
    assert not res.divergent.any()


def test_correlated_scaled_gaussian():
    cov = np.array([[4.0, 1.9], [1.9, 1.0]]) * np.array([[1.0, 0.1], [0.1, 0.01]])
    res = run(gaussian(cov), 2, 1)
    emp = np.cov(res.samples, rowvar=False)
    np.testing.assert_allclose(emp, cov, rtol=0.15, atol=0.01)
    # metric adaptation picks up the scale difference
    assert res.inv_metric[0] / res.inv_metric[1] > 20


def test_step_size_hits_target_acceptance():
    res = run(gaussian(np.eye(10)), 10, 2)
    assert 0.7 < res.accept_stat.mean() < 0.95


def test_determinism():
    a = run(gaussian(np.eye(2)), 2, 7, warmup=100, draws=50)
    b = run(gaussian(np.eye(2)), 2, 7, warmup=100, draws=50)
    assert np.array_equal(a.samples, b.samples) and a.step_size == b.step_size


def test_rejected_region_is_respected():
    def half_normal(x):
        if x[0] < 0:
            return -np.inf, None
        return -0.5 * float(x[0] ** 2), -x

    res = run(half_normal, 1, 3, x0=np.array([0.5]))
    assert np.all(res.samples >= 0)
    assert res.samples.mean() == pytest.approx(np.sqrt(2 / np.pi), abs=0.08)


def test_invalid_start():
    with pytest.raises(ValueError):
        run(lambda x: (-np.inf, None), 1, 0, warmup=10, draws=10)


def test_tree_depth_cap():
    res = run(gaussian(np.diag([1.0, 1e-4])), 2, 4, warmup=0, draws=20, max_depth=3)
    assert res.depth.max() <= 3


def test_adaptation_windows():
    cfg = NutsConfig()
    start, end, ends = adaptation_windows(1000, cfg)
    assert (start, end) == (75, 950)
    assert ends == [100, 150, 250, 450, 950]
    start, end, ends = adaptation_windows(100, cfg)
    assert (start, end) == (15, 90) and ends[-1] == 90
    assert adaptation_windows(10, cfg) == (0, 10, [])
