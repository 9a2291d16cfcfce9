import numpy as np
import pytest

from hbvar.data import build_default_prior
from hbvar.simulate import GeneratorSpec, generate


def make_group(R=2, S=3, T=30, L=1, nu=None, seed=1, scale=0.05, b=0.3, corr=0.3):
    B = np.zeros((L * R, R))
    B[:R] = b * np.eye(R)
    Sigma = (1 - corr) * np.eye(R) + corr
    spec = GeneratorSpec(R, S, T, L, B=B, Sigma=Sigma, nu=nu, P_s_inv=scale * np.eye(L * R),
                         seed=seed)
    return generate(spec)


@pytest.fixture
def tiny():
    ds, truth = make_group()
    prior = build_default_prior(ds, 1, 0.5, 0.2)
    return ds, prior


@pytest.fixture
def tiny_hetero():
    ds, truth = make_group(S=3, T=40, nu=8.0, seed=4)
    prior = build_default_prior(ds, 1, 0.5, 0.2)
    return ds, prior


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k][1])
