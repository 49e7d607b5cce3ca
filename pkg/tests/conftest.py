import numpy as np
import pytest

from bdsde.backward import RegressionBasis, SolverConfig
from bdsde.catalog import build_model


def linear_model(a=2.0, mu=1.0, K=0.5, Kprime=0.95, diffusion=0.5):
    return build_model("linear", {"a": a, "mu": mu, "kappa": 1.0, "diffusion": diffusion},
                       dict(mu=mu, K=K, Kprime=Kprime, p=4.0))


def ou_model(g0=1.0, mu=1.0, K=0.5, Kprime=0.95, diffusion=0.1):
    return build_model("ou", {"g0": g0, "mu": mu, "kappa": 1.0, "diffusion": diffusion},
                       dict(mu=mu, K=K, Kprime=Kprime, p=4.0))


def poly_model(f_y, g_y=(0.0,), diffusion=1.0, kappa=0.0, mu=1.0, override=False, **consts):
    c = dict(mu=mu, K=1.0, Kprime=1.5, p=4.0)
    c.update(consts)
    return build_model("custom-polynomial",
                       {"f_y": list(f_y), "g_y": list(g_y), "diffusion": diffusion,
                        "kappa": kappa}, c, override=override)


@pytest.fixture
def constant_config():
    return SolverConfig(M=10, basis=RegressionBasis(degree=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
