import numpy as np
import pytest

from reweightlab.net import NetConfig, NetParams, init_network

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def perturbed(cfg: NetConfig, scale=0.3, seed=0) -> NetParams:
    """Initialized params plus a random perturbation, so no layer is zero."""
    p = init_network(cfg)
    rng = np.random.default_rng(seed)
    return p.axpy(scale, NetParams.from_flat(cfg, rng.standard_normal(cfg.n_params)))


def tiny_problem(rng, d=3, n=None, m=None, depth=None, width=None):
    """Random small instance ``(params, X, y, Xv, yv, w)`` for hypergradient checks."""
    depth = depth or int(rng.integers(1, 3))
    width = width or int(rng.integers(2, 17))
    n = n or int(rng.integers(2, 9))
    m = m or 2 * int(rng.integers(1, 3))
    cfg = NetConfig.uniform(d, width, depth, seed=int(rng.integers(2 ** 31)))
    p = perturbed(cfg, 0.3, int(rng.integers(2 ** 31)))
    X = rng.uniform(-0.5, 0.5, (n, d))
    Xv = rng.uniform(-0.5, 0.5, (m, d))
    y = rng.choice([-1.0, 1.0], n)
    yv = np.repeat([-1.0, 1.0], m // 2) if m % 2 == 0 else rng.choice([-1.0, 1.0], m)
    w = rng.uniform(0, 1, n)
    return p, X, y, Xv, yv, w


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
