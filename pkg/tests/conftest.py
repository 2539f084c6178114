import numpy as np
import pytest

from hjbadp import micro_ad as ad


def central_diff(fn, theta, step=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        out[i] = (fn(theta + e) - fn(theta - e)) / (2 * step)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_net(rng, n_in=3, width=5, hidden=2, output="softplus", scale=1.0, hidden_act="elu"):
    specs = ad.mlp_specs(n_in, width, hidden, 1, output, hidden_act, scale)
    p = ad.mlp_init(specs, int(rng.integers(1 << 30)))
    # non-zero biases so every activation branch is exercised
    return p.with_flat(p.flat() + 0.3 * rng.standard_normal(p.n_params))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
