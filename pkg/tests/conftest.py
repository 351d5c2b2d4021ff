import numpy as np
import pytest


def rel_fro(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_dense(rng, m, n, lo=0.1, hi=3.0):
    """Fully nonzero matrix with random signs and magnitudes in [lo, hi]."""
    mag = rng.uniform(lo, hi, size=(m, n))
    return mag * rng.choice([-1.0, 1.0], size=(m, n))


def random_diag(rng, n, log_range):
    return np.exp(rng.uniform(-log_range, log_range, size=n))


def kitchen_sink(seed=0):
    """Net touching every node kind except conv: split/permute/concat/gain/add."""
    from ucgsd.graph import (Add, AffineGain, Concat, Dense, Input, Network, Nonlin,
                             Output, Permute, Split)
    rng = np.random.default_rng(seed)
    return Network([
        Input("in", 6),
        Dense("fc1", ["in"], rng.normal(size=(8, 6)), rng.normal(size=8) * 0.1),
        Nonlin("act1", ["fc1"], "relu"),
        Split("lo", ["act1"], 0, 3),
        Split("hi", ["act1"], 3, 8),
        Permute("perm", ["lo"], [2, 0, 1]),
        Concat("cat", ["hi", "perm"]),
        AffineGain("gain", ["cat"], rng.uniform(0.5, 1.5, 8), rng.normal(size=8) * 0.1),
        Nonlin("act2", ["gain"], "leaky_relu", slope=0.1),
        Dense("fc2", ["act2"], rng.normal(size=(8, 8)) / 3, rng.normal(size=8) * 0.1),
        Add("res", ["act2", "fc2"]),
        Nonlin("act3", ["res"], "abs"),
        Dense("logits", ["act3"], rng.normal(size=(3, 8)) / 3),
        Output("out", ["logits"]),
    ])
