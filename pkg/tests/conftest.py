import numpy as np
import pytest

from darr.data import LongitudinalDataset
from darr.numerics import rng_stream


def make_dataset(n=20, T=4, p=5, q=2, seed=0, beta=None, noise=1.0, re_sd=1.0):
    """Small random LMM dataset with Z = (1, t/T)."""
    rng = rng_stream(seed, 99)
    N = n * T
    X = rng.standard_normal((N, p))
    if beta is None:
        beta = np.zeros(p)
        beta[: min(3, p)] = [2.0, -1.5, 1.0][: min(3, p)]
    t = np.tile(np.arange(1, T + 1, dtype=float), n)
    Z = np.column_stack([np.ones(N), t / T])[:, :q]
    b = re_sd * rng.standard_normal((n, q))
    Y = X @ beta + np.einsum("ij,ij->i", Z, np.repeat(b, T, axis=0)) + noise * rng.standard_normal(N)
    ids = np.repeat(np.arange(n), T)
    return LongitudinalDataset.from_long(ids, t, Y, X, Z)


@pytest.fixture
def small_dataset():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results.values():
            terminalreporter.write_line(line)
