import numpy as np
import pytest


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def rel_err(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - f| scaled by the larger of the two magnitudes."""
    analytic = np.asarray(analytic)
    fd = np.asarray(fd)
    denom = max(np.abs(analytic).max(initial=0.0),
                np.abs(fd).max(initial=0.0), floor)
    return float(np.abs(analytic - fd).max(initial=0.0) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
