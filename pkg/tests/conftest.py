import numpy as np
import pytest


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. array x (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def assert_close_rel(analytic: np.ndarray, numeric: np.ndarray, rtol: float, atol: float = 1e-8):
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = (err - bound).max()
    assert np.all(err <= bound), f"gradient mismatch, worst excess {worst:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
