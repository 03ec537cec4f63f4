import numpy as np
import pytest

from hybridact.tensor import Tensor


def central_diff_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of scalar fn(x) at float64 precision."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build_loss, x0: np.ndarray, rtol: float = 1e-4, h: float = 1e-5):
    """Compare analytic gradient of build_loss against central differences.

    build_loss takes a float64 ndarray and returns a scalar Tensor; the
    same function evaluated on plain values drives the finite differences.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    loss = build_loss(leaf)
    loss.backward()
    analytic = leaf.grad

    def scalar_fn(arr):
        return float(build_loss(Tensor(arr, dtype=np.float64)).data)

    numeric = central_diff_grad(scalar_fn, x0, h=h)
    # the floor acts as an absolute tolerance where the true gradient ~ 0
    denom = np.maximum(np.abs(numeric), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < rtol, f"gradient mismatch: max rel err {rel.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
