import numpy as np
import pytest

from steinpf.model import benes_spec, discretize, linear_gaussian_spec


def finite_difference_grad(log_q, x, h=1e-6):
    """Central differences of a batched log density, shape (n, dim)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for j in range(x.shape[1]):
        step = np.zeros(x.shape[1])
        step[j] = h
        grad[:, j] = (log_q(x + step) - log_q(x - step)) / (2 * h)
    return grad


def assert_fd_close(grad, fd, rtol=1e-5):
    """Relative error per point, relative to max(1, |grad|)."""
    scale = np.maximum(1.0, np.linalg.norm(grad, axis=1))
    rel = np.linalg.norm(grad - fd, axis=1) / scale
    assert rel.max() < rtol, f"worst relative error {rel.max():.3e}"


@pytest.fixture
def linear_model():
    return discretize(linear_gaussian_spec())


@pytest.fixture
def benes_model():
    return discretize(benes_spec())


@pytest.fixture(params=["linear", "benes"])
def any_model(request):
    spec = linear_gaussian_spec() if request.param == "linear" else benes_spec()
    return discretize(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
