import numpy as np
import pytest

from milexplain import autodiff as ad

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numerical_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f(x.copy())
        x[i] = orig - h
        down = f(x.copy())
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    """Gradient of ``build(Tensor) -> scalar Tensor`` via the tape."""
    leaf = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        out = build(leaf)
    ad.backward(out, tape)
    return leaf.grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def assert_gradcheck(build, x, rtol=FD_RTOL):
    num = numerical_grad(lambda v: build(ad.Tensor(v)).item(), x)
    ana = analytic_grad(build, x)
    err = rel_error(ana, num)
    assert err < rtol, f"relative error {err:.2e}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
