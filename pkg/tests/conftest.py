import numpy as np
import pytest

import agnet.tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def f64():
    """Run the body under float64 tensors (for tight gradient checks)."""
    with T.using_dtype(np.float64):
        yield


def fd_gradient(fn, tensor, index, h=1e-6):
    """Central finite difference of a scalar-valued fn at one element."""
    flat = tensor.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    with T.no_grad():
        fp = fn().item()
    flat[index] = orig - h
    with T.no_grad():
        fm = fn().item()
    flat[index] = orig
    return (fp - fm) / (2 * h)


def check_gradients(fn, tensors, rng, samples=8, h=1e-6, tol=1e-6):
    """Compare tape gradients of scalar fn(*tensors) against finite differences."""
    call = lambda: fn(*tensors)
    for t in tensors:
        t.zero_grad()
    with T.recording() as tape:
        loss = call()
        T.backward(loss, tape=tape)
    for t in tensors:
        assert t.grad is not None, "missing gradient"
        flat_g = t.grad.reshape(-1)
        for _ in range(min(samples, t.size)):
            i = int(rng.integers(t.size))
            num = fd_gradient(call, t, i, h)
            ana = flat_g[i]
            rel = abs(num - ana) / max(1.0, abs(num), abs(ana))
            assert rel < tol, f"gradient mismatch at {i}: fd={num} tape={ana} rel={rel}"
