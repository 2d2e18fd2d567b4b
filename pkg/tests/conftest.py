import numpy as np
import pytest

from o2na import tensor as T


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar-valued f at ndarray x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    """Scale-aware distance between a numeric and an analytic gradient."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check_gradients(build_loss, params, tol=1e-5, h=1e-6):
    """Compare tape gradients of build_loss() against central differences.

    build_loss must run a fresh forward pass (reading the current data of
    every tensor in params) and return a scalar loss Tensor recorded on the
    returned tape.
    """
    with T.Tape() as tape:
        loss = build_loss()
    for p in params:
        p.zero_grad()
    T.backward(loss, tape)

    def value():
        return build_loss().item()

    for p in params:
        num = numeric_grad(value, p.data, h=h)
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = rel_err(num, ana)
        assert err <= tol, f"gradient mismatch {err:.3e} > {tol:.1e} for param shape {p.data.shape}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
