import numpy as np
import pytest

from gpn.autodiff import ParameterStore, Tape


def central_diff(fn, store: ParameterStore, names=None, h=1e-5):
    """Central finite differences of scalar ``fn(store)`` w.r.t. named slots."""
    names = names or list(store.values)
    out = {}
    for name in names:
        theta = store.values[name]
        g = np.zeros_like(theta)
        it = np.nditer(theta, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = theta[idx]
            theta[idx] = old + h
            up = fn(store)
            theta[idx] = old - h
            down = fn(store)
            theta[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def analytic_grad(build, store: ParameterStore):
    """Run ``build(tape, store) -> scalar Var`` once and backprop."""
    store.zero_grad()
    tape = Tape()
    loss = build(tape, store)
    tape.backward(loss)
    return {n: g.copy() for n, g in store.grads.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
