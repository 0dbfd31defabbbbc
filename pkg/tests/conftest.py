import numpy as np
import pytest

from aread.autodiff import Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(arrays)`` w.r.t. every entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(arrays)
            a[i] = old - h
            fm = f(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)


def check_grads(build, arrays, h=1e-6):
    """Max relative error between autodiff and finite differences.

    ``build(tensors)`` must return a Tensor; the check differentiates the sum of
    its entries weighted by a fixed random projection so every output matters.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe_rng = np.random.default_rng(1234)
    out0 = build([Tensor(a) for a in arrays])
    proj = probe_rng.standard_normal(out0.shape)

    def f(arrs):
        return float((build([Tensor(a) for a in arrs]).value * proj).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in leaves]
    numeric = numeric_grad(f, arrays, h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
