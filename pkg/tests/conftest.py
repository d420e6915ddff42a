import numpy as np
import pytest

from martssl import ndcore as nd


def central_diff_grads(fn, arrays, h=1e-5):
    """Numeric gradients of a scalar-valued fn(*arrays) by central differences."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(*arrays)
            flat[i] = orig - h
            lo = fn(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays, rtol=1e-4, h=1e-5):
    """Compare analytic gradients of build(*params) against central differences.

    ``build`` maps parameter Nodes to a scalar Node; numeric differentiation
    reruns it on perturbed copies of the raw arrays.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [nd.param(a.copy()) for a in arrays]
    loss = build(*params)
    nd.backward(loss)

    def scalar_fn(*arrs):
        return float(build(*[nd.constant(a.copy()) for a in arrs]).value)

    numeric = central_diff_grads(scalar_fn, [a.copy() for a in arrays], h=h)
    for p, g_num in zip(params, numeric):
        g_ana = p.grad if p.grad is not None else np.zeros_like(g_num)
        scale = max(np.abs(g_num).max(), np.abs(g_ana).max(), 1e-8)
        rel = np.abs(g_ana - g_num).max() / scale
        assert rel < rtol, f"gradient mismatch: rel err {rel:.3e} (tol {rtol})"


@pytest.fixture
def rng0():
    from martssl.rng import Rng
    return Rng(0)
