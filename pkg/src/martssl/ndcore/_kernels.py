"""Fused elementwise kernels for the memory-bound activation hot paths.

numpy evaluates each arithmetic step as a full pass over memory; on the small
matrices this package trains, that makes the activation chains the dominant
cost. When numba is available these loops run fused (one read, one write);
otherwise the plain numpy fallbacks below keep behavior identical.
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

try:
    from numba import njit

    # kernels take raveled contiguous views; plain 1-d indexing vectorizes.
    # transcendental-heavy passes stay in numpy, whose ufuncs are SIMD builds,
    # while the polynomial passes fuse here.

    @njit(cache=True, fastmath=False)
    def _gelu_inner(v, t):
        for i in range(v.shape[0]):
            x = v[i]
            t[i] = GELU_C * (x + GELU_A * x * x * x)

    @njit(cache=True, fastmath=False)
    def _gelu_outer(v, t, out):
        for i in range(v.shape[0]):
            out[i] = 0.5 * v[i] * (1.0 + t[i])

    @njit(cache=True, fastmath=False)
    def _gelu_bwd(v, t, g, out):
        for i in range(v.shape[0]):
            x = v[i]
            th = t[i]
            dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            out[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)

    @njit(cache=True, fastmath=False)
    def _dropout_fwd(v, u, rate, scale, out, keep):
        for i in range(v.shape[0]):
            k = scale if u[i] >= rate else 0.0
            keep[i] = k
            out[i] = v[i] * k

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def gelu_forward(v):
    out = np.empty_like(v)
    t = np.empty_like(v)
    if HAVE_NUMBA and v.size > 4096:
        _gelu_inner(v.ravel(), t.ravel())
        np.tanh(t, out=t)
        _gelu_outer(v.ravel(), t.ravel(), out.ravel())
        return out, t
    np.multiply(v, v, out=t)
    t *= v
    t *= GELU_A
    t += v
    t *= GELU_C
    np.tanh(t, out=t)
    np.add(t, 1.0, out=out)
    out *= v
    out *= 0.5
    return out, t


def gelu_backward(v, t, g):
    out = np.empty_like(v)
    if HAVE_NUMBA and v.size > 4096:
        _gelu_bwd(v.ravel(), t.ravel(), np.ascontiguousarray(g).ravel(), out.ravel())
        return out
    np.multiply(v, v, out=out)
    out *= 3.0 * GELU_A
    out += 1.0
    out *= GELU_C
    out *= 1.0 - t * t
    out *= v
    out += 1.0 + t
    out *= 0.5
    out *= g
    return out


def dropout_forward(v, uniforms, rate):
    scale = 1.0 / (1.0 - rate)
    out = np.empty_like(v)
    keep = np.empty_like(v)
    if HAVE_NUMBA and v.size > 4096:
        _dropout_fwd(v.ravel(), uniforms.ravel(), rate, scale,
                     out.ravel(), keep.ravel())
        return out, keep
    np.multiply((uniforms >= rate), scale, out=keep)
    np.multiply(v, keep, out=out)
    return out, keep
