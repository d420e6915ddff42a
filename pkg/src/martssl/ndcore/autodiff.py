"""Dense float64 tensors with reverse-mode differentiation.

Values are plain C-contiguous ``numpy`` arrays (shape metadata plus a flat
row-major buffer of 64-bit reals). ``Node`` wraps a value together with its
gradient and the references needed for reverse traversal. Only the operations
this package needs are provided; broadcasting is restricted to scalar-vs-tensor
and equal shapes, everything else is a shape error.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels

EPS_POOL = 1e-8

_CHECK_FINITE = False


def set_check_finite(flag: bool) -> None:
    """Globally enable per-operation finiteness checks (used by the test suite)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    """One vertex of the computation graph.

    ``value`` and ``grad`` always share a shape. ``parents`` holds the producing
    operation's inputs and ``_vjp`` maps an output gradient to one gradient per
    parent; leaves have neither.
    """

    __slots__ = ("value", "grad", "parents", "_vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = _as_value(value)
        if _CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise ContractError("non-finite tensor produced")
        self.grad = None
        self.parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def param(x) -> Node:
    return Node(x, requires_grad=True)


def stopgrad(x) -> Node:
    """Detach: same value, no parents, no gradient flow."""
    x = constant(x)
    return Node(x.value, requires_grad=False)


def _unary(x, out, dfn):
    x = constant(x)
    return Node(out, parents=(x,), vjp=lambda g: (dfn(g),),
                requires_grad=x.requires_grad)


def _check_binary_shapes(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither "
                         "equal nor scalar-vs-tensor")


def _reduce_to(g, shape):
    # gradient of a scalar operand of a broadcasted binary op
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_binary_shapes(a, b, "add")
    out = a.value + b.value

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Node(out, (a, b), vjp, a.requires_grad or b.requires_grad)


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_binary_shapes(a, b, "sub")
    out = a.value - b.value

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Node(out, (a, b), vjp, a.requires_grad or b.requires_grad)


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_binary_shapes(a, b, "mul")
    out = a.value * b.value
    av, bv = a.value, b.value

    def vjp(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return Node(out, (a, b), vjp, a.requires_grad or b.requires_grad)


def neg(x) -> Node:
    x = constant(x)
    return _unary(x, -x.value, lambda g: -g)


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, (a, b), vjp, a.requires_grad or b.requires_grad)


def transpose(x) -> Node:
    x = constant(x)
    if x.ndim != 2:
        raise DimensionError("transpose expects a 2-d tensor")
    return _unary(x, x.value.T, lambda g: np.ascontiguousarray(g.T))


def reshape(x, shape) -> Node:
    x = constant(x)
    old = x.shape
    return _unary(x, x.value.reshape(shape), lambda g: g.reshape(old))


def concat0(nodes) -> Node:
    """Concatenate along the leading axis."""
    nodes = [constant(n) for n in nodes]
    sizes = [n.shape[0] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=0)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(nodes)))

    return Node(out, tuple(nodes), vjp, any(n.requires_grad for n in nodes))


def slice0(x, start, stop) -> Node:
    """Contiguous slice along the leading axis."""
    x = constant(x)
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"slice [{start}:{stop}] outside leading extent {x.shape[0]}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return Node(x.value[start:stop].copy(), (x,), vjp, x.requires_grad)


def add_bias(x, b) -> Node:
    """Add a vector to the trailing axis of a matrix (row-wise broadcast)."""
    x, b = constant(x), constant(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    out = x.value + b.value

    def vjp(g):
        return g, g.sum(axis=0)

    return Node(out, (x, b), vjp, x.requires_grad or b.requires_grad)


def sum_(x, axis=None) -> Node:
    x = constant(x)
    out = x.value.sum(axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64),)

    return Node(out, (x,), vjp, x.requires_grad)


def mean_(x, axis=None) -> Node:
    x = constant(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def tanh(x) -> Node:
    x = constant(x)
    t = np.tanh(x.value)
    return _unary(x, t, lambda g: g * (1.0 - t * t))


def sigmoid(x) -> Node:
    x = constant(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def relu(x) -> Node:
    x = constant(x)
    pos = x.value > 0
    return _unary(x, np.where(pos, x.value, 0.0), lambda g: g * pos)


def gelu(x) -> Node:
    """tanh-approximated GELU (closed-form derivative, no erf needed)."""
    x = constant(x)
    v = x.value
    out, t = _kernels.gelu_forward(v)

    def vjp(g):
        return (_kernels.gelu_backward(v, t, g),)

    return Node(out, (x,), vjp, x.requires_grad)


def dropout(x, rate, rng, training=True) -> Node:
    """Inverted dropout: kept units scaled by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    x = constant(x)
    if not training or rate == 0.0:
        return x
    # float32 uniforms are twice as fast and ample for a keep/drop decision
    uniforms = rng.gen.random(x.shape, dtype=np.float32)
    out, keep = _kernels.dropout_forward(x.value, uniforms, rate)
    return _unary(x, out, lambda g: g * keep)


def clip_(x, lo, hi) -> Node:
    x = constant(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _unary(x, np.clip(x.value, lo, hi), lambda g: g * inside)


def softmax_cross_entropy(logits, labels) -> Node:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = constant(logits)
    if logits.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects [B, K] logits")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise DomainError("label out of range [0, K)")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = np.mean(lse - z[np.arange(b), labels])
    probs = np.exp(z - lse[:, None])

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(b), labels] -= 1.0
        return (gl * (float(g) / b),)

    return Node(out, (logits,), vjp, logits.requires_grad)


def masked_mean_pool(x, obs) -> Node:
    """Per-sample mean of x[B,T,H] over timesteps with obs[B,T] == 1.

    The denominator is floored at EPS_POOL, so an all-unobserved sample pools
    to the zero vector instead of dividing by zero. Differentiable in x only.
    """
    x = constant(x)
    obs_v = obs.value if isinstance(obs, Node) else np.asarray(obs, dtype=np.float64)
    if x.ndim != 3 or obs_v.shape != x.shape[:2]:
        raise DimensionError(f"masked_mean_pool: x {x.shape}, obs {obs_v.shape}")
    if not np.all((obs_v == 0.0) | (obs_v == 1.0)):
        raise DomainError("obs entries must be 0 or 1")
    denom = np.maximum(obs_v.sum(axis=1), EPS_POOL)
    out = np.einsum("bth,bt->bh", x.value, obs_v) / denom[:, None]
    w = obs_v / denom[:, None]

    def vjp(g):
        return (np.einsum("bh,bt->bth", g, w),)

    return Node(out, (x,), vjp, x.requires_grad)


def l2_normalize(x, eps=1e-12) -> Node:
    """Row-wise unit normalization of a [B, D] matrix."""
    x = constant(x)
    if x.ndim != 2:
        raise DimensionError("l2_normalize expects a 2-d tensor")
    norm = np.maximum(np.sqrt((x.value ** 2).sum(axis=1)), eps)
    y = x.value / norm[:, None]

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norm[:, None],)

    return Node(y, (x,), vjp, x.requires_grad)


_ELEMENTWISE = {"tanh": tanh, "gelu": gelu, "sigmoid": sigmoid, "relu": relu,
                "add": add, "mul": mul, "sub": sub}


def elementwise(op_kind, *args) -> Node:
    """Dispatch table for the supported element-wise operations."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate grads of every node reachable from a scalar loss.

    Each node is visited exactly once per call (reverse topological order).
    A second call on the same graph adds another full contribution, so grads
    accumulate until explicitly zeroed.
    """
    if loss.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    contrib: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = contrib.get(id(node))
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None:
                continue
            pid = id(parent)
            if pid in contrib:
                contrib[pid] = contrib[pid] + pg
            else:
                contrib[pid] = pg


def reachable_params(node: Node) -> list[Node]:
    """Leaf nodes with requires_grad reachable from ``node`` (graph inspection)."""
    return [n for n in _topo(node) if n.requires_grad and not n.parents]


def zero_grads(params) -> None:
    it = params.values() if isinstance(params, dict) else params
    for p in it:
        p.grad = None
