import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradcheck
from martssl import ndcore as nd
from martssl.rng import Rng


def test_matmul_identity():
    a = nd.constant([[1.0, 0.0], [0.0, 1.0]])
    b = nd.constant([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(nd.matmul(a, b).value, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_dot():
    out = nd.matmul(nd.constant([[1.0, 2.0]]), nd.constant([[3.0], [4.0]]))
    assert out.value.shape == (1, 1)
    assert out.value[0, 0] == 11.0


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def test_matmul_matches_triple_loop_oracle():
    rng = Rng(5)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    got = nd.matmul(nd.constant(a), nd.constant(b)).value
    assert np.abs(got - triple_loop_matmul(a, b)).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(nd.DimensionError):
        nd.matmul(nd.constant(np.ones((2, 3))), nd.constant(np.ones((2, 3))))


def test_elementwise_dispatch_and_scalar_cases():
    assert nd.elementwise("tanh", nd.constant(0.0)).value == 0.0
    assert nd.elementwise("sigmoid", nd.constant(0.0)).value == 0.5
    assert nd.elementwise("add", nd.constant(1.0), nd.constant([2.0, 3.0])).value.tolist() == [3.0, 4.0]
    with pytest.raises(nd.DomainError):
        nd.elementwise("cosh", nd.constant(0.0))


def test_elementwise_rejects_incompatible_shapes():
    with pytest.raises(nd.DimensionError):
        nd.add(nd.constant(np.ones(3)), nd.constant(np.ones(4)))


def reference_gelu(x):
    # independent scalar implementation of the tanh approximation
    inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + math.tanh(inner))


def test_gelu_scalar_reference():
    # validate the reference by finite differences of its own antiderivative
    # relationship: d/dx [x] consistency is not needed; direct value check
    got = nd.gelu(nd.constant(1.0)).value
    assert abs(float(got) - reference_gelu(1.0)) < 1e-9


def test_gelu_reference_is_consistent_by_finite_difference():
    # the reference's derivative by central differences matches the engine's vjp
    x = 0.7
    p = nd.param(np.array(x))
    out = nd.gelu(p)
    nd.backward(out)
    h = 1e-6
    num = (reference_gelu(x + h) - reference_gelu(x - h)) / (2 * h)
    assert abs(float(p.grad) - num) < 1e-8


def test_softmax_cross_entropy_uniform():
    logits = nd.constant(np.zeros((3, 5)))
    out = nd.softmax_cross_entropy(logits, np.array([0, 2, 4]))
    assert abs(float(out.value) - math.log(5)) < 1e-12


def test_softmax_cross_entropy_confident():
    out = nd.softmax_cross_entropy(nd.constant([[10.0, 0.0, 0.0]]), np.array([0]))
    expected = math.log(1.0 + 2.0 * math.exp(-10.0))
    assert abs(float(out.value) - expected) < 1e-12


def test_softmax_cross_entropy_label_range():
    with pytest.raises(nd.DomainError):
        nd.softmax_cross_entropy(nd.constant(np.zeros((2, 3))), np.array([0, 3]))


def test_masked_mean_pool_cases():
    x = np.arange(6, dtype=np.float64).reshape(1, 3, 2)
    ones = np.ones((1, 3))
    assert np.allclose(nd.masked_mean_pool(nd.constant(x), ones).value,
                       x.mean(axis=1))
    zeros = np.zeros((1, 3))
    assert np.array_equal(nd.masked_mean_pool(nd.constant(x), zeros).value,
                          np.zeros((1, 2)))
    x2 = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
    obs = np.array([[1.0, 0.0, 1.0]])
    assert np.allclose(nd.masked_mean_pool(nd.constant(x2), obs).value, [[2.0]])


def test_masked_mean_pool_rejects_nonbinary():
    with pytest.raises(nd.DomainError):
        nd.masked_mean_pool(nd.constant(np.ones((1, 2, 2))), np.full((1, 2), 0.5))


def test_backward_sum_gives_ones():
    p = nd.param(np.random.default_rng(0).normal(size=(3, 4)))
    nd.backward(nd.sum_(p))
    assert np.array_equal(p.grad, np.ones((3, 4)))


def test_backward_quadratic_gives_identity():
    p = nd.param(np.random.default_rng(1).normal(size=(5,)))
    nd.backward(nd.mul(nd.sum_(nd.mul(p, p)), 0.5))
    assert np.allclose(p.grad, p.value, atol=1e-12)


def test_backward_requires_scalar():
    p = nd.param(np.ones((2, 2)))
    with pytest.raises(nd.ContractError):
        nd.backward(nd.mul(p, 2.0))


def test_backward_shared_subexpression():
    # f = g(x) + g(x) must produce exactly twice g'(x)
    p = nd.param(np.array([0.3, -0.2]))
    g = nd.tanh(p)
    nd.backward(nd.sum_(nd.add(g, g)))
    expected = 2.0 * (1.0 - np.tanh(p.value) ** 2)
    assert np.allclose(p.grad, expected, atol=1e-12)


def test_backward_accumulates_across_calls():
    p = nd.param(np.array([1.0, 2.0]))
    loss = nd.sum_(nd.mul(p, p))
    nd.backward(loss)
    first = p.grad.copy()
    nd.backward(loss)
    assert np.allclose(p.grad, 2.0 * first, atol=1e-12)


def test_dropout_modes():
    x = nd.constant(np.ones((4, 4)))
    assert nd.dropout(x, 0.0, Rng(0), training=True) is x
    assert nd.dropout(x, 0.9, Rng(0), training=False) is x
    with pytest.raises(nd.DomainError):
        nd.dropout(x, 1.0, Rng(0))


def test_dropout_mean_preserving():
    x = nd.constant(np.ones(100_000))
    out = nd.dropout(x, 0.5, Rng(7).split("drop"), training=True)
    assert abs(out.value.mean() - 1.0) < 0.01


def test_optimizer_noop_without_gradient_or_decay():
    p = nd.param(np.array([1.0, -2.0]))
    opt = nd.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.value, [1.0, -2.0])
    assert opt.step_count == 1


def test_optimizer_converges_on_quadratic():
    p = nd.param(np.array(1.0))
    opt = nd.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(200):
        loss = nd.mul(nd.mul(p, p), 1.0)
        opt.zero_grad()
        nd.backward(loss)
        opt.step()
    assert abs(float(p.value)) < 0.05


def test_optimizer_decay_only_shrinks_exactly():
    p = nd.param(np.array([3.0, -4.0]))
    opt = nd.AdamW({"p": p}, lr=1e-3, weight_decay=1e-1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.value, np.array([3.0, -4.0]) * (1 - 1e-3 * 1e-1), atol=0, rtol=1e-15)


def test_optimizer_deterministic_trajectory():
    def run():
        rng = Rng(3)
        p = nd.param(rng.normal(size=(4, 4)))
        opt = nd.AdamW({"p": p}, lr=1e-2, weight_decay=1e-3)
        for i in range(20):
            loss = nd.sum_(nd.mul(p, nd.tanh(p)))
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
        return p.value.copy()

    assert np.array_equal(run(), run())


# finite-difference checks for every differentiable operation

RNG = np.random.default_rng(42)


@pytest.mark.parametrize("name,build,arrays", [
    ("matmul", lambda a, b: nd.sum_(nd.mul(nd.matmul(a, b), nd.matmul(a, b))),
     [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))]),
    ("add", lambda a, b: nd.sum_(nd.mul(nd.add(a, b), nd.add(a, b))),
     [RNG.normal(size=(3, 3)), RNG.normal(size=(3, 3))]),
    ("sub_scalar", lambda a: nd.sum_(nd.mul(nd.sub(a, 0.5), nd.sub(a, 0.5))),
     [RNG.normal(size=(4,))]),
    ("mul", lambda a, b: nd.sum_(nd.mul(a, b)),
     [RNG.normal(size=(2, 5)), RNG.normal(size=(2, 5))]),
    ("neg", lambda a: nd.sum_(nd.mul(nd.neg(a), nd.neg(a))), [RNG.normal(size=(3,))]),
    ("tanh", lambda a: nd.sum_(nd.tanh(a)), [RNG.normal(size=(3, 3))]),
    ("sigmoid", lambda a: nd.sum_(nd.sigmoid(a)), [RNG.normal(size=(7,))]),
    ("relu", lambda a: nd.sum_(nd.relu(a)), [RNG.normal(size=(9,)) + 0.2]),
    ("gelu", lambda a: nd.sum_(nd.gelu(a)), [RNG.normal(size=(4, 3))]),
    ("reshape", lambda a: nd.sum_(nd.mul(nd.reshape(a, (6,)), nd.reshape(a, (6,)))),
     [RNG.normal(size=(2, 3))]),
    ("transpose", lambda a: nd.sum_(nd.mul(nd.transpose(a), nd.transpose(a))),
     [RNG.normal(size=(2, 4))]),
    ("add_bias", lambda a, b: nd.sum_(nd.mul(nd.add_bias(a, b), nd.add_bias(a, b))),
     [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))]),
    ("sum_axis", lambda a: nd.sum_(nd.mul(nd.sum_(a, axis=1), nd.sum_(a, axis=1))),
     [RNG.normal(size=(3, 4))]),
    ("mean", lambda a: nd.mul(nd.mean_(nd.mul(a, a)), 3.0), [RNG.normal(size=(4, 2))]),
    ("concat0", lambda a, b: nd.sum_(nd.mul(nd.concat0([a, b]), nd.concat0([a, b]))),
     [RNG.normal(size=(2, 3)), RNG.normal(size=(4, 3))]),
    ("slice0", lambda a: nd.sum_(nd.mul(nd.slice0(a, 1, 3), nd.slice0(a, 1, 3))),
     [RNG.normal(size=(4, 2))]),
    ("l2_normalize", lambda a, _w=RNG.normal(size=(3, 4)): nd.sum_(
        nd.mul(nd.l2_normalize(a), nd.constant(_w))),
     [RNG.normal(size=(3, 4))]),
    ("clip_inside", lambda a: nd.sum_(nd.mul(nd.clip_(a, -10.0, 10.0), nd.clip_(a, -10.0, 10.0))),
     [RNG.normal(size=(5,))]),
    ("masked_mean_pool", lambda a: nd.sum_(nd.mul(
        nd.masked_mean_pool(a, np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])),
        nd.masked_mean_pool(a, np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])))),
     [RNG.normal(size=(2, 3, 4))]),
])
def test_gradients_match_finite_differences(name, build, arrays):
    gradcheck(build, arrays)


def test_softmax_cross_entropy_gradient():
    labels = np.array([0, 2, 1])
    gradcheck(lambda a: nd.softmax_cross_entropy(a, labels),
              [RNG.normal(size=(3, 4))], rtol=1e-6)


def test_dropout_gradient_fixed_mask():
    # recreating the stream on every call fixes the mask across perturbations
    def build(a):
        return nd.sum_(nd.mul(nd.dropout(a, 0.4, Rng(11).split("mask")),
                              nd.dropout(a, 0.4, Rng(11).split("mask"))))
    gradcheck(build, [RNG.normal(size=(4, 5))])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_matmul_oracle_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    got = nd.matmul(nd.constant(a), nd.constant(b)).value
    assert np.abs(got - triple_loop_matmul(a, b)).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10**6))
def test_masked_pool_matches_loop_oracle(b, t, h, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, t, h))
    obs = (rng.random((b, t)) < 0.6).astype(np.float64)
    got = nd.masked_mean_pool(nd.constant(x), obs).value
    for i in range(b):
        n_obs = obs[i].sum()
        want = (x[i] * obs[i][:, None]).sum(axis=0) / max(n_obs, nd.EPS_POOL)
        assert np.allclose(got[i], want, atol=1e-12)


def test_finite_check_flag():
    nd.set_check_finite(True)
    try:
        with pytest.raises(nd.ContractError):
            nd.mul(nd.constant(np.array([1e308])), nd.constant(np.array([1e308])))
    finally:
        nd.set_check_finite(False)


def test_node_grad_shape_matches_value():
    p = nd.param(np.ones((2, 3)))
    nd.backward(nd.sum_(nd.tanh(p)))
    assert p.grad.shape == p.value.shape
