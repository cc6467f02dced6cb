import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmm import tensor as T
from dmm.gradcheck import gradcheck
from dmm.tensor import GraphError, NonFiniteError, ShapeError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def triple_loop_linear(x, W, b):
    M, K = x.shape
    out = np.zeros((M, W.shape[1]))
    for i in range(M):
        for j in range(W.shape[1]):
            acc = b[j]
            for k in range(K):
                acc += x[i, k] * W[k, j]
            out[i, j] = acc
    return out


def naive_conv(x, w, b, stride, padding, groups):
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    og = O // groups
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, g * Cg : (g + 1) * Cg, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def test_linear_matches_triple_loop(rng):
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    got = T.linear(Tensor(x), Tensor(W), Tensor(b)).data
    np.testing.assert_allclose(got, triple_loop_linear(x, W, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "cin,cout,k,stride,padding,groups",
    [(3, 4, 3, 1, 1, 1), (4, 4, 3, 1, 1, 4), (4, 6, 2, 2, 0, 2), (3, 8, 4, 4, 0, 1), (6, 6, 3, 2, 1, 3)],
)
def test_conv2d_matches_naive_loops(rng, cin, cout, k, stride, padding, groups):
    x = rng.normal(size=(2, cin, 7, 8))
    w = rng.normal(size=(cout, cin // groups, k, k))
    b = rng.normal(size=cout)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, groups).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding, groups), rtol=0, atol=1e-12)


def test_conv2d_shape_errors(rng):
    x = Tensor(rng.normal(size=(1, 4, 5, 5)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(rng.normal(size=(4, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(rng.normal(size=(3, 2, 3, 3))), groups=2)
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(rng.normal(size=(2, 4, 7, 7))))


def test_broadcast_matches_explicit_tiling(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(4,)))
    w = rng.normal(size=(3, 4))
    T.backward(T.tsum((a * b) * Tensor(w)))
    tiled = leaf(np.tile(b.data, (3, 1)))
    a2 = leaf(a.data)
    T.backward(T.tsum((a2 * tiled) * Tensor(w)))
    np.testing.assert_allclose(a.grad, a2.grad, rtol=0, atol=1e-14)
    np.testing.assert_allclose(b.grad, tiled.grad.sum(axis=0), rtol=0, atol=1e-14)


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_softplus_at_zero_is_ln2():
    assert T.softplus(Tensor(np.zeros(1))).data[0] == pytest.approx(math.log(2), abs=1e-15)


def test_stable_activations_at_extremes():
    z = Tensor(np.array([-800.0, 800.0]))
    np.testing.assert_allclose(T.sigmoid(z).data, [0.0, 1.0], atol=1e-300)
    np.testing.assert_allclose(T.softplus(z).data, [0.0, 800.0], atol=1e-300)


def test_layernorm_matches_formula(rng):
    x = rng.normal(size=(2, 5, 3, 3))
    g, b = rng.normal(size=5), rng.normal(size=5)
    got = T.layernorm(Tensor(x), Tensor(g), Tensor(b)).data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    want = (x - mu) / np.sqrt(var + 1e-5) * g[None, :, None, None] + b[None, :, None, None]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_pool_max_routes_gradient_to_first_maximum():
    x = leaf([[1.0, 3.0, 3.0, 2.0]])
    T.backward(T.tsum(T.pool_max(x, (1,))))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_backward_needs_scalar_and_graph():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)
    with pytest.raises(GraphError):
        T.backward(T.tsum(Tensor(np.ones(2))))


def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0, -2.0])
    T.backward(T.tsum(x * x))
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_shared_subexpression_gets_summed_gradient():
    x = leaf([0.5, 1.5])
    y = T.exp(x)
    T.backward(T.tsum(y * y + y))
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data), rtol=1e-14)


def test_no_grad_builds_no_tape():
    x = leaf([1.0])
    with T.no_grad():
        y = T.exp(x)
    assert y.node is None and not y.requires_grad


def test_default_dtype_scope():
    with T.default_dtype(np.float32):
        assert T.get_default_dtype() == np.float32
    assert T.get_default_dtype() == np.float64


def test_parameters_walks_nested_and_deduplicates():
    from dataclasses import dataclass

    a, b = leaf([1.0]), leaf([2.0])

    @dataclass(eq=False)
    class Holder:
        first: Tensor
        rest: list

    assert T.parameters(Holder(a, [b, {"x": a}, Tensor(np.ones(1))])) == [a, b]


def test_take_accumulates_repeated_indices():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(T.take(x, np.array([0, 0, 2]), axis=0)))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_split_and_concat_round_trip(rng):
    x = Tensor(rng.normal(size=(2, 7)))
    parts = T.split(x, [3, 4], axis=1)
    np.testing.assert_array_equal(T.concat(parts, axis=1).data, x.data)
    with pytest.raises(ShapeError):
        T.split(x, [3, 3], axis=1)


def test_cross_entropy_matches_log_softmax(rng):
    z = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    want = -np.mean([z[i, labels[i]] - np.log(np.exp(z[i]).sum()) for i in range(5)])
    assert T.cross_entropy(Tensor(z), labels).data == pytest.approx(want, abs=1e-14)
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(z), np.array([0, 3, 1, 1, 0]))


def test_smooth_l1_values():
    pred = Tensor(np.array([0.0, 0.0, 0.0]))
    # |d| = 0.5 -> 0.125, |d| = 2 -> 1.5, |d| = 1 -> 0.5
    got = T.smooth_l1(pred, np.array([0.5, -2.0, 1.0])).data
    assert got == pytest.approx((0.125 + 1.5 + 0.5) / 3, abs=1e-15)
    assert T.smooth_l1(Tensor(np.zeros((0, 4))), np.zeros((0, 4))).data == 0.0


def test_bce_logits_matches_formula(rng):
    z = rng.normal(size=(2, 3))
    t = (rng.uniform(size=(2, 3)) < 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    want = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert T.bce_logits(Tensor(z), t).data == pytest.approx(want, abs=1e-14)


# -- randomized gradient checks, 20 instances per op family --------------------------

UNARY = {"exp": T.exp, "sigmoid": T.sigmoid, "relu": T.relu, "silu": T.silu, "softplus": T.softplus}
BINARY = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}


def _proj(y, seed):
    return T.tsum(y * Tensor(np.random.default_rng(seed).normal(size=y.shape)))


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck_20_instances(name):
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = leaf(r.normal(size=tuple(r.integers(1, 4, size=2))) * 2)
        rep = gradcheck(lambda x: _proj(UNARY[name](x), seed), [x])
        assert rep.passed, (seed, rep)


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_broadcast_gradcheck_20_instances(name):
    for seed in range(20):
        r = np.random.default_rng(seed)
        shape = tuple(int(v) for v in r.integers(1, 4, size=3))
        bshape = tuple(s if r.uniform() < 0.5 else 1 for s in shape)[1:]
        a = leaf(r.normal(size=shape))
        b = leaf(r.uniform(0.5, 2.0, size=bshape) * r.choice([-1, 1], size=bshape))
        rep = gradcheck(lambda a, b: _proj(BINARY[name](a, b), seed), [a, b])
        assert rep.passed, (seed, rep)


def test_conv2d_gradcheck_20_instances():
    for seed in range(20):
        r = np.random.default_rng(seed)
        groups = int(r.choice([1, 2]))
        cin, cout = 2 * groups, 2 * groups
        k = int(r.integers(1, 4))
        stride, padding = int(r.integers(1, 3)), int(r.integers(0, 2))
        x = leaf(r.normal(size=(1, cin, 5, 5)))
        w = leaf(r.normal(size=(cout, cin // groups, k, k)))
        b = leaf(r.normal(size=cout))
        rep = gradcheck(lambda x, w, b: _proj(T.conv2d(x, w, b, stride, padding, groups), seed), [x, w, b])
        assert rep.passed, (seed, rep)


def test_layernorm_linear_gradcheck_20_instances():
    for seed in range(20):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 6))
        x, g, b = leaf(r.normal(size=(3, n))), leaf(r.normal(size=n)), leaf(r.normal(size=n))
        W, c = leaf(r.normal(size=(n, 2))), leaf(r.normal(size=2))

        def f(x, g, b, W, c):
            return _proj(T.linear(T.layernorm(x, g, b, axis=1), W, c), seed)

        rep = gradcheck(f, [x, g, b, W, c])
        assert rep.passed, (seed, rep)


def test_recurrence_and_scan_core_gradcheck_20_instances():
    for seed in range(20):
        r = np.random.default_rng(seed)
        L = int(r.integers(1, 9))
        a, b = leaf(r.uniform(0.1, 1.0, size=(1, L, 2))), leaf(r.normal(size=(1, L, 2)))
        rep = gradcheck(lambda a, b: _proj(T.recurrence(a, b, axis=1), seed), [a, b])
        assert rep.passed, (seed, rep)
        x, dl = leaf(r.normal(size=(1, L, 2))), leaf(r.uniform(0.05, 1.0, size=(1, L, 2)))
        A = leaf(-r.uniform(0.2, 3.0, size=(2, 3)))
        B, C = leaf(r.normal(size=(1, L, 3))), leaf(r.normal(size=(1, L, 3)))
        rep = gradcheck(lambda *v: _proj(T.selective_scan_core(*v), seed), [x, dl, A, B, C])
        assert rep.passed, (seed, rep)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_permute_reverse_are_invertible(n, m, seed):
    x = np.random.default_rng(seed).normal(size=(n, m, 2))
    t = Tensor(x)
    back = T.permute(T.permute(t, (2, 0, 1)), (1, 2, 0))
    np.testing.assert_array_equal(back.data, x)
    np.testing.assert_array_equal(T.reverse(T.reverse(t, 1), 1).data, x)
