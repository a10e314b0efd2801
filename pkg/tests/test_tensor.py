import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gloriprobe import tensor as T
from gloriprobe.tensor import GradTape, NumericError, ShapeError, Tensor, backward, grad_check

RTOL = 1e-4


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------- examples


def test_matmul_examples():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])
    z = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).random((3, 4))))
    np.testing.assert_array_equal(z.data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_linear_examples():
    x = Tensor([[1.0, -2.0], [3.0, 0.5]])
    np.testing.assert_array_equal(T.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    y = T.linear(Tensor(np.zeros((3, 4))), Tensor(np.ones((4, 2))), Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]] * 3)
    y = T.linear(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(y.data, [[2.0, 2.0]])
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_activation_examples():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert T.tanh(Tensor(0.0)).item() == 0.0
    assert T.exp(Tensor(0.0)).item() == 1.0
    assert T.exp(T.tanh(Tensor(50.0))).item() == pytest.approx(math.e, abs=1e-12)
    with pytest.raises(NumericError):
        T.exp(Tensor([800.0]))
    with pytest.raises(ValueError):
        T.activation("gelu", Tensor([1.0]))


def test_softmax_examples():
    p = T.softmax_with_temperature(Tensor([[0.0, 0.0, 0.0]]), Tensor([1.0]))
    np.testing.assert_allclose(p.data, [[1 / 3] * 3], atol=1e-15)
    p = T.softmax_with_temperature(Tensor([[math.log(2), 0.0]]), Tensor([0.5]))
    np.testing.assert_allclose(p.data, [[0.8, 0.2]], atol=1e-15)
    p = T.softmax_with_temperature(Tensor([[1.0, 3.0, 2.0]]), Tensor([1e-3]))
    np.testing.assert_allclose(p.data, [[0.0, 1.0, 0.0]], atol=1e-12)
    with pytest.raises(NumericError):
        T.softmax_with_temperature(Tensor([[1.0, 2.0]]), Tensor([0.0]))
    with pytest.raises(ShapeError):
        T.softmax_with_temperature(Tensor([[1.0, 2.0]]), Tensor([1.0, 1.0]))


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), ones, zeros)
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)
    out = T.layer_norm(Tensor([[7.0, 7.0]]), Tensor(np.ones(2)), Tensor([5.0, 5.0]))
    np.testing.assert_array_equal(out.data, [[5.0, 5.0]])


def test_pool_and_upsample_examples():
    c = Tensor(np.full((4, 4, 2), 3.5))
    np.testing.assert_array_equal(T.avg_pool2d(c, 2).data, np.full((2, 2, 2), 3.5))
    g = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert T.avg_pool2d(g, 2).data.item() == 2.5
    x = np.random.default_rng(1).random((4, 6, 3))
    np.testing.assert_array_equal(T.avg_pool2d(Tensor(x), 1).data, x)
    np.testing.assert_array_equal(T.upsample_nearest(Tensor(x), 1).data, x)
    up = T.upsample_nearest(Tensor([[[2.5]]]), 3)
    np.testing.assert_array_equal(up.data, np.full((3, 3, 1), 2.5))
    with pytest.raises(ShapeError):
        T.avg_pool2d(Tensor(np.ones((5, 4, 1))), 2)


def test_concat_examples():
    x = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(T.concat([x]).data, x.data)
    np.testing.assert_array_equal(T.concat([x, Tensor([3.0])], axis=0).data, [1.0, 2.0, 3.0])
    out = T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
    assert out.shape == (2, 8)
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_bce_examples():
    assert T.bce_with_logits(Tensor([0.0]), [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert T.bce_with_logits(Tensor([50.0]), [1]).item() == pytest.approx(0.0, abs=1e-20)
    # ln(1 + e) evaluated directly
    assert T.bce_with_logits(Tensor([1.0]), [0]).item() == pytest.approx(1.3132616875182228, abs=1e-12)
    with pytest.raises(ValueError):
        T.bce_with_logits(Tensor([0.0]), [2])


def test_backward_examples():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = T.sum_(T.mul(x, x))
    backward(tape, y)
    assert x.grad.tolist() == [6.0]

    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = T.sum_(T.mul(Tensor([0.0]), x))
    backward(tape, y)
    assert x.grad.tolist() == [0.0]

    with GradTape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ShapeError):
        backward(tape, T.concat([y, y]))


def test_fanout_accumulates():
    x = Tensor([2.0], requires_grad=True)
    with GradTape() as tape:
        y = T.sum_(T.add(T.mul(x, x), T.scale(x, 3.0)))
    backward(tape, y)
    assert x.grad.tolist() == [7.0]


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    W = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    x = rand(rng, 7, 5)
    grads = []
    for _ in range(2):
        with GradTape() as tape:
            loss = T.bce_with_logits(T.sum_(T.tanh(T.linear(x, W)), axis=1), np.arange(7) % 2)
        backward(tape, loss)
        grads.append(W.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_grad_check_exact_for_affine():
    rng = np.random.default_rng(3)
    W, b = rand(rng, 3, 2), rand(rng, 2)
    # central differences carry no truncation error here; only rounding of
    # f(x +- h), which scales with |f|, so keep the inputs O(1)
    x = Tensor([[0.5, 0.25, 1.0], [-0.75, 0.125, 0.5]])
    err = grad_check(lambda W, b: T.sum_(T.linear(x, W, b)), [W, b])
    assert err < 1e-10


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: T.sum_(x), Tensor([1.0]), h=0.0)


# --------------------------------------------------- FD checks, 3 shapes each

SHAPES = [(2, 3), (4, 5), (1, 7)]


def _weights(rng, shape):
    # random projection so the scalar loss depends on every output entry
    return Tensor(rng.standard_normal(shape))


def _fd(f, inputs):
    return grad_check(f, inputs, h=1e-5)


@pytest.mark.parametrize("m,k,n", [(2, 3, 4), (5, 1, 2), (3, 4, 3)])
def test_fd_matmul(m, k, n):
    rng = np.random.default_rng(m * 10 + n)
    c = _weights(rng, (m, n))
    assert _fd(lambda a, b: T.sum_(T.mul(T.matmul(a, b), c)), [rand(rng, m, k), rand(rng, k, n)]) < RTOL


def test_fd_matmul_batched_broadcast():
    rng = np.random.default_rng(5)
    c = _weights(rng, (2, 3, 4, 5))
    a, b = rand(rng, 3, 4, 2), rand(rng, 2, 3, 2, 5)
    assert _fd(lambda a, b: T.sum_(T.mul(T.matmul(a, b), c)), [a, b]) < RTOL


@pytest.mark.parametrize("lead,d_in,d_out", [((3,), 4, 2), ((2, 3), 2, 5), ((1,), 6, 1)])
def test_fd_linear(lead, d_in, d_out):
    rng = np.random.default_rng(d_in)
    c = _weights(rng, (*lead, d_out))
    f = lambda x, W, b: T.sum_(T.mul(T.linear(x, W, b), c))
    assert _fd(f, [rand(rng, *lead, d_in), rand(rng, d_in, d_out), rand(rng, d_out)]) < RTOL


@pytest.mark.parametrize("kind", ["relu", "tanh", "exp"])
@pytest.mark.parametrize("shape", SHAPES)
def test_fd_activation(kind, shape):
    rng = np.random.default_rng(len(shape) + shape[0])
    c = _weights(rng, shape)
    x = rand(rng, *shape)
    if kind == "relu":  # keep away from the kink
        x.data[np.abs(x.data) < 1e-3] += 0.1
    assert _fd(lambda x: T.sum_(T.mul(T.activation(kind, x), c)), x) < RTOL


@pytest.mark.parametrize("shape", [(2, 3), (4, 6), (2, 3, 5)])
def test_fd_softmax_with_temperature(shape):
    rng = np.random.default_rng(shape[-1])
    c = _weights(rng, shape)
    tau = Tensor(rng.uniform(0.4, 2.5, size=shape[:-1]))
    f = lambda l, t: T.sum_(T.mul(T.softmax_with_temperature(l, t), c))
    assert _fd(f, [rand(rng, *shape), tau]) < 1e-6


@pytest.mark.parametrize("shape", [(3, 4), (2, 2, 5), (1, 8)])
def test_fd_layer_norm(shape):
    rng = np.random.default_rng(sum(shape))
    c = _weights(rng, shape)
    d = shape[-1]
    f = lambda x, g, b: T.sum_(T.mul(T.layer_norm(x, g, b), c))
    assert _fd(f, [rand(rng, *shape), rand(rng, d), rand(rng, d)]) < RTOL


@pytest.mark.parametrize("shape,k", [((4, 4, 2), 2), ((2, 6, 6, 3), 3), ((8, 4, 1), 4)])
def test_fd_avg_pool2d(shape, k):
    rng = np.random.default_rng(k)
    out_shape = (*shape[:-3], shape[-3] // k, shape[-2] // k, shape[-1])
    c = _weights(rng, out_shape)
    assert _fd(lambda x: T.sum_(T.mul(T.avg_pool2d(x, k), c)), rand(rng, *shape)) < RTOL


@pytest.mark.parametrize("shape,f", [((2, 2, 3), 2), ((3, 1, 2, 1), 3), ((1, 2, 2), 4)])
def test_fd_upsample_nearest(shape, f):
    rng = np.random.default_rng(f)
    out_shape = (*shape[:-3], shape[-3] * f, shape[-2] * f, shape[-1])
    c = _weights(rng, out_shape)
    assert _fd(lambda x: T.sum_(T.mul(T.upsample_nearest(x, f), c)), rand(rng, *shape)) < RTOL


@pytest.mark.parametrize("shapes,axis", [([(2, 3), (2, 1)], 1), ([(1, 4), (3, 4), (2, 4)], 0), ([(2, 2, 2), (2, 2, 3)], -1)])
def test_fd_concat(shapes, axis):
    rng = np.random.default_rng(len(shapes))
    parts = [rand(rng, *s) for s in shapes]
    out_shape = np.concatenate([p.data for p in parts], axis=axis).shape
    c = _weights(rng, out_shape)
    assert _fd(lambda *ps: T.sum_(T.mul(T.concat(ps, axis=axis), c)), parts) < RTOL


@pytest.mark.parametrize("n", [1, 5, 12])
def test_fd_bce(n):
    rng = np.random.default_rng(n)
    y = rng.integers(0, 2, size=n)
    assert _fd(lambda z: T.bce_with_logits(z, y), rand(rng, n) * 3) < RTOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_layout_ops(shape):
    rng = np.random.default_rng(shape[1])
    x = rand(rng, *shape)
    c = _weights(rng, (shape[1], shape[0]))
    f = lambda x: T.sum_(T.mul(T.transpose(T.reshape(T.scale(x, 1.5), shape), (1, 0)), c))
    assert _fd(f, x) < RTOL
    c2 = _weights(rng, (shape[0], 3, shape[1]))
    assert _fd(lambda x: T.sum_(T.mul(T.expand(x, 1, 3), c2)), x) < RTOL
    assert _fd(lambda x: T.sum_(T.mul(T.mean(x, axis=0), Tensor(np.arange(shape[1]) + 1.0))), x) < RTOL


@pytest.mark.parametrize("shape", SHAPES)
def test_fd_add_mul_bias_broadcast(shape):
    rng = np.random.default_rng(shape[0] * 3)
    c = _weights(rng, shape)
    f = lambda a, b: T.sum_(T.mul(T.mul(T.add(a, b), b), c))
    assert _fd(f, [rand(rng, *shape), rand(rng, shape[-1])]) < RTOL


# ---------------------------------------------------------------- properties

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 6), elements=finite), st.floats(0.05, 20), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(logits, tau, shift):
    t = Tensor(np.full(3, tau))
    p = T.softmax_with_temperature(Tensor(logits), t).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    q = T.softmax_with_temperature(Tensor(logits + shift), t).data
    np.testing.assert_allclose(p, q, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), st.integers(1, 4))
def test_pool_after_upsample_is_identity(x, k):
    back = T.avg_pool2d(T.upsample_nearest(Tensor(x), k), k).data
    # mean of k*k equal copies may round once: relative error <= 2**-52
    np.testing.assert_allclose(back, x, atol=1e-15, rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 16), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_standardises(x):
    # var/(var+eps) is within 1e-6 of 1 once var >= 10 at eps=1e-5
    x = x[x.var(axis=1) > 10.0]
    if not len(x):
        return
    out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6, rtol=0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)), arrays(np.int8, 8, elements=st.integers(0, 1)))
def test_bce_finite_for_huge_logits(z, y):
    assert np.isfinite(T.bce_with_logits(Tensor(z), y).item())


def test_no_tape_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad
    with GradTape() as tape:
        T.mul(Tensor([1.0]), Tensor([2.0]))
    assert len(tape) == 0
