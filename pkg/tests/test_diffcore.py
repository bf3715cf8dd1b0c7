import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repforget.diffcore import (SGD, AdamW, GraphError, NonFiniteError, ShapeError, Tensor, backward,
                                finite_diff_check, make_optimizer, no_grad, ops, stream)


def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# ------------------------------------------------------------------ forward

def test_identity_affine():
    x = Tensor([[1.0, 2.0]])
    out = ops.affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_l2_normalize_345():
    np.testing.assert_allclose(ops.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)


def test_nonfinite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_nonfinite_after_op_names_the_op():
    with pytest.raises(NonFiniteError, match="exp"):
        ops.exp(Tensor([1000.0]))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_softmax_ce_errors():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(Tensor(np.zeros((0, 3))), np.array([], dtype=int))


# ----------------------------------------------------------------- backward

def test_grad_of_sum_of_squares():
    x = param([1.0, 2.0, 3.0])
    backward(ops.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_unreached_param_gets_zero():
    x, p = param([1.0, 2.0]), param([5.0])
    grads = backward(ops.sum(x * x), [x, p])
    np.testing.assert_array_equal(grads[1], [0.0])


def test_softmax_ce_gradient_uniform_logits():
    z = param([[0.0, 0.0]])
    backward(ops.softmax_cross_entropy(z, np.array([0])))
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]], atol=1e-15)


def test_backward_requires_scalar():
    x = param([1.0, 2.0])
    with pytest.raises(GraphError):
        backward(x * x)


def test_backward_twice_is_an_error():
    x = param([1.0])
    loss = ops.sum(x * x)
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_without_graph_is_an_error():
    x = param([1.0])
    with no_grad():
        loss = ops.sum(x * x)
    with pytest.raises(GraphError):
        backward(loss)


def test_shared_subexpression_accumulates():
    # y = x*x used twice: d/dx (y + y) = 4x
    x = param([3.0])
    y = x * x
    backward(ops.sum(y + y))
    np.testing.assert_allclose(x.grad, [12.0])


def test_max_pool_routes_gradient_to_first_max():
    x = param(np.array([[[[1.0, 1.0], [0.0, 0.0]]]]))
    backward(ops.sum(ops.max_pool2d(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_conv2d_matches_direct_loop():
    rng = stream(0, "conv")
    x = rng.standard_normal((2, 3, 5, 5))
    W = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in ((1, 1), (2, 0), (2, 1)):
        out = ops.conv2d(Tensor(x), Tensor(W), Tensor(b), stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (xp.shape[2] - 3) // stride + 1
        ref = np.zeros((2, 4, ho, ho))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(ho):
                        patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                        ref[n, o, i, j] = np.sum(patch * W[o]) + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------- finite differences

def test_fd_quadratic_exact():
    p = param([3.0])
    assert finite_diff_check(lambda: ops.sum(p * p), [p], epsilon=1e-5) <= 1e-6


def test_fd_dead_relu_region():
    p = param([-2.0, -1.5])
    err = finite_diff_check(lambda: ops.sum(ops.relu(p)) + ops.sum(p * 0.0), [p], epsilon=1e-5)
    assert err <= 1e-8


def test_fd_epsilon_range():
    p = param([1.0])
    for eps in (0.0, 0.02):
        with pytest.raises(ValueError):
            finite_diff_check(lambda: ops.sum(p * p), [p], epsilon=eps)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fd_conv_pool_stack(seed):
    rng = stream(seed, "fd-conv")
    x = Tensor(rng.standard_normal((2, 2, 6, 6)))
    W = param(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = param(rng.standard_normal(3) * 0.1)
    V = param(rng.standard_normal((3, 2)))
    y = rng.integers(0, 2, size=2)

    def loss():
        h = ops.max_pool2d(ops.relu(ops.conv2d(x, W, b, stride=1, padding=1)), 2)
        return ops.softmax_cross_entropy(ops.matmul(ops.mean_pool2d(h), V), y)

    assert finite_diff_check(loss, [W, b, V], epsilon=1e-6) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fd_composite_ops(seed):
    rng = stream(seed, "fd-composite")
    a = param(rng.standard_normal((3, 4)))
    c = param(rng.uniform(0.5, 2.0, (3, 4)))

    def loss():
        z = ops.concat([ops.l2_normalize(a), ops.log(c)], axis=1)
        z = ops.reshape(ops.transpose(z), (4, 6))
        picked = ops.take(ops.log_softmax(z), np.array([0, 0, 3, 1]))
        return ops.mean(picked * ops.exp(ops.take(z, np.array([1, 2, 2, 0])) * 0.3))

    assert finite_diff_check(loss, [a, c], epsilon=1e-6) <= 1e-4


# ---------------------------------------------------------------- optimizers

def test_sgd_zero_grad_zero_decay_is_noop():
    for opt_kind in ("sgd", "adamw"):
        p = param([1.0, -2.0])
        opt = make_optimizer(opt_kind, [p], lr=0.1, momentum=0.9, weight_decay=0.0)
        p.grad = np.zeros(2)
        for _ in range(3):
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_plain_step():
    p = param([1.0])
    opt = SGD([p], lr=0.1)
    p.grad = np.array([2.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.8], atol=1e-15)


def test_momentum_zero_equals_gradient_descent():
    rng = stream(3, "gd")
    p1, p2 = param(rng.standard_normal(5)), None
    p2 = param(p1.data.copy())
    opt = SGD([p1], lr=0.05, momentum=0.0)
    for _ in range(10):
        g = 2 * p1.data
        p1.grad = g.copy()
        opt.step()
        p2.data = p2.data - 0.05 * (2 * p2.data)
    np.testing.assert_array_equal(p1.data, p2.data)


def test_adamw_first_step_magnitude():
    p = param([0.0, 0.0])
    opt = AdamW([p], lr=0.01)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    # the bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_adamw_decay_is_decoupled():
    p = param([2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_optimizer_errors():
    p = param([1.0])
    with pytest.raises(ValueError):
        SGD([p], lr=0.1, momentum=-0.1)
    with pytest.raises(ValueError):
        SGD([p], lr=0.0)
    with pytest.raises(ValueError):
        AdamW([p], lr=0.1, weight_decay=-1.0)
    opt = SGD([p], lr=0.1)
    p.grad = np.zeros(3)
    with pytest.raises(ValueError):
        opt.step()


def test_optimizer_step_counter_and_buffers():
    p = param(np.ones((2, 3)))
    opt = AdamW([p], lr=0.1)
    for k in range(1, 4):
        p.grad = np.ones((2, 3))
        opt.step()
        assert opt.state.step == k
    assert opt.state.buffers[0]["m"].shape == (2, 3)


# ---------------------------------------------------------------------- rng

def test_stream_reproducible_and_path_sensitive():
    a = stream(7, "x", 1).standard_normal(4)
    b = stream(7, "x", 1).standard_normal(4)
    c = stream(7, "x", 2).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
