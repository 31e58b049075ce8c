import math

import numpy as np
import pytest

from editlab.autodiff import (
    ShapeMismatchError,
    Tape,
    TapeError,
    Tensor,
    backward,
    gather_rows,
    gelu,
    layer_norm,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    narrow,
    pick,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

from util import check_op_gradient, fd_grad, rel_err


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    out = matmul(Tensor(np.eye(3)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_softmax_uniform():
    out = softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(1).normal(size=(5, 7)) * 10)
    s = softmax(x).data
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(np.random.default_rng(2).normal(size=8))
    direct = log_softmax(x).data
    composed = np.log(softmax(x).data)
    assert np.max(np.abs(direct - composed)) <= 1e-12


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        loss = x * x
    backward(loss)
    assert x.grad == pytest.approx(6.0, abs=1e-12)


def test_backward_sum_of_softmax_is_zero_gradient():
    x = Tensor(np.random.default_rng(3).normal(size=6), requires_grad=True)
    with Tape():
        loss = softmax(x).sum()
    backward(loss)
    assert np.max(np.abs(x.grad)) <= 1e-12


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_backward_detached_tape():
    x = Tensor(2.0, requires_grad=True)
    y = x * x  # no tape active
    with pytest.raises(TapeError, match="not attached"):
        backward(y)


def test_backward_twice_is_an_error():
    x = Tensor(2.0, requires_grad=True)
    with Tape():
        y = x * x
    backward(y)
    with pytest.raises(TapeError, match="consumed"):
        backward(y)


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(TapeError, match="already active"):
            with Tape():
                pass


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeMismatchError, match=r"\(2,\).*\(3,\)"):
        Tensor(np.ones(2)) + Tensor(np.ones(3))


def test_softmax_empty_axis_is_error():
    with pytest.raises(ValueError, match="empty axis"):
        softmax(Tensor(np.ones((3, 0))))


def test_gradient_accumulates_across_uses():
    x = Tensor(2.0, requires_grad=True)
    with Tape():
        loss = x * x + x * 3.0
    backward(loss)
    assert x.grad == pytest.approx(7.0, abs=1e-12)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        with Tape():
            loss = (softmax(matmul(x, w)) * Tensor(rng.normal(size=(4, 3)))).sum()
        backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


# -- finite-difference checks for every differentiable primitive ---------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fd_add_broadcast(seed):
    check_op_gradient(lambda a, b: a + b, [(4, 5), (5,)], seed=seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_fd_mul(seed):
    check_op_gradient(lambda a, b: a * b, [(3, 4), (3, 4)], seed=seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_fd_matmul_batched(seed):
    check_op_gradient(matmul, [(2, 3, 4), (4, 5)], seed=seed)


def test_fd_reshape_transpose_narrow():
    check_op_gradient(lambda a: reshape(a, (6, 2)), [(3, 4)])
    check_op_gradient(lambda a: transpose(a, (1, 0, 2)), [(2, 3, 4)])
    check_op_gradient(lambda a: narrow(a, 0, 1, 2), [(5, 3)])


def test_fd_layer_norm():
    check_op_gradient(layer_norm, [(4, 8), (8,), (8,)], seed=3)


@pytest.mark.parametrize("op", [softmax, log_softmax, gelu, sigmoid, log_sigmoid])
def test_fd_unary(op):
    check_op_gradient(op, [(4, 9)], seed=5)


def test_fd_log():
    check_op_gradient(log, [(4, 4)], seed=6, positive=True)


def test_fd_reductions():
    check_op_gradient(lambda a: a.sum() * 1.0, [(3, 5)])
    check_op_gradient(lambda a: a.mean(axis=1), [(3, 5)])


def test_fd_gather_rows():
    ids = np.array([1, 0, 2, 1])
    check_op_gradient(lambda t: gather_rows(t, ids), [(3, 4)], seed=7)


def test_fd_pick():
    idx = np.array([2, 0, 1])
    check_op_gradient(lambda t: pick(t, idx), [(3, 4)], seed=8)


def test_pick_scatter_cancels_exactly():
    # two picks of the same element contribute +g and -g: exact zero
    x = Tensor(np.random.default_rng(9).normal(size=(3, 4)), requires_grad=True)
    idx = np.array([1, 2, 0])
    with Tape():
        loss = (pick(x, idx) - pick(x, idx)).sum()
    backward(loss)
    assert loss.item() == 0.0
    assert np.all(x.grad == 0.0)


def test_log_sigmoid_stable_far_from_zero():
    out = log_sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    assert out[0] == pytest.approx(-800.0)
    assert out[1] == pytest.approx(-math.log(2.0), abs=1e-15)
    assert out[2] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(out))
