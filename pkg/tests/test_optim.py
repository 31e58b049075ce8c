import numpy as np
import pytest

from editlab.autodiff import Tensor
from editlab.optim import Adam


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])
    assert opt.t == 1


def test_first_step_is_bias_corrected():
    # w=0, grad=1, lr=0.1: m_hat=1, v_hat=1 -> step = lr/(1+eps) ~ 0.1
    p = Tensor(0.0, requires_grad=True)
    opt = Adam([("w", p)], lr=0.1)
    p.grad = np.array(1.0)
    opt.step()
    assert float(p.data) == pytest.approx(-0.1, rel=1e-6)


def test_identical_params_stay_identical():
    a = Tensor(np.full(4, 0.5), requires_grad=True)
    b = Tensor(np.full(4, 0.5), requires_grad=True)
    opt = Adam([("a", a), ("b", b)], lr=0.01)
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.normal(size=4)
        a.grad = g.copy()
        b.grad = g.copy()
        opt.step()
    assert np.array_equal(a.data, b.data)


def test_nonfinite_gradient_aborts_with_diagnostic():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([("layer.w", p)], lr=0.1)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError, match="layer.w"):
        opt.step()


def test_hand_computed_two_steps():
    # one scalar param, constant grad 2.0, lr=0.5
    p = Tensor(1.0, requires_grad=True)
    opt = Adam([("w", p)], lr=0.5, beta1=0.9, beta2=0.999, eps=1e-8)
    w = 1.0
    m = v = 0.0
    for t in range(1, 3):
        p.grad = np.array(2.0)
        opt.step()
        m = 0.9 * m + 0.1 * 2.0
        v = 0.999 * v + 0.001 * 4.0
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        w -= 0.5 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert float(p.data) == pytest.approx(w, abs=1e-12)
