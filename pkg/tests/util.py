"""Shared test oracles: finite differences and micro fact worlds."""

import numpy as np

from editlab.autodiff import Tape, Tensor, backward


def fd_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative error between two gradient vectors, norm-based."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def autodiff_grad(make_loss, params: list[Tensor]) -> list[np.ndarray]:
    """Run one forward/backward and return copies of the parameter gradients."""
    for p in params:
        p.zero_grad()
    with Tape():
        loss = make_loss()
    backward(loss)
    return [p.grad.copy() for p in params]


def check_op_gradient(op, shapes, seed=0, tol=1e-5, h=1e-5, positive=False):
    """Compare autodiff and central-difference gradients of `op` over random inputs.

    The op output is reduced to a scalar through a fixed random weighting so
    every output component participates.
    """
    rng = np.random.default_rng(seed)
    args = [rng.normal(size=s) for s in shapes]
    if positive:
        args = [np.abs(a) + 0.5 for a in args]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in args]
    out_shape = op(*[Tensor(a) for a in args]).data.shape
    w = rng.normal(size=out_shape)

    with Tape():
        loss = (op(*tensors) * Tensor(w)).sum()
    backward(loss)

    for i, a in enumerate(args):
        def scalar_fn(x, i=i):
            inputs = [Tensor(args[j]) if j != i else Tensor(x) for j in range(len(args))]
            return float((op(*inputs).data * w).sum())

        fd = fd_grad(scalar_fn, a.copy(), h=h)
        err = rel_err(tensors[i].grad, fd)
        assert err <= tol, f"{op.__name__} arg {i}: rel err {err:.2e} > {tol}"
