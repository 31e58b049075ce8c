"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays. Differentiable primitives record themselves on an
explicit :class:`Tape`; :func:`backward` replays the tape in reverse and
accumulates gradients into ``Tensor.grad``. One tape per forward pass, one
backward per tape; the caller zeroes parameter gradients between steps
(gradients accumulate otherwise, by design).

Everything runs in double precision. Broadcasting is supported only to the
extent a small transformer needs it (bias adds, mask adds, scalar ops).
"""

import threading

import numpy as np

__all__ = [
    "ShapeMismatchError",
    "TapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "matmul",
    "gather_rows",
    "pick",
    "narrow",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gelu",
    "sigmoid",
    "log",
    "log_sigmoid",
]


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class TapeError(RuntimeError):
    """Backward invoked on a detached or already-consumed tape."""


_STATE = threading.local()  # one active tape per thread, never shared


def active_tape():
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive ops (inputs, output, local-gradient closure).

    Ops append themselves in execution order, which is a topological order of
    the graph, so a single reverse sweep visits every node after all of its
    consumers.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """Dense float64 value; ``grad`` is a same-shape accumulator for trainable leaves."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; divide by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return _reduce(self, axis, np.sum, lambda g, shape, n: g)

    def mean(self, axis=None):
        return _reduce(self, axis, np.mean, lambda g, shape, n: g / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, grad_fn) -> Tensor:
    """Build an op output, recording it when a tape is active and any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
    out.grad = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(out, inputs, grad_fn))
    else:
        out.requires_grad = False
        out.tape = None
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every trainable tensor the scalar ``loss`` depends on.

    The tape is consumed: a second backward without a fresh forward is an error.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is not attached to a tape; run the forward under `with Tape():`")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward; re-run the forward pass")
    tape.consumed = True
    loss.grad = np.array(1.0)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:  # not an ancestor of the loss
            continue
        for t, g in zip(node.inputs, node.grad_fn(out_grad)):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


# -----------------------------------------------------------------------------
# Primitives
# -----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul requires >=2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(a.data @ b.data, (a, b), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _result(a.data[sl], (a,), grad_fn)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: table [V, D], integer ids of any shape -> ids.shape + (D,)."""
    ids = np.asarray(ids)

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _result(table.data[ids], (table,), grad_fn)


def pick(a: Tensor, idx) -> Tensor:
    """Select one element along the last axis per leading position (e.g. token log-probs)."""
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeMismatchError(
            f"pick: index shape {idx.shape} does not match leading shape of {a.data.shape}"
        )
    expanded = idx[..., None]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, g[..., None], axis=-1)
        return (ga,)

    return _result(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        # dx = inv * (gx_hat - mean(gx_hat) - xhat * mean(gx_hat * xhat))
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _result(gain.data * xhat + bias.data, (x, gain, bias), grad_fn)


def _check_softmax_axis(x, axis, opname):
    if x.data.shape[axis] == 0:
        raise ValueError(f"{opname} over an empty axis (shape {x.data.shape}, axis {axis})")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_softmax_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_softmax_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), grad_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU (smooth, so finite-difference checks stay tight)."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(0.5 * x.data * (1.0 + t), (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))), np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) in the overflow-safe softplus form: min(x, 0) - log1p(exp(-|x|))."""
    x = as_tensor(x)
    out = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))

    def grad_fn(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        z = -x.data
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g * s,)

    return _result(out, (x,), grad_fn)


def _reduce(x: Tensor, axis, np_fn, spread):
    if axis is None:
        n = x.data.size

        def grad_fn(g):
            return (np.broadcast_to(spread(g, x.data.shape, n), x.data.shape).copy(),)

        return _result(np_fn(x.data), (x,), grad_fn)

    n = x.data.shape[axis]

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(spread(g, x.data.shape, n), axis), x.data.shape).copy(),)

    return _result(np_fn(x.data, axis=axis), (x,), grad_fn)
