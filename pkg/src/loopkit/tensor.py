"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every tracked operation in execution order; because the
record is append-only, reverse insertion order is already a valid topological
order for the backward pass.  Gradients are accumulated into ``.grad`` on
every leaf tensor that has ``requires_grad`` set.

Design constraints honoured throughout:

- everything is float64,
- reductions use numpy's fixed pairwise order, so repeated runs on identical
  inputs are bit-identical,
- ``max``/``sort`` tie-breaking is deterministic (first maximal index, stable
  sort).

Forward math on untracked tensors never touches the tape, so inference runs
with no bookkeeping overhead.
"""

from __future__ import annotations

import threading

import numpy as np

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input outside an operation's mathematical domain (e.g. log of a negative)."""


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    """One recorded operation: inputs, a backward rule, and the produced tensor."""

    __slots__ = ("op", "inputs", "backward_fn", "out")

    def __init__(self, op, inputs, backward_fn, out):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out = out


class Tape:
    """Append-only operation record for one forward/backward cycle.

    A tape and the tensors recorded on it form a single-threaded unit; do not
    share a live tape across threads.  Independent tapes are safe to run
    concurrently.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def append(self, node):
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf on this tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None:
            return
        if self._consumed:
            raise RuntimeError("tape already consumed; call reset() before reuse")
        self._consumed = True

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for tensor, g in node.backward_fn(g_out):
                if g is None:
                    continue
                if tensor.node is None:
                    if tensor.requires_grad:
                        if tensor.grad is None:
                            tensor.grad = np.array(g)
                        else:
                            tensor.grad += g
                else:
                    key = id(tensor)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g


class Tensor:
    """Dense multi-dimensional array of float64 with an optional tape node."""

    __slots__ = ("data", "requires_grad", "node", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() requires an active Tape")
        tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic --------------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method sugar ------------------------------------------------------

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    if active_tape() is None:
        return False
    return any(t.requires_grad or t.node is not None for t in tensors)


def _record(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    node = Node(op, inputs, backward_fn, out)
    out.node = node
    active_tape().append(node)
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# binary elementwise ----------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not _tracked(a, b):
        return Tensor(out)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return _record("add", (a, b), out, backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    if not _tracked(a, b):
        return Tensor(out)

    def backward(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape)))

    return _record("sub", (a, b), out, backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not _tracked(a, b):
        return Tensor(out)

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return _record("mul", (a, b), out, backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    if not _tracked(a, b):
        return Tensor(out)

    def backward(g):
        gb = g / b.data
        return ((a, _unbroadcast(gb, a.data.shape)),
                (b, _unbroadcast(-gb * out, b.data.shape)))

    return _record("div", (a, b), out, backward)


def neg(a):
    a = as_tensor(a)
    out = -a.data
    if not _tracked(a):
        return Tensor(out)
    return _record("neg", (a,), out, lambda g: ((a, -g),))


# matmul ----------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batching semantics on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(out)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.data.shape)),
                (b, _unbroadcast(gb, b.data.shape)))

    return _record("matmul", (a, b), out, backward)


def affine(x, w, b):
    """Fused x @ w + b with the bias added in place on the GEMM output."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"affine inner dimensions disagree: "
                         f"{x.shape} @ {w.shape}")
    out = x.data @ w.data
    out += b.data
    if not _tracked(x, w, b):
        return Tensor(out)

    def backward(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = _unbroadcast(g, b.data.shape)
        return ((x, gx), (w, gw), (b, gb))

    return _record("affine", (x, w, b), out, backward)


# unary elementwise -----------------------------------------------------


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        return ((a, g * (a.data > 0.0)),)

    return _record("relu", (a,), out, backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        return ((a, g * out),)

    return _record("exp", (a,), out, backward)


def log(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("log of negative input")
    out = np.log(a.data)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        return ((a, g / a.data),)

    return _record("log", (a,), out, backward)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        return ((a, g * (0.5 / out)),)

    return _record("sqrt", (a,), out, backward)


def square(a):
    a = as_tensor(a)
    out = a.data * a.data
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        return ((a, g * (2.0 * a.data)),)

    return _record("square", (a,), out, backward)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient is 1 strictly inside the interval, 0 outside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        inside = (a.data > lo) & (a.data < hi)
        return ((a, g * inside),)

    return _record("clamp", (a,), out, backward)


# reductions ------------------------------------------------------------


def _check_axis(a, axis):
    if axis is None:
        if a.size == 0:
            raise ShapeError("reduction over an empty tensor")
        return
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.ndim}")
    if a.data.shape[axis] == 0:
        raise ShapeError(f"reduction over empty axis {axis}")


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    _check_axis(a, axis)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape)),)

    return _record("sum", (a,), out, backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    _check_axis(a, axis)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(out)
    count = a.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g / count, a.data.shape)),)

    return _record("mean", (a,), out, backward)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; backward routes gradient to the first maximal index."""
    a = as_tensor(a)
    _check_axis(a, axis)
    out = a.data.max(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        ga = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.data.shape)
            ga[idx] = np.asarray(g).item()
        else:
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(ga, idx, gg, axis=axis)
        return ((a, ga),)

    return _record("max", (a,), out, backward)


# shape ops -------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    if not _tracked(a):
        return Tensor(out)
    old = a.data.shape

    def backward(g):
        return ((a, g.reshape(old)),)

    return _record("reshape", (a,), out, backward)


def transpose(a, axes):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if not _tracked(a):
        return Tensor(out)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((a, np.transpose(g, inverse)),)

    return _record("transpose", (a,), out, backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(out)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return _record("concat", tuple(tensors), out, backward)


def gather_lastaxis(a, idx):
    """out[..., j] = a[..., idx[..., j]] for a constant integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=-1)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        ga = np.zeros_like(a.data)
        flat_idx = np.broadcast_to(idx, g.shape)
        np.add.at(
            ga.reshape(-1, ga.shape[-1]),
            (np.arange(ga.size // ga.shape[-1])[:, None],
             flat_idx.reshape(-1, flat_idx.shape[-1])),
            g.reshape(-1, g.shape[-1]),
        )
        return ((a, ga),)

    return _record("gather", (a,), out, backward)


def sort_lastaxis(a):
    """Ascending stable sort along the last axis.

    Returns the sorted tensor and the permutation applied (constant for the
    backward pass: output gradients are scattered back through it).
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.data.shape[-1] < 1:
        raise ShapeError("sort_lastaxis needs a non-empty last axis")
    perm = np.argsort(a.data, axis=-1, kind="stable")
    out = np.take_along_axis(a.data, perm, axis=-1)
    if not _tracked(a):
        return Tensor(out), perm

    def backward(g):
        ga = np.empty_like(a.data)
        np.put_along_axis(ga, perm, g, axis=-1)
        return ((a, ga),)

    return _record("sort", (a,), out, backward), perm


# fused neural ops ------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stabilized softmax along ``axis`` (max subtraction)."""
    a = as_tensor(a)
    out = np.subtract(a.data, a.data.max(axis=axis, keepdims=True))
    np.exp(out, out=out)
    np.divide(out, out.sum(axis=axis, keepdims=True), out=out)
    if not _tracked(a):
        return Tensor(out)

    def backward(g):
        ga = g * out
        dot = ga.sum(axis=axis, keepdims=True)
        np.subtract(g, dot, out=ga)
        np.multiply(ga, out, out=ga)
        return ((a, ga),)

    return _record("softmax", (a,), out, backward)


def layernorm(a, gain, bias, eps=LAYERNORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    xhat = np.subtract(a.data, a.data.mean(axis=-1, keepdims=True))
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / a.data.shape[-1]
    inv = 1.0 / np.sqrt(var + eps)
    np.multiply(xhat, inv, out=xhat)
    out = xhat * gain.data
    out += bias.data
    if not _tracked(a, gain, bias):
        return Tensor(out)

    def backward(g):
        g_gain = _unbroadcast(g * xhat, gain.data.shape)
        g_bias = _unbroadcast(g, bias.data.shape)
        gx = g * gain.data
        # xhat has zero mean per row, so centering gx first leaves the
        # projection onto xhat unchanged
        gx -= gx.mean(axis=-1, keepdims=True)
        dot = np.einsum("...i,...i->...", gx, xhat)[..., None] \
            / a.data.shape[-1]
        gx -= xhat * dot
        gx *= inv
        return ((a, gx), (gain, g_gain), (bias, g_bias))

    return _record("layernorm", (a, gain, bias), out, backward)


def backward(loss):
    """Run the active tape's backward pass from a scalar loss."""
    tape = active_tape()
    if tape is None:
        raise RuntimeError("no active Tape")
    tape.backward(loss)
