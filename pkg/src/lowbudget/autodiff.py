"""Dense float64 tensors with reverse-mode differentiation.

Every operation on a tensor that requires gradients records a node holding a
closure for its vector-Jacobian product. ``backward`` walks the nodes in
reverse topological order. A ``Tape`` can be opened to capture the execution
order explicitly; without one the order is recovered by a depth-first sort
from the loss.

Broadcasting follows numpy rules and reduces gradients back to each input's
shape.
"""

from contextlib import contextmanager

import numpy as np

from lowbudget.errors import ContractViolation, DomainError

_tape_stack = []
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tape:
    """Ordered record of differentiable operations executed inside ``with Tape():``."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(loss, self)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return maximum(self, 0.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        if _tape_stack:
            _tape_stack[-1].nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(data, what):
    if not np.isfinite(data).all():
        raise DomainError(f"{what} produced a non-finite value")
    return data


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = _check_finite(ad / bd, "div")
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = _check_finite(np.exp(a.data), "exp")
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    x = a.data
    if np.any(~(x > 0)):
        raise DomainError("log of a non-positive value")
    return _node(np.log(x), (a,), lambda g: (g / x,))


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    x = a.data
    out = _check_finite(x**p, "power")
    return _node(out, (a,), lambda g: (g * p * x ** (p - 1.0),))


def maximum(a, c):
    """Elementwise ``max(a, c)`` for a constant ``c``; ReLU is ``maximum(a, 0)``."""
    a = as_tensor(a)
    mask = a.data > c
    return _node(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"cannot reshape {old} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),))


def pick(a, index):
    """Row-wise gather ``a[i, index[i]]`` for a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ContractViolation(f"pick needs a 2-D tensor and one index per row, got {a.shape} / {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ContractViolation("pick index out of range")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _node(a.data[rows, index], (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and softmax
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(logits):
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    z = as_tensor(logits)
    if not np.isfinite(z.data).all():
        raise DomainError("softmax of non-finite logits")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _node(out, (z,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topological(loss):
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._vjp is not None:
                stack.append((p, False))
    return order


def _accumulate_leaf(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


def backward(loss, tape=None):
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. When a tape is given,
    every leaf read by a recorded operation ends with a ``.grad`` array, zero if
    the leaf does not influence the loss.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._vjp is None:
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    if tape is None:
        order = _topological(loss)
    else:
        if not any(n is loss for n in tape.nodes):
            raise ContractViolation("loss was not produced on this tape")
        order = tape.nodes
        for node in order:
            for p in node._parents:
                if p.requires_grad and p._vjp is None and p.grad is None:
                    p.grad = np.zeros_like(p.data)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not p.requires_grad:
                continue
            if p._vjp is None:
                _accumulate_leaf(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
