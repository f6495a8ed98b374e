"""
Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records a node (op tag, parents, saved
context).  The backward rule for each tag lives in ``BACKWARD_RULES`` so the
rules can be inspected, and swapped out by the mutation checks in
``aga.verify``.  A rule receives the upstream gradient and the output node and
returns one gradient per parent (``None`` for parents that need nothing).

Gradients of intermediate nodes are kept in a scratch dict during a single
backward pass; only leaves accumulate into ``.grad``, so calling ``backward``
twice without ``zero_grad`` adds the two passes together.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()

BACKWARD_RULES: dict[str, Callable] = {}


def rule(tag):
    def register(fn):
        BACKWARD_RULES[tag] = fn
        return fn
    return register


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("data", "_grad", "requires_grad", "node_id", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._op = "leaf"
        self._parents = ()
        self._ctx = None

    @classmethod
    def _node(cls, data, op, parents, ctx=None):
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out.node_id = next(_ids)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._op = op
            out._parents = tuple(parents)
            out._ctx = ctx
        else:
            out._op = "leaf"
            out._parents = ()
            out._ctx = None
        return out

    # -- basic properties ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self):
        """Accumulated gradient; zeros if backward never reached this tensor."""
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    @property
    def has_grad(self):
        return self._grad is not None

    def zero_grad(self):
        self._grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def min(self, axis=-1, keepdims=False):
        return reduce_min(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    # sum away axes introduced or stretched by numpy broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(a.data + b.data, "add", (a, b))


@rule("add")
def _add_backward(g, out):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def neg(a):
    return Tensor._node(-a.data, "neg", (a,))


@rule("neg")
def _neg_backward(g, out):
    return (-g,)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(a.data * b.data, "mul", (a, b))


@rule("mul")
def _mul_backward(g, out):
    a, b = out._parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(a.data / b.data, "div", (a, b))


@rule("div")
def _div_backward(g, out):
    a, b = out._parents
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
    return ga, gb


def scale(a, c):
    """Multiply by a python scalar constant."""
    return Tensor._node(a.data * c, "scale", (a,), float(c))


@rule("scale")
def _scale_backward(g, out):
    return (g * out._ctx,)


def power(a, p):
    return Tensor._node(a.data**p, "pow", (a,), float(p))


@rule("pow")
def _pow_backward(g, out):
    (a,) = out._parents
    p = out._ctx
    return (g * p * a.data ** (p - 1),)


def exp(a):
    return Tensor._node(np.exp(a.data), "exp", (a,))


@rule("exp")
def _exp_backward(g, out):
    return (g * out.data,)


def log(a):
    return Tensor._node(np.log(a.data), "log", (a,))


@rule("log")
def _log_backward(g, out):
    return (g / out._parents[0].data,)


def tanh(a):
    return Tensor._node(np.tanh(a.data), "tanh", (a,))


@rule("tanh")
def _tanh_backward(g, out):
    return (g * (1.0 - out.data**2),)


def masked_fill(a, mask, value):
    """Entries where ``mask`` is true become ``value``; they pass no gradient."""
    mask = np.asarray(mask, dtype=bool)
    return Tensor._node(np.where(mask, value, a.data), "masked_fill", (a,), mask)


@rule("masked_fill")
def _masked_fill_backward(g, out):
    return (np.where(out._ctx, 0.0, g),)


def where_const(mask, a):
    """Keep ``a`` where mask is true, exact zero elsewhere (mask is a constant)."""
    return masked_fill(a, ~np.asarray(mask, dtype=bool), 0.0)


# -- linear algebra and layout --------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return Tensor._node(a.data @ b.data, "matmul", (a, b))


@rule("matmul")
def _matmul_backward(g, out):
    a, b = out._parents
    ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
    return ga, gb


def transpose(a):
    return Tensor._node(np.swapaxes(a.data, -1, -2), "transpose", (a,))


@rule("transpose")
def _transpose_backward(g, out):
    return (np.swapaxes(g, -1, -2),)


def reshape(a, shape):
    return Tensor._node(a.data.reshape(shape), "reshape", (a,), a.shape)


@rule("reshape")
def _reshape_backward(g, out):
    return (g.reshape(out._ctx),)


def getitem(a, idx):
    """Basic or integer-array indexing (gather rows)."""
    return Tensor._node(a.data[idx], "getitem", (a,), idx)


@rule("getitem")
def _getitem_backward(g, out):
    (a,) = out._parents
    ga = np.zeros_like(a.data)
    np.add.at(ga, out._ctx, g)
    return (ga,)


def gather_rows(a, index):
    return getitem(a, np.asarray(index, dtype=np.intp))


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._node(data, "concat", tensors, (axis, np.cumsum(sizes)[:-1]))


@rule("concat")
def _concat_backward(g, out):
    axis, splits = out._ctx
    return tuple(np.split(g, splits, axis=axis))


# -- reductions ----------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    return Tensor._node(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), (axis, keepdims))


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@rule("sum")
def _sum_backward(g, out):
    (a,) = out._parents
    axis, keepdims = out._ctx
    return (np.array(_expand(g, a.shape, axis, keepdims)),)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return Tensor._node(np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,), (axis, keepdims, n))


@rule("mean")
def _mean_backward(g, out):
    (a,) = out._parents
    axis, keepdims, n = out._ctx
    return (np.array(_expand(g, a.shape, axis, keepdims)) / n,)


def _extreme(a, axis, keepdims, argfn, tag):
    idx = argfn(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        vals = np.squeeze(vals, axis=axis)
    return Tensor._node(vals, tag, (a,), (axis, keepdims, idx))


def reduce_max(a, axis=-1, keepdims=False):
    """Max along one axis; gradient goes to the first maximal entry."""
    return _extreme(a, axis, keepdims, np.argmax, "max")


def reduce_min(a, axis=-1, keepdims=False):
    """Min along one axis; gradient goes to the first minimal entry."""
    return _extreme(a, axis, keepdims, np.argmin, "min")


@rule("max")
@rule("min")
def _extreme_backward(g, out):
    (a,) = out._parents
    axis, keepdims, idx = out._ctx
    if not keepdims:
        g = np.expand_dims(g, axis)
    ga = np.zeros_like(a.data)
    np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
    return (ga,)


# -- fused nonlinearities --------------------------------------------------

def row_softmax(x, mask=None):
    """Softmax over the last axis.  Masked-out (False) entries come out as exact zeros."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("row_softmax: a row has no unmasked entries")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return Tensor._node(e / e.sum(axis=-1, keepdims=True), "softmax", (x,))


@rule("softmax")
def _softmax_backward(g, out):
    y = out.data
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return Tensor._node(z - lse, "log_softmax", (x,), axis)


@rule("log_softmax")
def _log_softmax_backward(g, out):
    axis = out._ctx
    return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)


def l2_normalize(x, eps=1e-8):
    """x / max(||x||, eps) along the last axis; zero vectors stay zero."""
    n = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    return Tensor._node(x.data / np.maximum(n, eps), "l2_normalize", (x,), (n, eps))


@rule("l2_normalize")
def _l2_normalize_backward(g, out):
    (x,) = out._parents
    n, eps = out._ctx
    live = n > eps
    den = np.where(live, n, eps)
    proj = (g * x.data).sum(axis=-1, keepdims=True)
    # below the floor the map is a plain scaling by 1/eps
    corr = np.where(live, x.data * proj / den**3, 0.0)
    return (g / den - corr,)


# -- backward pass ---------------------------------------------------------

@dataclass(frozen=True)
class RecordEntry:
    op: str
    inputs: tuple
    output: int


def _topo(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def trace(loss):
    """The computation record leading to ``loss``, inputs before outputs."""
    return [
        RecordEntry(n._op, tuple(p.node_id for p in n._parents), n.node_id)
        for n in _topo(loss)
    ]


def backward(loss):
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if not node._parents:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        pgrads = BACKWARD_RULES[node._op](g, node)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg if prev is None else prev + pg


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


# -- finite differences ----------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], h=1e-5):
    """
    Compare autodiff gradients of the scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the current ``params`` data on every
    call.  Returns the largest relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`` over every
    parameter entry.
    """
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("finite_difference_check: f is not finite at the base point")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("finite_difference_check: f is not finite near the base point")
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, err)
    zero_grad(params)
    return worst
