"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent.  :func:`backward` orders the reachable graph topologically (a
:class:`Tape`) and walks it once in reverse.

Gradients accumulate: calling ``backward`` twice without zeroing adds the
second pass on top of the first, which is what lets one parameter feed
several consumers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "no_grad",
    "is_grad_enabled",
    "make_op",
    "backward",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clamp",
    "dropout",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "concat",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "take_pairs",
]

_GRAD_ENABLED = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional float array that can take part in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(_lift(other, self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms of the functional API -----------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)

    def softmax(self):
        return softmax_lastdim(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn`` receives the output gradient and must return one entry per
    parent (``None`` for parents that need no gradient).
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph traversal ------------------------------------------------------

class Tape:
    """Topologically ordered record of the operations reachable from a root.

    ``nodes`` lists every gradient-carrying tensor once, inputs before the
    operations that consume them.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaves get private buffers so in-place updates cannot alias
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# -- elementwise and reductions ---------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_op(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_op(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_op(a.data * pos, (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    half = a.dtype.type(0.5)
    out = half * (1 + np.tanh(half * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 inside the closed interval, 0 outside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) * a.dtype.type(1.0 / (1.0 - p))
    return make_op(a.data * keep, (a,), lambda g: (g * keep,))


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(a.data[index]), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def take_pairs(a: Tensor, rows: np.ndarray, src: np.ndarray, dst: np.ndarray, width: int) -> Tensor:
    """Move entries between the last axes of ``a`` along (row, column) pairs.

    ``out[..., rows[i], dst[i]] = a[..., rows[i], src[i]]`` with every other
    output entry zero.  Both (rows, src) and (rows, dst) must be free of
    duplicates; the adjoint is then the same move reversed, so a band gather
    and its scatter share this one op.
    """
    lead = a.shape[:-1]
    in_width = a.shape[-1]
    out = np.zeros(lead + (width,), dtype=a.dtype)
    out[..., rows, dst] = a.data[..., rows, src]

    def back(g):
        ga = np.zeros(lead + (in_width,), dtype=g.dtype)
        ga[..., rows, src] = g[..., rows, dst]
        return (ga,)

    return make_op(out, (a,), back)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: fold leading axes into one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def back2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_op(out, (a, b), back2)

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad @ bd, (a, b), back)


# -- normalised / fused ops ---------------------------------------------------

def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} received non-finite input")


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    _check_finite(a.data, "softmax")
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op(out, (a,), back)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return make_op(out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def back(g):
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return make_op(out.astype(xd.dtype, copy=False), (x, gain, bias), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate their gradients."""
    ids = np.asarray(ids)
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise IndexError(f"token id {int(bad)} out of range for vocabulary of {n_rows}")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_op(table.data[ids], (table,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood (nats) of integer targets under ``logits``.

    With ``weights`` the mean is weighted; zero-weight positions contribute
    nothing to value or gradient.
    """
    targets = np.asarray(targets)
    _check_finite(logits.data, "cross_entropy")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    if weights is None:
        w = np.full(targets.shape, 1.0 / targets.size, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
        w = w / w.sum()
    value = -(picked * w).sum()

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1)
        return (grad * (w * g)[..., None],)

    return make_op(np.asarray(value, dtype=logits.dtype), (logits,), back)
