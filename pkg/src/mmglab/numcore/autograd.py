"""Array-valued reverse-mode autodiff on top of numpy.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``backprop`` walks the tape in reverse topological
order. Values are float64 unless the caller hands in another float dtype.

Token mixing is made independent of token arrival order, bit for bit:
pooling uses :func:`ordered_sum` (terms sorted before adding) and attention
runs on a canonically sorted copy of its sequence (:func:`canonical_token_order`).
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, NumericError

DEFAULT_DTYPE = np.float64


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _check: bool = True,
    ):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if _check:
            _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def _node(out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out, op)
    return Tensor(out, _parents=parents, _backward=backward, name=None, _check=False)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero")
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(x.data)
    if np.any(out == 0):
        raise NumericError("sqrt at zero has no finite derivative")
    return _node(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * x2 * xd))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# shape and reduction


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ConfigError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def ordered_sum(x, axis: int, keepdims: bool = False) -> Tensor:
    """Sum along ``axis`` after sorting the terms.

    The result depends only on the multiset of values along the axis, so any
    permutation of that axis yields a bit-identical sum.
    """
    x = as_tensor(x)
    ax = _norm_axes(axis, x.ndim)[0]
    shape = x.shape
    moved = np.moveaxis(x.data, ax, -1)
    out = np.sort(moved, axis=-1).sum(axis=-1)
    if keepdims:
        out = np.expand_dims(out, ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.array(out), (x,), backward, "ordered_sum")


def ordered_mean(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    return ordered_sum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def take(x, index) -> Tensor:
    """Basic or fancy indexing; gradient scatters back with ``np.add.at``."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (x,), backward, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ConfigError("concat of an empty sequence")
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _node(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ConfigError("matmul expects operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ConfigError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: fold the leading axes into rows
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _node(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), backward, "matmul")


def canonical_token_order(x) -> np.ndarray:
    """Per-sequence lexicographic order of the token rows of ``x`` (..., T, D).

    Any permutation of the tokens yields the same sorted sequence, so
    computing on ``permute_tokens(x, order)`` makes downstream token mixing
    independent of the arrival order, bit for bit.
    """
    xd = as_tensor(x).data
    t, d = xd.shape[-2], xd.shape[-1]
    flat = xd.reshape(-1, d)
    nseq = flat.shape[0] // t
    seq = np.repeat(np.arange(nseq), t)
    order = np.lexsort((flat[:, 0], seq))
    first = flat[order, 0].reshape(nseq, t)
    if np.any(first[:, 1:] == first[:, :-1]):
        # ties in the leading column: fall back to a full lexicographic sort
        keys = tuple(flat[:, j] for j in range(d - 1, -1, -1)) + (seq,)
        order = np.lexsort(keys)
    order = order.reshape(nseq, t) - (np.arange(nseq) * t)[:, None]
    return order.reshape(xd.shape[:-2] + (t,))


def permute_tokens(x, order: np.ndarray) -> Tensor:
    """``out[..., i, :] = x[..., order[..., i], :]``."""
    x = as_tensor(x)
    idx = order[..., :, None]
    out = np.take_along_axis(x.data, idx, axis=-2)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, np.broadcast_to(idx, g.shape), g, axis=-2)
        return (full,)

    return _node(out, (x,), backward, "permute_tokens")


def inverse_order(order: np.ndarray) -> np.ndarray:
    return np.argsort(order, axis=-1, kind="stable")


# ---------------------------------------------------------------------------
# softmax family


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    xd = x.data
    _check_finite(xd, "softmax input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return _node(np.asarray(out), (x,), backward, "logsumexp")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# gradient computation


def _topological(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(
    output: Tensor,
    params: Mapping[str, Tensor] | Iterable[Tensor] | None = None,
) -> dict:
    """Gradients of a scalar ``output`` with respect to trainable leaves.

    With a mapping of named parameters the result is keyed by the same
    names; parameters the output does not depend on get a zero gradient.
    With ``params=None`` every reachable trainable leaf is returned, keyed
    by its ``name`` (or the Tensor itself when unnamed).
    """
    if output.data.size != 1:
        raise ConfigError(f"backprop needs a scalar output, got shape {output.shape}")
    order = _topological(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _needs_grad(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return {(t.name or t): grads.get(id(t), np.zeros_like(t.data))
                for t in order if t.requires_grad and t._backward is None}
    if isinstance(params, Mapping):
        return {name: _final(grads, t) for name, t in params.items()}
    return {t: _final(grads, t) for t in params}


def _final(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(id(t))
    if g is None:
        return np.zeros_like(t.data)
    return _check_finite(np.asarray(g).reshape(t.shape), "backprop")


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None
