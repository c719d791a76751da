"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every backward rule is written in terms of the same differentiable
primitives, so a gradient computed with ``create_graph=True`` is itself a
node in the graph and can be differentiated again. That is all a
Hessian-vector product needs (reverse-over-reverse).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def grad_mode(enabled: bool):
    """Temporarily switch graph recording on or off."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return swap_last(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), vjp)


def power(a: Tensor, exponent: float) -> Tensor:
    def vjp(g):
        return (mul(g, mul(exponent, power(a, exponent - 1.0))),)

    return _make(a.data**exponent, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (mul(g, power(a, -1.0)),))


def tanh(a: Tensor) -> Tensor:
    out = None

    def vjp(g):
        return (mul(g, add(1.0, neg(mul(out, out)))),)

    out = _make(np.tanh(a.data), (a,), vjp)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = sum_to(matmul(g, swap_last(b)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = matmul(swap_last(reshape(a, (-1, k))), reshape(g, (-1, n)))
            else:
                gb = sum_to(matmul(swap_last(a), g), b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in np.atleast_1d(axis))
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (sum_to(g, src),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    return _make(a.data[idx], (a,), lambda g: (scatter_add(g, idx, src),))


def scatter_add(g: Tensor, idx, shape) -> Tensor:
    """Adjoint of ``getitem``: a zero array of ``shape`` with ``g`` added at ``idx``."""
    out = np.zeros(shape)
    if _is_basic_index(idx):
        out[idx] = g.data
    else:
        np.add.at(out, idx, g.data)
    return _make(out, (g,), lambda gg: (getitem(gg, idx),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


# ------------------------------------------------------------- composites


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return reshape(tsum(x, axes), shape)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    return mul(a, Tensor((a.data > 0).astype(np.float64)))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth, so it has a non-trivial Hessian)."""
    c = np.sqrt(2.0 / np.pi)
    inner = mul(c, add(a, mul(0.044715, power(a, 3.0))))
    return mul(mul(0.5, a), add(1.0, tanh(inner)))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    # the shift is a constant; the result does not depend on it mathematically
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    s = tsum(exp(add(a, neg(shift))), axis, keepdims=True)
    return add(log(s), shift)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(add(a, neg(shift)))
    return mul(e, power(tsum(e, axis, keepdims=True), -1.0))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, -1, keepdims=True)
    xc = add(x, neg(mu))
    var = mean(mul(xc, xc), -1, keepdims=True)
    return add(mul(mul(xc, power(add(var, eps), -0.5)), gain), bias)


def dot(a: Tensor, b) -> Tensor:
    return tsum(mul(a, b))


# ------------------------------------------------------------------ driver


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the returned tensors are differentiable.
    Inputs that do not influence the output get a zero gradient.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        grad_output = np.ones_like(output.data)
    grads: dict[int, Tensor] = {id(output): as_tensor(grad_output)}
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]
    wanted = {id(x) for x in inputs}
    with grad_mode(create_graph):
        for node in reversed(_toposort(output)):
            if node._vjp is None or id(node) in wanted:
                g = grads.get(id(node))
            else:
                g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(x), Tensor(np.zeros_like(x.data))) for x in inputs]
