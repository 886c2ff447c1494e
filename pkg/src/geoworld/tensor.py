"""Dense float64 tensors with a dynamic reverse-mode gradient graph.

Every op returns a new read-only :class:`Tensor`. When any input requires a
gradient the output records its parents and a closure mapping the output
gradient to one gradient per parent. :func:`backward` walks that record in
reverse topological order exactly once and then releases it.

Broadcasting is restricted to the leading axes: two shapes combine only when
they are equal, when one is a scalar, or when one is a suffix of the other.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e30
_GELU_C = np.sqrt(2.0 / np.pi)
_CREATION = itertools.count()  # global creation counter; orders graph traversal


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True, order="C")
    arr.flags.writeable = False
    return arr


class Tensor:
    """A read-only float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward", "_seq")
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if _is_frozen(data) else _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite value in tensor {name or '<leaf>'}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_CREATION)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _is_frozen(data) -> bool:
    return (
        isinstance(data, np.ndarray)
        and data.dtype == np.float64
        and not data.flags.writeable
        and data.flags.c_contiguous
    )


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.array(data, dtype=np.float64, order="C", copy=None)
    if not data.flags.writeable or not data.flags.owndata:
        data = data.copy()
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    data.flags.writeable = False
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting -------------------------------------------------------------
def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b or len(b) == 0:
        return a
    if len(a) == 0:
        return b
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform (only leading-axis broadcast)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    grad = grad.sum(axis=tuple(range(lead))) if lead > 0 else grad
    return grad.reshape(shape)


# -- elementwise binary ops ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**exponent
    return _result(
        out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),), f"pow{exponent:g}"
    )


# -- linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or carries
    exactly the same leading axes as ``a``.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute"
    )


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[x.shape for x in ts]} do not conform on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
        "concat",
    )


# -- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(out, (a,), backward, "mean")


# -- elementwise unary ops ----------------------------------------------------
def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward, "gelu")


# -- normalisation and softmax ------------------------------------------------
def l2_normalize(a: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, (a,), backward, "l2_normalize")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    _broadcast_shape(a.shape, gamma.shape, "layer_norm")

    def backward(g):
        gx = g * gamma.data
        n = x.shape[-1]
        da = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return (
            da,
            _unbroadcast(g * xhat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _result(xhat * gamma.data + beta.data, (a, gamma, beta), backward, "layer_norm")


def _mask_array(mask, shape: tuple) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape(shape, mask.shape, "mask")
    return np.broadcast_to(mask, shape)


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    m = _mask_array(mask, a.shape)
    x = a.data if m is None else np.where(m, a.data, MASK_FILL)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), backward, "softmax" if m is None else "masked_softmax")


def masked_softmax(a: Tensor, mask) -> Tensor:
    return softmax(a, mask)


def log_softmax(a: Tensor, mask=None) -> Tensor:
    """Log-softmax over the last axis; masked entries hold a large finite negative."""
    m = _mask_array(mask, a.shape)
    x = a.data if m is None else np.where(m, a.data, MASK_FILL)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        ga = g - probs * g.sum(axis=-1, keepdims=True)
        return (ga if m is None else np.where(m, ga, 0.0),)

    return _result(out, (a,), backward, "log_softmax")


def pick(a: Tensor, index) -> Tensor:
    """Gather one entry per row along the last axis: a[..., index[...]]."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {a.shape[:-1]}")
    expanded = idx[..., None]
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, expanded, g[..., None], axis=-1)
        return (ga,)

    return _result(out, (a,), backward, "pick")


def dot(a, b) -> Tensor:
    return sum_(mul(a, b))


# -- graph traversal ----------------------------------------------------------
def _consumed(g):  # sentinel closure for released graph nodes
    raise GraphError("backward: graph already consumed; rebuild the forward pass")


@dataclass
class GradGraph:
    """Topologically ordered operation records reachable from one root."""

    nodes: list[Tensor] = field(default_factory=list)
    consumed: bool = False

    @classmethod
    def trace(cls, root: Tensor) -> GradGraph:
        """Reachable nodes in creation order, which is always topological.

        Creation order (rather than traversal order) fixes the order in which
        a node's incoming gradients are summed, so adding an unrelated branch
        to the graph never perturbs the float result of the rest.
        """
        reached: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in reached:
                continue
            reached[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad and id(p) not in reached)
        return cls(nodes=sorted(reached.values(), key=lambda n: n._seq))

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, graph: GradGraph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires a gradient.

    Returns the gradients computed by this call keyed by leaf tensor. The
    graph is released afterwards, so a second call on the same loss raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if loss._backward is _consumed:
        raise GraphError("backward: graph already consumed; rebuild the forward pass")
    graph = graph or GradGraph.trace(loss)
    if graph.consumed:
        raise GraphError("backward: graph already consumed; rebuild the forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                g = np.array(g, dtype=np.float64)
                node.grad = g if node.grad is None else node.grad + g
                result[node] = g
            continue
        if node._backward is _consumed:
            raise GraphError("backward: graph already consumed; rebuild the forward pass")
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            # contiguous copies keep BLAS on one code path whatever the producer's layout
            pg = np.asarray(pg, dtype=np.float64, order="C")
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in graph.nodes:
        if not node.is_leaf:
            node._backward = _consumed
            node._parents = ()
    graph.consumed = True
    return result


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite-difference oracle -------------------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    base = np.array(_lift(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    _check_scalar_value(out)
    analytic = backward(out).get(leaf, np.zeros(base.shape)).reshape(-1)

    flat = base.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = _check_scalar_value(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] = flat[i] - eps
        lo = _check_scalar_value(f(Tensor(bumped.reshape(base.shape))))
        numeric = (hi - lo) / (2.0 * eps)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def _check_scalar_value(t: Tensor) -> float:
    if t.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {t.shape}")
    value = float(t.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    return value
