"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records its parents and a vector-Jacobian product written in
terms of other primitives. Running the backward pass with
``create_graph=True`` therefore records the gradient computation itself, and
a second backward pass over a function of those gradients gives nested
(second-order) derivatives. This is what the gradient-matching reconstruction
attack and Soteria's representation Jacobians need.

Conventions:

* ``sign(0) == 0`` and the subgradient of ``relu`` and ``abs`` at 0 is 0.
* Max-pooling routes the gradient to the lowest index among tied maxima.
* Any primitive producing a non-finite value raises :class:`NumericError`
  naming the primitive.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from recupfl.errors import ConfigError, NumericError, UsageError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "constant",
    "grad",
    "backward",
    "forward",
    "nested_grad",
    "topological_order",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "abs",
    "relu",
    "sigmoid",
    "tanh",
    "sign",
    "maximum",
    "clip_min",
    "softmax",
    "log_softmax",
    "maxpool1d",
    "segment_maxpool",
    "concat",
    "broadcast_to",
    "sum_to",
]


class Tensor:
    """A node in the computation graph holding an immutable float64 array."""

    __slots__ = ("value", "requires_grad", "parents", "vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.op = "leaf"

    @classmethod
    def _raw(cls, value: np.ndarray, requires_grad, parents, vjp, op) -> "Tensor":
        t = cls.__new__(cls)
        if value.flags.writeable:
            value = value.view()
            value.flags.writeable = False
        t.value = value
        t.requires_grad = requires_grad
        t.parents = parents
        t.vjp = vjp
        t.op = op
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor._raw(self.value, False, (), None, "leaf")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    def __len__(self) -> int:
        return len(self.value)

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
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar():
    raise UsageError("item() requires a single-element tensor")


def tensor(value, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor (copying ``value`` to float64)."""
    return Tensor(value, requires_grad=requires_grad)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._raw(np.asarray(x, dtype=np.float64), False, (), None, "const")


def _node(value: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by '{op}'")
    if any(p.requires_grad for p in parents):
        return Tensor._raw(value, True, parents, vjp, op)
    return Tensor._raw(value, False, (), None, op)


# ---------------------------------------------------------------------------
# broadcasting primitives


def sum_to(x, shape) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ConfigError(f"cannot sum shape {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    value = x.value.sum(axis=axes, keepdims=True).reshape(shape)

    def vjp(g, out, args, needs):
        return (broadcast_to(g, args[0].shape),)

    return _node(value, "sum_to", (x,), vjp)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        value = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ConfigError(f"cannot broadcast {x.shape} to {shape}") from exc

    def vjp(g, out, args, needs):
        return (sum_to(g, args[0].shape),)

    return _node(value, "broadcast_to", (x,), vjp)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ConfigError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def vjp(g, out, args, needs):
        x, y = args
        return (
            sum_to(g, x.shape) if needs[0] else None,
            sum_to(g, y.shape) if needs[1] else None,
        )

    return _node(a.value + b.value, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def vjp(g, out, args, needs):
        x, y = args
        return (
            sum_to(g, x.shape) if needs[0] else None,
            sum_to(neg(g), y.shape) if needs[1] else None,
        )

    return _node(a.value - b.value, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def vjp(g, out, args, needs):
        x, y = args
        return (
            sum_to(mul(g, y), x.shape) if needs[0] else None,
            sum_to(mul(g, x), y.shape) if needs[1] else None,
        )

    return _node(a.value * b.value, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)

    def vjp(g, out, args, needs):
        x, y = args
        return (
            sum_to(div(g, y), x.shape) if needs[0] else None,
            sum_to(neg(div(mul(g, out), y)), y.shape) if needs[1] else None,
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return _node(value, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (neg(g),)

    return _node(-a.value, "neg", (a,), vjp)


def power(a, k: float) -> Tensor:
    """Elementwise ``a ** k`` for a constant exponent."""
    a = _as_tensor(a)
    k = float(k)

    def vjp(g, out, args, needs):
        if k == 1.0:
            return (g,)
        return (mul(g, mul(k, power(args[0], k - 1.0))),)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value**k
    return _node(value, "power", (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _node(value, "exp", (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (div(g, args[0]),)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return _node(value, "log", (a,), vjp)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (div(mul(g, 0.5), out),)

    with np.errstate(invalid="ignore"):
        value = np.sqrt(a.value)
    return _node(value, "sqrt", (a,), vjp)


def sign(a) -> Tensor:
    """Elementwise sign with ``sign(0) == 0``; its derivative is zero everywhere."""
    a = _as_tensor(a)
    return _node(np.sign(a.value), "sign", (), None)


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (mul(g, np.sign(args[0].value)),)

    return _node(np.abs(a.value), "abs", (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (mul(g, (args[0].value > 0).astype(np.float64)),)

    return _node(np.maximum(a.value, 0.0), "relu", (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    x = a.value
    value = np.empty_like(x)
    pos = x >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    value[~pos] = ex / (1.0 + ex)
    return _node(value, "sigmoid", (a,), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    return _node(np.tanh(a.value), "tanh", (a,), vjp)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("maximum", a, b)

    def vjp(g, out, args, needs):
        x, y = args
        mask = (x.value >= y.value).astype(np.float64)
        return (
            sum_to(mul(g, mask), x.shape) if needs[0] else None,
            sum_to(mul(g, 1.0 - mask), y.shape) if needs[1] else None,
        )

    return _node(np.maximum(a.value, b.value), "maximum", (a, b), vjp)


def clip_min(a, lo: float) -> Tensor:
    """``max(a, lo)`` for a constant floor; gradient is 0 where the floor is active."""
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (mul(g, (args[0].value >= lo).astype(np.float64)),)

    return _node(np.maximum(a.value, lo), "clip_min", (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, out, args, needs):
        x, y = args
        return (
            matmul(g, transpose(y)) if needs[0] else None,
            matmul(transpose(x), g) if needs[1] else None,
        )

    return _node(a.value @ b.value, "matmul", (a, b), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, out, args, needs):
        return (transpose(g),)

    return _node(a.value.T, "transpose", (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"cannot reshape {a.shape} to {shape}") from exc

    def vjp(g, out, args, needs):
        return (reshape(g, args[0].shape),)

    return _node(value, "reshape", (a,), vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, out, args, needs):
        src = args[0].shape
        if not keepdims:
            g = reshape(g, _keepdims_shape(src, axis))
        return (broadcast_to(g, src),)

    return _node(np.asarray(value), "sum", (a,), vjp)


def _keepdims_shape(shape, axis) -> tuple[int, ...]:
    if axis is None:
        return (1,) * len(shape)
    axes = {int(ax) % len(shape) for ax in np.atleast_1d(axis)}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, args, needs):
        inner = sum(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _node(value, "softmax", (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g, out, args, needs):
        return (sub(g, mul(exp(out), sum(g, axis=axis, keepdims=True))),)

    return _node(value, "log_softmax", (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ConfigError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g, out, args, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(_getitem(g, tuple(idx)))
        return tuple(grads)

    return _node(value, "concat", ts, vjp)


def _getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    value = np.array(a.value[idx], dtype=np.float64)

    def vjp(g, out, args, needs):
        return (_scatter(g, idx, args[0].shape),)

    return _node(value, "getitem", (a,), vjp)


def _scatter(g, idx, shape) -> Tensor:
    """Adjoint of indexing: place ``g`` at ``idx`` inside zeros of ``shape``."""
    g = _as_tensor(g)
    value = np.zeros(shape)
    np.add.at(value, idx, g.value)

    def vjp(gg, out, args, needs):
        return (_getitem(gg, idx),)

    return _node(value, "scatter", (g,), vjp)


# ---------------------------------------------------------------------------
# pooling


def _pool_table(sizes: Sequence[int], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Index table of shape (n_windows, window) and its padding mask."""
    if window < 1:
        raise ConfigError("pool window must be >= 1")
    rows, pads = [], []
    start = 0
    for n in sizes:
        n = int(n)
        k = -(-n // window)
        pos = start + np.arange(k * window).reshape(k, window)
        pad = pos >= start + n
        rows.append(np.where(pad, start, pos))
        pads.append(pad)
        start += n
    if not rows:
        return np.zeros((0, window), dtype=np.intp), np.zeros((0, window), dtype=bool)
    return np.concatenate(rows).astype(np.intp), np.concatenate(pads)


def segment_maxpool(a, sizes: Sequence[int], window: int) -> Tensor:
    """Non-overlapping 1-D max-pool along the last axis, per contiguous segment.

    The last axis of ``a`` is split into consecutive segments of the given
    ``sizes``; each segment is pooled separately with the final partial window
    kept, and the results are concatenated. The gradient of each output goes to
    the first (lowest-index) maximal element of its window.
    """
    a = _as_tensor(a)
    total = int(np.sum(sizes))
    if a.shape[-1] != total:
        raise ConfigError(f"pool segments cover {total} elements, input has {a.shape[-1]}")
    table, pad = _pool_table(sizes, window)
    gathered = a.value[..., table]
    gathered = np.where(pad, -np.inf, gathered)
    am = gathered.argmax(axis=-1)
    positions = table[np.arange(table.shape[0]), am]
    value = np.take_along_axis(a.value, positions, axis=-1)

    def vjp(g, out, args, needs):
        return (_unpool(g, positions, total),)

    return _node(value, "maxpool", (a,), vjp)


def maxpool1d(a, window: int) -> Tensor:
    a = _as_tensor(a)
    return segment_maxpool(a, [a.shape[-1]], window)


def _unpool(g, positions: np.ndarray, width: int) -> Tensor:
    g = _as_tensor(g)
    value = np.zeros(g.shape[:-1] + (width,))
    np.put_along_axis(value, np.broadcast_to(positions, g.shape), g.value, axis=-1)

    def vjp(gg, out, args, needs):
        return (_gather(gg, positions),)

    return _node(value, "unpool", (g,), vjp)


def _gather(g, positions: np.ndarray) -> Tensor:
    g = _as_tensor(g)
    pos = np.broadcast_to(positions, g.shape[:-1] + positions.shape[-1:])
    value = np.take_along_axis(g.value, pos, axis=-1)

    def vjp(gg, out, args, needs):
        return (_unpool(gg, positions, args[0].shape[-1]),)

    return _node(value, "gather", (g,), vjp)


# ---------------------------------------------------------------------------
# the backward pass


def topological_order(output: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``output``, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    ``wrt`` may name leaves or intermediate nodes. With ``create_graph=True``
    the returned tensors are themselves recorded and can be differentiated
    again. Tensors that ``output`` does not depend on get a zero gradient.
    """
    if not isinstance(output, Tensor) or output.size != 1:
        raise UsageError("backward requires a scalar output")
    order = topological_order(output)
    grads: dict[int, Tensor] = {id(output): _as_tensor(np.ones(output.shape))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        if create_graph:
            out, args = node, node.parents
        else:
            out = node.detach()
            args = tuple(p.detach() for p in node.parents)
            g = g.detach() if g.requires_grad else g
        parent_grads = node.vjp(g, out, args, needs)
        for p, gp in zip(node.parents, parent_grads):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else add(prev, gp)
    result = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = _as_tensor(np.zeros(t.shape))
        elif not create_graph and g.requires_grad:
            g = g.detach()
        result.append(g)
    return result


GradientMap = dict


def backward(output: Tensor, leaves: Mapping[str, Tensor], create_graph: bool = False) -> dict[str, Tensor]:
    """Named variant of :func:`grad` returning a gradient map keyed like ``leaves``."""
    names = list(leaves)
    gs = grad(output, [leaves[n] for n in names], create_graph=create_graph)
    return dict(zip(names, gs))


def nested_grad(
    inner_output: Tensor,
    inner_leaves: Sequence[Tensor],
    outer_fn: Callable[[list[Tensor]], Tensor],
    outer_leaf: Tensor,
) -> Tensor:
    """Differentiate a scalar function of a gradient.

    Computes ``g = d inner_output / d inner_leaves`` with the graph recorded,
    evaluates ``s = outer_fn(g)`` and returns ``ds / d outer_leaf``.
    """
    inner = grad(inner_output, inner_leaves, create_graph=True)
    outer = outer_fn(inner)
    if not isinstance(outer, Tensor) or outer.size != 1:
        raise UsageError("outer function must return a scalar tensor")
    if not any(n is outer_leaf for n in topological_order(outer)):
        raise UsageError("outer scalar is not recorded against the outer leaf")
    return grad(outer, [outer_leaf])[0]


class Graph:
    """A function of named leaf tensors that can be evaluated and differentiated.

    >>> g = Graph(lambda x: (x * x).sum(), ["x"])
    >>> float(g.forward({"x": [3.0]}).value)
    9.0
    """

    def __init__(self, fn: Callable[..., Tensor], leaves: Iterable[str]):
        self.fn = fn
        self.leaves = tuple(leaves)

    def bind(self, inputs: Mapping[str, object]) -> dict[str, Tensor]:
        missing = [n for n in self.leaves if n not in inputs]
        if missing:
            raise ConfigError(f"unbound graph leaves: {missing}")
        return {n: tensor(inputs[n], requires_grad=True) for n in self.leaves}

    def forward(self, inputs: Mapping[str, object]) -> Tensor:
        return self.fn(**self.bind(inputs))

    def backward(
        self, inputs: Mapping[str, object], wrt: Iterable[str] | None = None, create_graph: bool = False
    ) -> tuple[Tensor, dict[str, Tensor]]:
        bound = self.bind(inputs)
        out = self.fn(**bound)
        names = list(wrt) if wrt is not None else list(self.leaves)
        return out, backward(out, {n: bound[n] for n in names}, create_graph=create_graph)


def forward(graph: Graph, inputs: Mapping[str, object]) -> Tensor:
    return graph.forward(inputs)
