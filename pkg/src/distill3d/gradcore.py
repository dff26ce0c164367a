"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape-style engine: every operation eagerly computes its numpy value
and records a closure that maps the output adjoint to input adjoints.
Backward walks the graph in reverse topological order. Enough to train
small MLPs and to differentiate rendering losses with respect to field
and adapter parameters; no GPU, no fusion, no higher-order derivatives.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GradError", "ShapeMismatch", "NonScalarRoot", "NonFiniteValue",
    "set_default_dtype", "default_dtype", "as_array", "assert_finite",
    "Node", "constant", "ParamStore",
    "add", "sub", "mul", "div", "matmul", "concat", "relu", "softplus",
    "sigmoid", "sin", "cos", "exp", "log", "sum_", "mean", "square",
    "sqrt", "stop_grad", "broadcast_to", "reshape", "gather",
    "forward", "backward", "mlp_apply", "positional_encode",
]

_DEFAULT_DTYPE = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    """Set the run-level precision (one precision per run)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}, use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class GradError(Exception):
    pass


class ShapeMismatch(GradError):
    """Shape mismatch between operands, names the op and both shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class NonScalarRoot(GradError):
    pass


class NonFiniteValue(GradError):
    pass


def as_array(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or _DEFAULT_DTYPE)


def assert_finite(x, context: str = "") -> np.ndarray:
    """Explicit NaN/Inf check (values are otherwise assumed finite)."""
    a = x.value if isinstance(x, Node) else np.asarray(x)
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"non-finite values{' in ' + context if context else ''}")
    return a


class Node:
    """One vertex of the computation graph.

    value is immutable after construction; adjoint stays None until a
    backward pass touches the node (semantically zero before that).
    """

    __slots__ = ("op", "inputs", "value", "adjoint", "grad_fn", "param_name")

    def __init__(self, value, op="const", inputs=(), grad_fn=None, param_name=None):
        self.value = value if isinstance(value, np.ndarray) else as_array(value)
        self.op = op
        self.inputs = tuple(inputs)
        self.grad_fn = grad_fn
        self.adjoint = None
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __neg__(self):
        return mul(constant(-1.0), self)


def constant(value) -> Node:
    return Node(as_array(value), op="const")


def _unbroadcast(adj: np.ndarray, shape) -> np.ndarray:
    """Reduce an adjoint back to the pre-broadcast shape of an operand."""
    if adj.shape == tuple(shape):
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and adj.shape[i] != 1)
    if keep:
        adj = adj.sum(axis=keep, keepdims=True)
    return adj.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def add(a: Node, b: Node) -> Node:
    _check_broadcast("add", a, b)
    return Node(a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    _check_broadcast("sub", a, b)
    return Node(a.value - b.value, "sub", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast("mul", a, b)
    return Node(a.value * b.value, "mul", (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)))


def div(a: Node, b: Node) -> Node:
    _check_broadcast("div", a, b)
    return Node(a.value / b.value, "div", (a, b),
                lambda g: (_unbroadcast(g / b.value, a.shape),
                           _unbroadcast(-g * a.value / (b.value * b.value), b.shape)))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return Node(a.value @ b.value, "matmul", (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def concat(nodes, axis: int = -1) -> Node:
    nodes = [n if isinstance(n, Node) else constant(n) for n in nodes]
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[v.shape for v in values]) from None
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [v.shape[ax] for v in values]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        sl = [slice(None)] * out.ndim
        parts = []
        for i in range(len(values)):
            sl[ax] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return Node(out, "concat", nodes, grad_fn)


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0), "relu", (a,),
                lambda g: (np.where(mask, g, 0),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Node) -> Node:
    # log(1 + exp(x)) via logaddexp for stability; derivative is sigmoid
    s = _sigmoid_np(a.value)
    return Node(np.logaddexp(0.0, a.value).astype(a.value.dtype), "softplus", (a,),
                lambda g: (g * s,))


def sigmoid(a: Node) -> Node:
    s = _sigmoid_np(a.value)
    return Node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def sin(a: Node) -> Node:
    return Node(np.sin(a.value), "sin", (a,), lambda g: (g * np.cos(a.value),))


def cos(a: Node) -> Node:
    return Node(np.cos(a.value), "cos", (a,), lambda g: (-g * np.sin(a.value),))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    return Node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def square(a: Node) -> Node:
    return Node(a.value * a.value, "square", (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return Node(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.value.dtype, copy=False),)

    return Node(np.asarray(out, dtype=a.value.dtype), "sum", (a,), grad_fn)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    n = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    out = a.value.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g) / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.value.dtype, copy=False),)

    return Node(np.asarray(out, dtype=a.value.dtype), "mean", (a,), grad_fn)


def stop_grad(a: Node) -> Node:
    """Value passes through unchanged; adjoint propagation is blocked."""
    return Node(a.value, "stop_grad", (), None)


def broadcast_to(a: Node, shape) -> Node:
    out = np.broadcast_to(a.value, shape)
    return Node(np.ascontiguousarray(out), "broadcast", (a,),
                lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Node, shape) -> Node:
    # structural reindexing, not a math kernel; see decisions ledger
    return Node(a.value.reshape(shape), "reshape", (a,),
                lambda g: (g.reshape(a.shape),))


def gather(a: Node, indices, axis: int = 0) -> Node:
    """Select rows (or slices along axis); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, idx, axis=axis)

    def grad_fn(g):
        acc = np.zeros_like(a.value)
        if axis == 0:
            np.add.at(acc, idx, g)
        else:
            np.add.at(np.moveaxis(acc, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (acc,)

    return Node(out, "gather", (a,), grad_fn)


def forward(graph_root: Node) -> np.ndarray:
    """Return the root value (graphs evaluate eagerly at construction)."""
    return graph_root.value


def _toposort(root: Node):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order  # inputs before consumers


def backward(graph_root: Node, params: "ParamStore | None" = None) -> dict:
    """Reverse accumulation from a scalar root.

    Returns a map param_name -> gradient array. Parameters never reached
    by the sweep (e.g. behind stop_grad) get zeros, not an error.
    """
    if graph_root.value.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {graph_root.shape}")
    order = _toposort(graph_root)
    for node in order:
        node.adjoint = None
    graph_root.adjoint = np.ones_like(graph_root.value)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = node.adjoint
        if g is None:
            continue
        if node.param_name is not None:
            if node.param_name in grads:
                grads[node.param_name] = grads[node.param_name] + g
            else:
                grads[node.param_name] = g
        if node.grad_fn is None:
            continue
        for inp, contrib in zip(node.inputs, node.grad_fn(g)):
            if inp.adjoint is None:
                inp.adjoint = np.array(contrib, dtype=inp.value.dtype, copy=True)
            else:
                inp.adjoint = inp.adjoint + contrib
    if params is not None:
        for name in params.names():
            if name not in grads:
                grads[name] = np.zeros_like(params[name])
    return grads


class _Param:
    __slots__ = ("name", "value", "lr_mult")

    def __init__(self, name, value, lr_mult):
        self.name = name
        self.value = value
        self.lr_mult = lr_mult


class ParamStore:
    """Named parameter arrays with stable insertion order and per-parameter
    learning-rate multipliers."""

    def __init__(self):
        self._params: dict[str, _Param] = {}

    def add(self, name: str, value, lr_mult: float = 1.0) -> np.ndarray:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64):
            arr = value.copy()  # explicit float precision is preserved
        else:
            arr = as_array(value).copy()
        self._params[name] = _Param(name, arr, lr_mult)
        return arr

    def __contains__(self, name) -> bool:
        return name in self._params

    def __getitem__(self, name) -> np.ndarray:
        return self._params[name].value

    def set(self, name: str, value) -> None:
        p = self._params[name]
        p.value = np.asarray(value, dtype=p.value.dtype)

    def lr_mult(self, name: str) -> float:
        return self._params[name].lr_mult

    def set_lr_mult(self, name: str, mult: float) -> None:
        self._params[name].lr_mult = mult

    def names(self) -> list:
        return list(self._params)

    def items(self):
        for name, p in self._params.items():
            yield name, p.value

    def leaf(self, name: str) -> Node:
        return Node(self._params[name].value, op="param", param_name=name)

    def total_size(self) -> int:
        return int(np.sum([p.value.size for p in self._params.values()]))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.value.copy(), p.lr_mult)
        return out


def mlp_apply(params: ParamStore, input, latent=None, prefix: str = "layer",
              activation=relu) -> Node:
    """Apply an MLP whose layers live in `params` as `{prefix}{i}.w` / `.b`.

    When a latent is given it is concatenated to the input of EVERY layer,
    not only the first. Hidden layers use `activation`; the final layer is
    linear (callers apply their own head activation).
    """
    h = input if isinstance(input, Node) else constant(input)
    if h.value.ndim == 1:
        h = reshape(h, (1, -1))
    z = None
    if latent is not None:
        z = latent if isinstance(latent, Node) else constant(latent)
        if z.value.ndim == 1:
            z = reshape(z, (1, -1))
    depth = 0
    while f"{prefix}{depth}.w" in params:
        depth += 1
    if depth == 0:
        raise ValueError(f"no layers named {prefix}*.w in store")
    for i in range(depth):
        w = params.leaf(f"{prefix}{i}.w")
        b = params.leaf(f"{prefix}{i}.b")
        if z is not None:
            zz = z if z.shape[0] == h.shape[0] else broadcast_to(z, (h.shape[0], z.shape[1]))
            h = concat([h, zz], axis=1)
        if h.shape[1] != w.shape[0]:
            raise ShapeMismatch(f"mlp_apply[{prefix}{i}]", h.shape, w.shape)
        h = matmul(h, w) + b
        if i < depth - 1:
            h = activation(h)
    return h


def positional_encode(x, levels: int) -> Node:
    """Frequency-encode coordinates: per coordinate, the original value is
    prepended to sin/cos pairs at frequencies 2^0 .. 2^(levels-1).

    Output width along the last axis is dim * (1 + 2*levels).
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    n = x if isinstance(x, Node) else constant(x)
    parts = [n]
    for k in range(levels):
        scaled = mul(n, constant(float(2 ** k)))
        parts.append(sin(scaled))
        parts.append(cos(scaled))
    return concat(parts, axis=-1)
