"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records a node whose backward rule is written with the same
differentiable ops, so a backward pass run under ``create_graph=True`` is
itself recorded and can be differentiated again.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from .errors import ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    try:
        return _state.enabled
    except AttributeError:
        return True


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.enabled = bool(mode)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


def enable_grad():
    return set_grad_enabled(True)


class Node:
    """One recorded operation.

    ``parents`` holds the input nodes (``None`` for constant inputs) and
    ``backward`` maps the output cotangent to a tuple of input cotangents.
    Leaves have no backward rule.
    """

    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents: tuple, backward: Callable | None, op: str):
        self.parents = parents
        self.backward = backward
        self.op = op

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """Dense double-precision array, optionally attached to the tape."""

    __slots__ = ("data", "node")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data: Any, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.node = Node((), None, "leaf") if requires_grad else None

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
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    def __float__(self) -> float:
        return float(self.data)

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return _wrap(self.data)

    # -- operators --------------------------------------------------------
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

    def __pow__(self, other):
        return pow(self, other)

    def __rpow__(self, other):
        return pow(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- method forms of common ops --------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def ravel(self) -> Tensor:
        return reshape(self, (-1,))

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)


ParamFunc = Callable[..., Tensor]
"""A pure function ``f(*primary_inputs, *params) -> Tensor``."""


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.node = None
    return t


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=np.float64))


def zeros(shape) -> Tensor:
    return _wrap(np.zeros(shape))


def ones(shape) -> Tensor:
    return _wrap(np.ones(shape))


def eye(n: int) -> Tensor:
    return _wrap(np.eye(n))


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable | None, op: str) -> Tensor:
    """Record ``data`` as the output of an op with the given backward rule.

    ``backward(g)`` returns one cotangent (or ``None``) per input. The rule
    may be attached after the call by assigning ``out.node.backward`` when
    it needs to refer to the output tensor itself.
    """
    if type(data) is not np.ndarray or data.dtype != np.float64:
        data = np.asarray(data, dtype=np.float64)
    out = _wrap(data)
    if is_grad_enabled():
        parents = tuple(x.node for x in inputs)
        for p in parents:
            if p is not None:
                out.node = Node(parents, backward, op)
                break
    return out


_result = custom_op


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------
def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b or not b:
        return a
    if not a:
        return b
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast") from None


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return sum_to(g, shape)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (inverse of trailing-aligned broadcasting)."""
    shape = tuple(shape)
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True).reshape(shape) if axes else x.data.reshape(shape)

    def bw(g):
        return (broadcast_to(g, x.shape),)

    return _result(data, (x,), bw, "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None

    def bw(g):
        return (sum_to(g, x.shape),)

    return _result(data, (x,), bw, "broadcast_to")


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def bw(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.node is not None else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.node is not None else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)

    def bw(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.node is not None else None
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape) if b.node is not None else None
        return ga, gb

    return _result(a.data / b.data, (a, b), bw, "div")


def pow(a, b) -> Tensor:
    """``a ** b``; a Python-number exponent is treated as a constant."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        p = float(b)
        if p == 1.0:
            return a

        def bw(g):
            return (mul(g, mul(p, pow(a, p - 1.0))),)

        return _result(np.power(a.data, p), (a,), bw, "pow")
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("pow", a.shape, b.shape)
    out = _result(np.power(a.data, b.data), (a, b), None, "pow")
    if out.node is not None:

        def bw(g):
            ga = _unbroadcast(mul(g, mul(b, pow(a, sub(b, 1.0)))), a.shape) if a.node is not None else None
            gb = _unbroadcast(mul(g, mul(log(a), out)), b.shape) if b.node is not None else None
            return ga, gb

        out.node.backward = bw
    return out


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("where", _broadcast_shape("where", cond.shape, a.shape), b.shape)

    def bw(g):
        zero = zeros(())
        return (
            _unbroadcast(where(cond, g, zero), a.shape),
            _unbroadcast(where(cond, zero, g), b.shape),
        )

    data = np.where(cond, a.data, b.data)
    return _result(np.broadcast_to(data, shape), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------
def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (neg(g),), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.exp(a.data), (a,), None, "exp")
    if out.node is not None:
        out.node.backward = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.sqrt(a.data), (a,), None, "sqrt")
    if out.node is not None:
        out.node.backward = lambda g: (div(mul(g, 0.5), out),)
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),), "cos")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.tanh(a.data), (a,), None, "tanh")
    if out.node is not None:
        out.node.backward = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def _expit(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _result(_expit(a.data), (a,), None, "sigmoid")
    if out.node is not None:
        out.node.backward = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def abs(a) -> Tensor:
    a = as_tensor(a)
    sign = _wrap(np.sign(a.data))
    return _result(np.abs(a.data), (a,), lambda g: (mul(g, sign),), "abs")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    data = a.data.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(data), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if isinstance(shape, int):
        shape = (shape,)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    if data.shape == a.shape:
        return a
    return _result(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2 and axes is None:
        return a
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a, idx) -> Tensor:
    """``a[idx]`` for constant integer, slice or integer-array indices."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    data = a.data[idx]

    def bw(g):
        return (index_add(g, idx, a.shape),)

    return _result(np.asarray(data), (a,), bw, "index")


def index_add(g, idx, shape) -> Tensor:
    """Scatter-add ``g`` into ``zeros(shape)`` at ``idx`` (adjoint of index)."""
    g = as_tensor(g)
    data = np.zeros(shape)
    if _is_basic_index(idx):
        data[idx] += g.data
    else:
        np.add.at(data, idx, g.data)
    return _result(data, (g,), lambda gg: (index(gg, idx),), "index_add")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty sequence")
    ndim = ts[0].ndim
    for t in ts:
        if t.ndim != ndim:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} have different ranks")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    ax = axis % ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.node is None:
                out.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(lo), int(hi))
            out.append(index(g, tuple(sl)))
        return tuple(out)

    return _result(data, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: empty sequence")
    for t in ts:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    data = np.stack([t.data for t in ts], axis=axis)
    ax = axis % data.ndim

    def bw(g):
        out = []
        for i, t in enumerate(ts):
            if t.node is None:
                out.append(None)
                continue
            sl = [slice(None)] * data.ndim
            sl[ax] = i
            out.append(index(g, tuple(sl)))
        return tuple(out)

    return _result(data, ts, bw, "stack")


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank 1 or 2 (numpy promotion rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must have rank 1 or 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim == 1 or b.ndim == 1:
        a2 = reshape(a, (1, -1)) if a.ndim == 1 else a
        b2 = reshape(b, (-1, 1)) if b.ndim == 1 else b
        out = matmul(a2, b2)
        shape = a.shape[:-1] + b.shape[1:]
        return reshape(out, shape)

    def bw(g):
        ga = matmul(g, transpose(b)) if a.node is not None else None
        gb = matmul(transpose(a), g) if b.node is not None else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return sum(mul(a, b))


def norm(a) -> Tensor:
    return sqrt(sum(mul(a, a)))


def identity(a) -> Tensor:
    """Return a fresh node aliasing ``a`` (a leaf when ``a`` is constant)."""
    a = as_tensor(a)
    if a.node is None:
        return Tensor(a.data, requires_grad=True)
    return _result(a.data, (a,), lambda g: (g,), "identity")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------
def _toposort(roots: Sequence[Node], stop: set[int]) -> list[Node]:
    visited: set[int] = set()
    order: list[Node] = []
    for root in roots:
        if root is None or id(root) in visited:
            continue
        visited.add(id(root))
        if id(root) in stop:
            order.append(root)
            continue
        stack = [(root, iter(root.parents))]
        while stack:
            node, it = stack[-1]
            for p in it:
                if p is None or id(p) in visited:
                    continue
                visited.add(id(p))
                if id(p) in stop:
                    order.append(p)
                    continue
                stack.append((p, iter(p.parents)))
                break
            else:
                stack.pop()
                order.append(node)
    return order


def _backprop(outputs, inputs, grad_outputs, create_graph: bool, stop_at_inputs: bool) -> list[Tensor]:
    targets = {id(t.node) for t in inputs if t.node is not None}
    grads: dict[int, Tensor] = {}
    roots = []
    for out, g in zip(outputs, grad_outputs):
        if out.node is None:
            continue
        g = as_tensor(g)
        if g.shape != out.shape:
            raise ShapeError(f"grad: cotangent shape {g.shape} does not match output shape {out.shape}")
        key = id(out.node)
        grads[key] = g if key not in grads else grads[key] + g
        roots.append(out.node)

    if targets and roots:
        order = _toposort(roots, targets if stop_at_inputs else set())
        needed: dict[int, bool] = {}
        for node in order:
            key = id(node)
            needed[key] = key in targets or any(p is not None and needed.get(id(p), False) for p in node.parents)
        with set_grad_enabled(create_graph):
            for node in reversed(order):
                key = id(node)
                if node.backward is None or not needed[key]:
                    continue
                if stop_at_inputs and key in targets:
                    continue
                g = grads.get(key)
                if g is None:
                    continue
                parents = node.parents
                if not any(p is not None and needed[id(p)] for p in parents):
                    continue
                for p, gp in zip(parents, node.backward(g)):
                    if p is None or gp is None or not needed[id(p)]:
                        continue
                    pk = id(p)
                    prev = grads.get(pk)
                    grads[pk] = gp if prev is None else add(prev, gp)

    result = []
    for t in inputs:
        g = grads.get(id(t.node)) if t.node is not None else None
        if g is None:
            g = zeros(t.shape)
        elif not create_graph and g.node is not None:
            g = g.detach()
        result.append(g)
    return result


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list[Tensor]:
    """Gradient of ``outputs`` (weighted by ``grad_outputs``) wrt ``inputs``.

    Scalar outputs default to a unit cotangent. Inputs not connected to the
    outputs get a zero tensor. With ``create_graph`` the returned tensors are
    recorded on the tape and can be differentiated again.
    """
    single_out = isinstance(outputs, Tensor)
    outputs = [outputs] if single_out else list(outputs)
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    if grad_outputs is None:
        grad_outputs = []
        for out in outputs:
            if out.size != 1:
                raise ShapeError(f"grad: implicit cotangent needs a scalar output, got shape {out.shape}")
            grad_outputs.append(ones(out.shape))
    elif isinstance(grad_outputs, Tensor) or not isinstance(grad_outputs, (list, tuple)):
        grad_outputs = [grad_outputs]
    return _backprop(outputs, inputs, list(grad_outputs), create_graph, stop_at_inputs=False)


def _prepare_inputs(inputs, wrt, create_graph: bool) -> list[Tensor]:
    args = []
    for i, x in enumerate(inputs):
        x = as_tensor(x)
        if i in wrt:
            args.append(identity(x) if create_graph else Tensor(x.data, requires_grad=True))
        else:
            args.append(x if create_graph else x.detach())
    return args


def vjp(fn: ParamFunc, inputs: Sequence, cotangent, wrt: Sequence[int] | None = None,
        create_graph: bool | None = None, return_value: bool = False):
    """Cotangent-weighted Jacobian of ``fn(*inputs)`` wrt the selected inputs.

    ``create_graph`` defaults to the current grad mode, so a vjp evaluated
    inside a recorded backward pass stays differentiable.
    """
    if create_graph is None:
        create_graph = is_grad_enabled()
    wrt = tuple(range(len(inputs))) if wrt is None else tuple(wrt)
    with enable_grad():
        args = _prepare_inputs(inputs, wrt, create_graph)
        out = as_tensor(fn(*args))
        cot = as_tensor(cotangent)
        if cot.shape != out.shape:
            raise ShapeError(f"vjp: cotangent shape {cot.shape} does not match output shape {out.shape}")
        grads = _backprop([out], [args[i] for i in wrt], [cot], create_graph, stop_at_inputs=True)
    if return_value:
        return (out if create_graph else out.detach()), grads
    return grads


def jacobian(fn: ParamFunc, inputs: Sequence, wrt: int = 0) -> np.ndarray:
    """Dense Jacobian (flattened output x flattened input) as a numpy array.

    The function is recorded once and replayed with basis cotangents.
    """
    with enable_grad():
        args = _prepare_inputs(inputs, (wrt,), False)
        out = as_tensor(fn(*args))
        target = args[wrt]
        rows = np.empty((out.size, target.size))
        basis = np.zeros(out.size)
        for k in range(out.size):
            basis[k] = 1.0
            (g,) = _backprop([out], [target], [_wrap(basis.reshape(out.shape))], False, True)
            rows[k] = g.data.ravel()
            basis[k] = 0.0
    return rows
