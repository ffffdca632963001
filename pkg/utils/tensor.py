"""
Reverse-mode differentiable tensor core.

Tensors wrap numpy arrays. Ops evaluated inside an active ``Graph`` are
recorded on its tape; ``backward`` walks the tape once in reverse and returns
one gradient per registered parameter. Outside a graph nothing is recorded,
which is the inference path.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        message = f"op '{op}' produced non-finite values"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ShapeError(ValueError):
    """Inputs of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"op '{op}': incompatible shapes {rendered}")


class Tensor:
    """Dense array plus autograd bookkeeping."""

    __slots__ = ("data", "requires_grad", "name", "op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


_ACTIVE: List["Graph"] = []


class Graph:
    """Ordered tape of op records; consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording on every active graph."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.extend(self._saved)
        return False


def _active_graph() -> Optional[Graph]:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(op, f"shape {arr.shape}")


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    _check_finite(op, data)
    graph = _active_graph()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked, op=op)
    if tracked:
        if graph.consumed:
            raise RuntimeError("cannot record on a graph that was already consumed by backward")
        graph.nodes.append(_Node(op, out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return g, g

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return g, -g

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return _emit("mul", a.data * b.data, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


def square(x: Tensor) -> Tensor:
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul", data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError("transpose", x.shape)
    return _emit("transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    original = x.shape
    return _emit("reshape", data, (x,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", data, tensors, backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic numpy indexing (ints and slices); gradient scatters back."""
    try:
        data = x.data[key]
    except IndexError:
        raise ShapeError("slice", x.shape) from None

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _emit("slice", np.array(data, copy=True), (x,), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(data), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _emit("layer_norm", xhat, (x,), backward)


def max_pool(x: Tensor, axis: int = -2) -> Tensor:
    """Max over ``axis``; ties route gradient to the lowest index."""
    axis = axis % x.data.ndim
    idx = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit("max_pool", data, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError("embedding", table.shape, ids.shape)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("embedding", table.data[ids], (table,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (stable form)."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    z = logits.data
    data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (expit(z) - t),)

    return _emit("bce_with_logits", data, (logits,), backward)


# ---------------------------------------------------------------------------
# Parameters and backward
# ---------------------------------------------------------------------------

class Parameters:
    """Named registry of trainable tensors."""

    def __init__(self, tensors: Optional[Dict[str, np.ndarray]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, arr in (tensors or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter '{name}' already registered")
        tensor = Tensor(np.asarray(arr), requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def items(self):
        return self._tensors.items()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def astype(self, dtype) -> "Parameters":
        return Parameters({name: t.data.astype(dtype) for name, t in self._tensors.items()})

    def copy(self) -> "Parameters":
        return Parameters({name: t.data.copy() for name, t in self._tensors.items()})

    def load(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in arrays.items():
            target = self._tensors[name]
            arr = np.asarray(arr, dtype=target.dtype)
            if arr.shape != target.shape:
                raise ShapeError("load", target.shape, arr.shape)
            target.data = arr.copy()


def backward(graph: Graph, loss: Tensor, params: Parameters) -> Dict[str, np.ndarray]:
    """Run reverse mode over ``graph`` once; zero grads for unreachable params."""
    if graph.consumed:
        raise RuntimeError("graph already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    graph.consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for tensor, tg in zip(node.inputs, input_grads):
            if not tensor.requires_grad or tg is None:
                continue
            tg = _unbroadcast(np.asarray(tg), tensor.shape)
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg

    result = {}
    for name, tensor in params.items():
        g = grads.get(id(tensor))
        result[name] = np.zeros_like(tensor.data) if g is None else g.reshape(tensor.shape)
    return result


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """One LSTM step; gate order in the fused weights is (input, forget, cell, output)."""
    w_x, w_h, b = params["w_x"], params["w_h"], params["b"]
    hidden = w_h.shape[0]
    if x.shape[-1] != w_x.shape[0] or h_prev.shape[-1] != hidden or c_prev.shape[-1] != hidden:
        raise ShapeError("lstm_cell", x.shape, h_prev.shape, c_prev.shape, w_x.shape)
    z = add(add(matmul(x, w_x), matmul(h_prev, w_h)), b)
    i = sigmoid(slice_(z, (Ellipsis, slice(0, hidden))))
    f = sigmoid(slice_(z, (Ellipsis, slice(hidden, 2 * hidden))))
    g = tanh(slice_(z, (Ellipsis, slice(2 * hidden, 3 * hidden))))
    o = sigmoid(slice_(z, (Ellipsis, slice(3 * hidden, 4 * hidden))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar ``fn`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + h
        plus = fn()
        flat[k] = saved - h
        minus = fn()
        flat[k] = saved
        out[k] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def tensors_finite(values: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(v)) for v in values)
