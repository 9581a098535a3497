"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Graph`. Outside
a ``with Graph():`` block nothing is recorded, which is how evaluation and
benchmarks run forward-only without paying for closures.

Shapes follow numpy. Leading axes act as batch axes for ``matmul``; the only
broadcasting the backward pass needs to undo is the row-vector-vs-matrix
style (size-1 or missing leading axes), handled by :func:`_unbroadcast`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input lies outside the domain of a function (e.g. log of 0)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None and isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            dtype = data.dtype
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        # set when the tensor is the output of a recorded node
        self.graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def current_graph() -> "Graph | None":
    st = _stack()
    return st[-1] if st else None


class Graph:
    """Append-only tape of executed operations.

    A graph belongs to the thread that opened it. Nodes are appended in
    execution order, so the append order is already a topological order and
    :func:`backward` simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if not st or st[-1] is not self:
            raise RuntimeError("graph contexts exited out of order")
        st.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Callable) -> None:
        output.graph = self
        self._index[id(output)] = len(self.nodes)
        self.nodes.append(_Node(inputs, output, backward))

    def position(self, t: Tensor) -> int:
        return self._index[id(t)]


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.graph is not None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, check: bool = True) -> Tensor:
    if check and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.graph = None
    out.name = None
    out.requires_grad = False
    g = current_graph()
    if g is not None and any(_needs_grad(t) for t in inputs):
        g.record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add to whatever is already stored, so calling this repeatedly
    (for instance once per sample) sums contributions; clear them with
    :func:`zero_grads` between optimizer steps.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.graph is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise RuntimeError("loss was not produced inside a Graph")
    graph = loss.graph
    start = graph.position(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: start + 1]):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        local = node.backward(g_out)
        for inp, g_in in zip(node.inputs, local):
            if g_in is None or not _needs_grad(inp):
                continue
            if inp.graph is None:
                # leaf
                inp.grad = g_in.copy() if inp.grad is None else inp.grad + g_in
            else:
                key = id(inp)
                grads[key] = g_in if key not in grads else grads[key] + g_in


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def _back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(out, (a, b), _back)


def _check_same_or_row(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_row(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_row(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_or_row(a, b)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-free form max(x, 0) + log1p(exp(-|x|))."""
    xd = x.data
    tail = np.exp(-np.abs(xd))
    out = np.maximum(xd, 0.0) + np.log1p(tail)

    def _back(g):
        sig = np.where(xd >= 0, 1.0, tail) / (1.0 + tail)
        return (g * sig,)

    return _emit(out, (x,), _back)


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log requires strictly positive inputs")
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def total(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum of elements, optionally along one axis."""
    xd = x.data
    out = np.sum(xd, axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _emit(np.asarray(out), (x,), _back)


sum = total  # noqa: A001  (mirrors numpy naming inside this module's namespace)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def _back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _emit(out, (x,), _back)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unsupported activation {kind!r}; expected 'relu' or 'gelu'")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) removes positions before
    normalization; removed positions get exactly zero weight. A row with no
    kept position is an error.
    """
    xd = x.data
    if xd.ndim == 0 or xd.shape[-1] == 0:
        raise DimensionError("softmax of an empty row")
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not np.all(mask.any(axis=-1)):
            raise DimensionError("softmax row has every position masked")
        shifted = np.where(mask, xd, -np.inf)
    else:
        shifted = xd
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)
    # one more normalization pass pins the row sum to 1 at rounding level
    out = out / out.sum(axis=-1, keepdims=True)

    def _back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (x,), _back)


def softmax_row(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"softmax_row expects a 1xk tensor, got {x.shape}")
    return softmax(x)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not ts:
        raise DimensionError("concat of an empty list")
    datas = [t.data for t in ts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(ts), _back)


def concat_rows(ts: Sequence[Tensor]) -> Tensor:
    """Join 1xk row vectors end to end into a single 1x(sum k) row."""
    return concat(ts, axis=-1)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), check=False)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), check=False)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``index.shape + (cols,)``."""
    idx = np.asarray(index, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"row index out of range for table with {n_rows} rows")
    td = table.data

    def _back(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return _emit(td[idx], (table,), _back, check=False)


def select(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``select(E, (slice(None), slice(-1, None)))``."""
    xd = x.data
    out = xd[key]

    def _back(g):
        gx = np.zeros_like(xd)
        gx[key] = g
        return (gx,)

    return _emit(np.ascontiguousarray(out), (x,), _back, check=False)


def mask_rows(x: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask (broadcast over the last axis)."""
    m = np.asarray(keep, dtype=x.data.dtype)
    return _emit(x.data * m, (x,), lambda g: (g * m,), check=False)
