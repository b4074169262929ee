"""
Dense float64 tensors with a recorded computation graph.

Every differentiable operation in the package goes through
``primitive_forward``: it evaluates the kernel with numpy, validates the
result, and appends a node to the active ``Graph`` when any input requires a
gradient. ``backward`` walks that graph in strict reverse append order and
accumulates gradients into the leaves.

The primitive set is exactly what the model and losses need:

    matmul, add, sub, mul, scalar_mul, exp, log, sigmoid, gelu, softmax,
    log_softmax, sum, mean, transpose, reshape, concat, slice, broadcast,
    layer_norm, embedding, squared_error, straight_through
"""

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from .exceptions import GraphError, IndexRangeError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """
    Dense n-dimensional float64 array.

    Leaves (parameters and inputs) have ``node_id = None``. Outputs of recorded
    primitives carry the index of the node that produced them together with the
    epoch of the graph they belong to; a tensor from a discarded graph is
    treated as a constant.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_epoch", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._epoch = None
        self.name = name

    @classmethod
    def _from_kernel(cls, arr, requires_grad):
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = None
        out._epoch = None
        out.name = None
        return out

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def assign(self, values) -> None:
        """Replace the buffer between steps (optimizer updates, gradient checks)."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign: expected shape {list(self.data.shape)}, got {list(arr.shape)}")
        arr.flags.writeable = False
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor._from_kernel(self.data.copy(), False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every branch lands in a primitive

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Graph bookkeeping
# ---------------------------------------------------------------------------

_EPOCHS = itertools.count()


@dataclass
class Node:
    kind: str
    inputs: Tuple[Tensor, ...]
    attrs: Dict[str, Any]
    saved: Dict[str, Any]
    output: np.ndarray


@dataclass
class Graph:
    """Append-only list of recorded primitive applications."""

    nodes: List[Node] = field(default_factory=list)
    epoch: int = field(default_factory=lambda: next(_EPOCHS))

    def __len__(self):
        return len(self.nodes)

    def owns(self, t: Tensor) -> bool:
        return t.node_id is not None and t._epoch == self.epoch


class _GraphState:
    def __init__(self):
        self.graph = Graph()
        self.enabled = True


_state = _GraphState()


def active_graph() -> Graph:
    return _state.graph


def reset_graph() -> Graph:
    """Discard the active graph and start a fresh one."""
    _state.graph = Graph()
    return _state.graph


def is_grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording nodes."""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _tracked(t: Tensor, graph: Graph) -> bool:
    if not t.requires_grad:
        return False
    return t.node_id is None or graph.owns(t)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------


class Primitive(NamedTuple):
    forward: Callable
    backward: Callable
    arity: Optional[int]


_PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(kind, arity=1):
    """Register ``forward`` / ``backward`` kernels for an op kind.

    ``forward(arrays, attrs) -> (out, saved)``
    ``backward(grad, arrays, out, saved, attrs) -> tuple of input grads``
    """

    def decorator(pair):
        fwd, bwd = pair
        _PRIMITIVES[kind] = Primitive(fwd, bwd, arity)
        return pair

    return decorator


def primitive_kinds() -> List[str]:
    return sorted(_PRIMITIVES)


def primitive_forward(kind: str, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    prim = _PRIMITIVES.get(kind)
    if prim is None:
        raise GraphError(f"unknown primitive kind {kind!r}")
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(f"{kind}: expected {prim.arity} inputs, got {len(inputs)}")
    attrs = dict(attrs or {})
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = [t.data for t in inputs]

    with np.errstate(all="ignore"):
        out, saved = prim.forward(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind}: produced non-finite values")

    graph = _state.graph
    record = _state.enabled and any(_tracked(t, graph) for t in inputs)
    result = Tensor._from_kernel(out, record)
    if record:
        graph.nodes.append(Node(kind, inputs, attrs, saved, out))
        result.node_id = len(graph.nodes) - 1
        result._epoch = graph.epoch
    return result


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires it, then discard the graph."""
    if loss.data.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    graph = _state.graph
    if not graph.nodes:
        raise GraphError("backward: the active graph is empty")
    if not graph.owns(loss):
        raise GraphError("backward: loss is not connected to the active graph")

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
    for idx in range(loss.node_id, -1, -1):
        grad = pending.pop(idx, None)
        if grad is None:
            continue
        node = graph.nodes[idx]
        prim = _PRIMITIVES[node.kind]
        arrays = [t.data for t in node.inputs]
        input_grads = prim.backward(grad, arrays, node.output, node.saved, node.attrs)
        for t, g in zip(node.inputs, input_grads):
            if g is None or not _tracked(t, graph):
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.data.shape:
                raise GraphError(f"{node.kind}: gradient shape {list(g.shape)} != input shape {t.shape}")
            if graph.owns(t):
                prev = pending.get(t.node_id)
                pending[t.node_id] = g if prev is None else prev + g
            else:
                t.grad = g.copy() if t.grad is None else t.grad + g
    reset_graph()


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def _expand_reduced(grad, shape, axes, keepdims):
    if not keepdims:
        for a in axes:
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


def _matmul_fwd(arrays, attrs):
    a, b = arrays
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}") from None
    return np.matmul(a, b), None


def _matmul_bwd(g, arrays, out, saved, attrs):
    a, b = arrays
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_primitive("matmul", arity=2)((_matmul_fwd, _matmul_bwd))


def _add_fwd(arrays, attrs):
    a, b = arrays
    _broadcast_shape("add", a, b)
    return a + b, None


def _add_bwd(g, arrays, out, saved, attrs):
    a, b = arrays
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


register_primitive("add", arity=2)((_add_fwd, _add_bwd))


def _sub_fwd(arrays, attrs):
    a, b = arrays
    _broadcast_shape("sub", a, b)
    return a - b, None


def _sub_bwd(g, arrays, out, saved, attrs):
    a, b = arrays
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


register_primitive("sub", arity=2)((_sub_fwd, _sub_bwd))


def _mul_fwd(arrays, attrs):
    a, b = arrays
    _broadcast_shape("mul", a, b)
    return a * b, None


def _mul_bwd(g, arrays, out, saved, attrs):
    a, b = arrays
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


register_primitive("mul", arity=2)((_mul_fwd, _mul_bwd))


def _scalar_mul_fwd(arrays, attrs):
    return arrays[0] * float(attrs["scalar"]), None


def _scalar_mul_bwd(g, arrays, out, saved, attrs):
    return (g * float(attrs["scalar"]),)


register_primitive("scalar_mul")((_scalar_mul_fwd, _scalar_mul_bwd))


def _exp_fwd(arrays, attrs):
    return np.exp(arrays[0]), None


def _exp_bwd(g, arrays, out, saved, attrs):
    return (g * out,)


register_primitive("exp")((_exp_fwd, _exp_bwd))


def _log_fwd(arrays, attrs):
    return np.log(arrays[0]), None


def _log_bwd(g, arrays, out, saved, attrs):
    return (g / arrays[0],)


register_primitive("log")((_log_fwd, _log_bwd))


def _sigmoid_fwd(arrays, attrs):
    return expit(arrays[0]), None


def _sigmoid_bwd(g, arrays, out, saved, attrs):
    return (g * out * (1.0 - out),)


register_primitive("sigmoid")((_sigmoid_fwd, _sigmoid_bwd))


def _gelu_fwd(arrays, attrs):
    x = arrays[0]
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, {"cdf": cdf}


def _gelu_bwd(g, arrays, out, saved, attrs):
    x = arrays[0]
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (g * (saved["cdf"] + x * pdf),)


register_primitive("gelu")((_gelu_fwd, _gelu_bwd))


def _softmax_fwd(arrays, attrs):
    x = arrays[0]
    axis = attrs.get("axis", -1)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True), None


def _softmax_bwd(g, arrays, out, saved, attrs):
    axis = attrs.get("axis", -1)
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


register_primitive("softmax")((_softmax_fwd, _softmax_bwd))


def _log_softmax_fwd(arrays, attrs):
    x = arrays[0]
    axis = attrs.get("axis", -1)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)), None


def _log_softmax_bwd(g, arrays, out, saved, attrs):
    axis = attrs.get("axis", -1)
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


register_primitive("log_softmax")((_log_softmax_fwd, _log_softmax_bwd))


def _sum_fwd(arrays, attrs):
    x = arrays[0]
    axes = _normalize_axis(attrs.get("axis"), x.ndim)
    return np.sum(x, axis=axes, keepdims=attrs.get("keepdims", False)), None


def _sum_bwd(g, arrays, out, saved, attrs):
    x = arrays[0]
    axes = _normalize_axis(attrs.get("axis"), x.ndim)
    return (_expand_reduced(g, x.shape, axes, attrs.get("keepdims", False)).copy(),)


register_primitive("sum")((_sum_fwd, _sum_bwd))


def _mean_fwd(arrays, attrs):
    x = arrays[0]
    axes = _normalize_axis(attrs.get("axis"), x.ndim)
    return np.mean(x, axis=axes, keepdims=attrs.get("keepdims", False)), None


def _mean_bwd(g, arrays, out, saved, attrs):
    x = arrays[0]
    axes = _normalize_axis(attrs.get("axis"), x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return (_expand_reduced(g, x.shape, axes, attrs.get("keepdims", False)) / count,)


register_primitive("mean")((_mean_fwd, _mean_bwd))


def _transpose_fwd(arrays, attrs):
    x = arrays[0]
    axes = attrs.get("axes")
    if axes is not None and sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {list(axes)} invalid for shape {list(x.shape)}")
    return np.transpose(x, axes).copy(), None


def _transpose_bwd(g, arrays, out, saved, attrs):
    axes = attrs.get("axes")
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort([a % g.ndim for a in axes])),)


register_primitive("transpose")((_transpose_fwd, _transpose_bwd))


def _reshape_fwd(arrays, attrs):
    x = arrays[0]
    try:
        return np.reshape(x, attrs["shape"]).copy(), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {list(x.shape)} into {list(attrs['shape'])}") from None


def _reshape_bwd(g, arrays, out, saved, attrs):
    return (np.reshape(g, arrays[0].shape),)


register_primitive("reshape")((_reshape_fwd, _reshape_bwd))


def _concat_fwd(arrays, attrs):
    axis = attrs.get("axis", 0)
    ref = arrays[0]
    for other in arrays[1:]:
        if other.ndim != ref.ndim or any(
            i != axis % ref.ndim and s1 != s2 for i, (s1, s2) in enumerate(zip(ref.shape, other.shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {list(ref.shape)} and {list(other.shape)}")
    return np.concatenate(arrays, axis=axis), None


def _concat_bwd(g, arrays, out, saved, attrs):
    axis = attrs.get("axis", 0)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(part.copy() for part in np.split(g, bounds, axis=axis))


register_primitive("concat", arity=None)((_concat_fwd, _concat_bwd))


def _slice_fwd(arrays, attrs):
    return np.array(arrays[0][attrs["key"]], dtype=np.float64), None


def _slice_bwd(g, arrays, out, saved, attrs):
    grad = np.zeros_like(arrays[0])
    np.add.at(grad, attrs["key"], g)
    return (grad,)


register_primitive("slice")((_slice_fwd, _slice_bwd))


def _broadcast_fwd(arrays, attrs):
    x = arrays[0]
    try:
        return np.broadcast_to(x, tuple(attrs["shape"])).copy(), None
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {list(x.shape)} to {list(attrs['shape'])}") from None


def _broadcast_bwd(g, arrays, out, saved, attrs):
    return (_unbroadcast(g, arrays[0].shape),)


register_primitive("broadcast")((_broadcast_fwd, _broadcast_bwd))


def _layer_norm_fwd(arrays, attrs):
    x = arrays[0]
    eps = attrs.get("eps", 1e-5)
    mu = np.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    y = centered * inv_std
    return y, {"inv_std": inv_std}


def _layer_norm_bwd(g, arrays, out, saved, attrs):
    inv_std = saved["inv_std"]
    g_mean = np.mean(g, axis=-1, keepdims=True)
    gy_mean = np.mean(g * out, axis=-1, keepdims=True)
    return (inv_std * (g - g_mean - out * gy_mean),)


register_primitive("layer_norm")((_layer_norm_fwd, _layer_norm_bwd))


def _embedding_fwd(arrays, attrs):
    table = arrays[0]
    ids = np.asarray(attrs["ids"], dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {list(table.shape)}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids.max()) if ids.max() >= table.shape[0] else int(ids.min())
        raise IndexRangeError(f"embedding: token id {bad} out of range [0, {table.shape[0]})")
    return table[ids], None


def _embedding_bwd(g, arrays, out, saved, attrs):
    grad = np.zeros_like(arrays[0])
    np.add.at(grad, np.asarray(attrs["ids"], dtype=np.int64), g)
    return (grad,)


register_primitive("embedding")((_embedding_fwd, _embedding_bwd))


def _squared_error_fwd(arrays, attrs):
    a, b = arrays
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes {list(a.shape)} and {list(b.shape)} differ")
    diff = a - b
    return diff * diff, {"diff": diff}


def _squared_error_bwd(g, arrays, out, saved, attrs):
    d = 2.0 * saved["diff"] * g
    return d, -d


register_primitive("squared_error", arity=2)((_squared_error_fwd, _squared_error_bwd))


def _straight_through_fwd(arrays, attrs):
    relaxed = arrays[0]
    hard = np.asarray(attrs["hard"], dtype=np.float64)
    if hard.shape != relaxed.shape:
        raise ShapeError(f"straight_through: shapes {list(relaxed.shape)} and {list(hard.shape)} differ")
    return hard.copy(), None


def _straight_through_bwd(g, arrays, out, saved, attrs):
    return (g,)


register_primitive("straight_through")((_straight_through_fwd, _straight_through_bwd))


# ---------------------------------------------------------------------------
# Functional front end
# ---------------------------------------------------------------------------


def matmul(a, b):
    return primitive_forward("matmul", (a, b))


def add(a, b):
    return primitive_forward("add", (a, b))


def sub(a, b):
    return primitive_forward("sub", (a, b))


def mul(a, b):
    return primitive_forward("mul", (a, b))


def scalar_mul(x, scalar):
    return primitive_forward("scalar_mul", (x,), {"scalar": float(scalar)})


def exp(x):
    return primitive_forward("exp", (x,))


def log(x):
    return primitive_forward("log", (x,))


def sigmoid(x):
    return primitive_forward("sigmoid", (x,))


def gelu(x):
    return primitive_forward("gelu", (x,))


def softmax(x, axis=-1):
    return primitive_forward("softmax", (x,), {"axis": axis})


def log_softmax(x, axis=-1):
    return primitive_forward("log_softmax", (x,), {"axis": axis})


def tensor_sum(x, axis=None, keepdims=False):
    return primitive_forward("sum", (x,), {"axis": axis, "keepdims": keepdims})


def mean(x, axis=None, keepdims=False):
    return primitive_forward("mean", (x,), {"axis": axis, "keepdims": keepdims})


def transpose(x, axes=None):
    return primitive_forward("transpose", (x,), {"axes": None if axes is None else tuple(axes)})


def reshape(x, shape):
    return primitive_forward("reshape", (x,), {"shape": tuple(int(s) for s in shape)})


def concat(tensors, axis=0):
    return primitive_forward("concat", tuple(tensors), {"axis": axis})


def slice_(x, key):
    return primitive_forward("slice", (x,), {"key": key})


def broadcast(x, shape):
    return primitive_forward("broadcast", (x,), {"shape": tuple(int(s) for s in shape)})


def layer_norm(x, eps=1e-5):
    return primitive_forward("layer_norm", (x,), {"eps": eps})


def embedding(table, ids):
    return primitive_forward("embedding", (table,), {"ids": np.asarray(ids, dtype=np.int64)})


def squared_error(a, b):
    return primitive_forward("squared_error", (a, b))


def straight_through(relaxed, hard):
    """Forward value ``hard``; gradient passed to ``relaxed`` unchanged."""
    return primitive_forward("straight_through", (relaxed,), {"hard": np.asarray(hard, dtype=np.float64)})


def stack(tensors, axis=0):
    """Stack same-shaped tensors along a new axis (reshape + concat)."""
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        pos = axis % (len(shape) + 1)
        expanded.append(reshape(t, shape[:pos] + [1] + shape[pos:]))
    return concat(expanded, axis=axis)
