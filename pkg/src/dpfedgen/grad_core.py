"""
Gradient Core
Dense float64 tensors and a define-then-run compute graph with reverse-mode
differentiation, sized for the desk-scale models
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .exceptions import NonFiniteError, ShapeError, UnboundLeafError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]


class Tensor:
    """Immutable dense tensor of 64-bit reals"""

    __slots__ = ("_data",)

    def __init__(self, data: ArrayLike):
        if isinstance(data, Tensor):
            self._data = data._data
            return
        array = np.array(data, dtype=np.float64, copy=True)
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"Tensor extents must be positive, got {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("Tensor contains NaN or infinite values")
        array.setflags(write=False)
        self._data = array

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self) -> int:
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._data!r})"


@dataclass(frozen=True)
class Node:
    """One primitive operation in a graph"""
    id: int
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict, compare=False)
    name: Optional[str] = None


LEAF_OPS = ("input", "param", "constant")


class Graph:
    """
    Append-only compute graph.

    Nodes are created through the op methods and receive increasing ids, so
    the node list is always a valid topological order. Leaves are inputs
    (bound at evaluation, not differentiated), params (bound at evaluation,
    differentiated) and constants.
    """

    def __init__(self):
        self._nodes: List[Node] = []
        self._names: Dict[str, int] = {}

    @property
    def nodes(self) -> Tuple[Node, ...]:
        return tuple(self._nodes)

    def node(self, ref: Union[str, int, Node]) -> Node:
        if isinstance(ref, Node):
            return self._nodes[ref.id]
        if isinstance(ref, str):
            if ref not in self._names:
                raise KeyError(f"No node named '{ref}'")
            return self._nodes[self._names[ref]]
        return self._nodes[ref]

    @property
    def param_names(self) -> List[str]:
        return [n.name for n in self._nodes if n.op == "param"]

    @property
    def input_names(self) -> List[str]:
        return [n.name for n in self._nodes if n.op == "input"]

    def named_outputs(self) -> List[str]:
        return [n.name for n in self._nodes if n.name and n.op not in LEAF_OPS]

    def _add(self, op: str, inputs: Iterable[Node], name: Optional[str] = None,
             **attrs: Any) -> Node:
        input_ids = []
        for item in inputs:
            if not isinstance(item, Node) or item.id >= len(self._nodes) or self._nodes[item.id] is not item:
                raise ValueError(f"Operand of '{op}' does not belong to this graph")
            input_ids.append(item.id)
        if name is not None and name in self._names:
            raise ValueError(f"Duplicate node name '{name}'")
        node = Node(len(self._nodes), op, tuple(input_ids), attrs, name)
        self._nodes.append(node)
        if name is not None:
            self._names[name] = node.id
        return node

    # Leaves

    def input(self, name: str, shape: Optional[Sequence[Optional[int]]] = None) -> Node:
        """Bound at evaluation time, never differentiated"""
        return self._add("input", (), name, shape=None if shape is None else tuple(shape))

    def param(self, name: str, shape: Sequence[int]) -> Node:
        """Trainable leaf"""
        return self._add("param", (), name, shape=tuple(shape))

    def constant(self, value: ArrayLike, name: Optional[str] = None) -> Node:
        return self._add("constant", (), name, value=Tensor(value).data)

    # Primitives

    def add(self, a: Node, b: Node, name: Optional[str] = None) -> Node:
        return self._add("add", (a, b), name)

    def multiply(self, a: Node, b: Node, name: Optional[str] = None) -> Node:
        return self._add("multiply", (a, b), name)

    def matmul(self, a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False,
               name: Optional[str] = None) -> Node:
        return self._add("matmul", (a, b), name, transpose_a=transpose_a, transpose_b=transpose_b)

    def affine(self, x: Node, weight: Node, bias: Node, name: Optional[str] = None) -> Node:
        return self._add("affine", (x, weight, bias), name)

    def relu(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("relu", (x,), name)

    def leaky_relu(self, x: Node, slope: float = 0.2, name: Optional[str] = None) -> Node:
        return self._add("leaky_relu", (x,), name, slope=float(slope))

    def leaky_relu_slope(self, x: Node, slope: float = 0.2, name: Optional[str] = None) -> Node:
        """Derivative mask of leaky_relu (1 where x > 0, slope elsewhere); zero gradient"""
        return self._add("leaky_relu_slope", (x,), name, slope=float(slope))

    def sigmoid(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("sigmoid", (x,), name)

    def tanh(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("tanh", (x,), name)

    def softmax(self, x: Node, name: Optional[str] = None) -> Node:
        """Softmax over the last axis"""
        return self._add("softmax", (x,), name)

    def log(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("log", (x,), name)

    def exp(self, x: Node, name: Optional[str] = None) -> Node:
        return self._add("exp", (x,), name)

    def mean(self, x: Node, axis: Optional[int] = None, name: Optional[str] = None) -> Node:
        return self._add("mean", (x,), name, axis=axis)

    def sum(self, x: Node, axis: Optional[int] = None, name: Optional[str] = None) -> Node:
        return self._add("sum", (x,), name, axis=axis)

    def l2_norm(self, x: Node, axis: Optional[int] = None, name: Optional[str] = None) -> Node:
        """Euclidean norm over all entries, or per row with axis=1"""
        return self._add("l2_norm", (x,), name, axis=axis)

    def concat(self, parts: Sequence[Node], axis: int = -1, name: Optional[str] = None) -> Node:
        if not parts:
            raise ValueError("concat needs at least one operand")
        return self._add("concat", tuple(parts), name, axis=axis)

    def slice(self, x: Node, start: int, stop: int, axis: int = -1,
              name: Optional[str] = None) -> Node:
        return self._add("slice", (x,), name, start=int(start), stop=int(stop), axis=axis)

    def power(self, x: Node, exponent: float, name: Optional[str] = None) -> Node:
        return self._add("power", (x,), name, exponent=float(exponent))

    # Composites

    def scale(self, x: Node, factor: float, name: Optional[str] = None) -> Node:
        return self.multiply(x, self.constant(float(factor)), name=name)

    def negate(self, x: Node, name: Optional[str] = None) -> Node:
        return self.scale(x, -1.0, name=name)

    def subtract(self, a: Node, b: Node, name: Optional[str] = None) -> Node:
        return self.add(a, self.negate(b), name=name)


# Shape helpers

def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Identical shapes, scalar operands, (k,) rows and (n, 1) columns against (n, k)"""
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    for big, small in ((a, b), (b, a)):
        if len(big) == 2 and (small == (big[1],) or small == (big[0], 1)):
            return big
    raise ShapeError(f"Cannot broadcast shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"Axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


# Forward rules: (values, attrs) -> value

def _fwd_matmul(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    a, b = vals
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    a = a.T if attrs["transpose_a"] else a
    b = b.T if attrs["transpose_b"] else b
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def _fwd_affine(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    x, w, b = vals
    if x.ndim != 2 or w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine expects (n,d)@(d,k)+(k,), got {x.shape}, {w.shape}, {b.shape}")
    return x @ w + b


def _fwd_elementwise(fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
    def forward(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
        _broadcast_shape(vals[0].shape, vals[1].shape)
        return fn(vals[0], vals[1])
    return forward


def _fwd_softmax(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    if vals[0].ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    return special.softmax(vals[0], axis=-1)


def _fwd_reduce(fn: Callable[..., np.ndarray]):
    def forward(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
        axis = attrs["axis"]
        if axis is not None:
            axis = _normalize_axis(axis, vals[0].ndim)
        return np.asarray(fn(vals[0], axis=axis))
    return forward


def _fwd_l2_norm(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    x = vals[0]
    axis = attrs["axis"]
    if axis is None:
        return np.asarray(np.sqrt(np.sum(x * x)))
    return np.sqrt(np.sum(x * x, axis=_normalize_axis(axis, x.ndim)))


def _fwd_concat(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    ndim = vals[0].ndim
    axis = _normalize_axis(attrs["axis"], ndim)
    for v in vals[1:]:
        other = [e for i, e in enumerate(v.shape) if i != axis]
        first = [e for i, e in enumerate(vals[0].shape) if i != axis]
        if v.ndim != ndim or other != first:
            raise ShapeError(f"concat shapes incompatible: {[x.shape for x in vals]}")
    return np.concatenate(vals, axis=axis)


def _fwd_slice(vals: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
    x = vals[0]
    axis = _normalize_axis(attrs["axis"], x.ndim)
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


_FORWARD: Dict[str, Callable[[List[np.ndarray], Dict[str, Any]], np.ndarray]] = {
    "add": _fwd_elementwise(np.add),
    "multiply": _fwd_elementwise(np.multiply),
    "matmul": _fwd_matmul,
    "affine": _fwd_affine,
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "leaky_relu": lambda v, a: np.where(v[0] > 0, v[0], a["slope"] * v[0]),
    "leaky_relu_slope": lambda v, a: np.where(v[0] > 0, 1.0, a["slope"]),
    "sigmoid": lambda v, a: special.expit(v[0]),
    "tanh": lambda v, a: np.tanh(v[0]),
    "softmax": _fwd_softmax,
    "log": lambda v, a: np.log(v[0]) if np.all(v[0] > 0) else np.full_like(v[0], np.nan),
    "exp": lambda v, a: np.exp(v[0]),
    "mean": _fwd_reduce(np.mean),
    "sum": _fwd_reduce(np.sum),
    "l2_norm": _fwd_l2_norm,
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "power": lambda v, a: np.power(v[0], a["exponent"]),
}


# Backward rules: (values, output, upstream grad, attrs) -> input grads

def _bwd_matmul(vals, out, grad, attrs):
    a, b = vals
    ta, tb = attrs["transpose_a"], attrs["transpose_b"]
    a_eff = a.T if ta else a
    b_eff = b.T if tb else b
    grad_a = grad @ b_eff.T
    grad_b = a_eff.T @ grad
    return [grad_a.T if ta else grad_a, grad_b.T if tb else grad_b]


def _bwd_affine(vals, out, grad, attrs):
    x, w, _ = vals
    return [grad @ w.T, x.T @ grad, grad.sum(axis=0)]


def _bwd_softmax(vals, out, grad, attrs):
    return [out * (grad - np.sum(grad * out, axis=-1, keepdims=True))]


def _bwd_mean(vals, out, grad, attrs):
    x = vals[0]
    axis = attrs["axis"]
    if axis is None:
        return [np.broadcast_to(grad / x.size, x.shape)]
    axis = _normalize_axis(axis, x.ndim)
    return [_expand_reduced(grad / x.shape[axis], x.shape, axis)]


def _bwd_sum(vals, out, grad, attrs):
    x = vals[0]
    axis = attrs["axis"]
    if axis is not None:
        axis = _normalize_axis(axis, x.ndim)
    return [_expand_reduced(grad, x.shape, axis)]


def _bwd_l2_norm(vals, out, grad, attrs):
    x = vals[0]
    axis = attrs["axis"]
    # zero subgradient at the origin
    safe = np.where(out > 0, out, 1.0)
    scale = np.where(out > 0, grad / safe, 0.0)
    if axis is None:
        return [scale * x]
    axis = _normalize_axis(axis, x.ndim)
    return [np.expand_dims(scale, axis) * x]


def _bwd_concat(vals, out, grad, attrs):
    axis = _normalize_axis(attrs["axis"], vals[0].ndim)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(grad, bounds, axis=axis))


def _bwd_slice(vals, out, grad, attrs):
    x = vals[0]
    axis = _normalize_axis(attrs["axis"], x.ndim)
    full = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(attrs["start"], attrs["stop"])
    full[tuple(index)] = grad
    return [full]


_BACKWARD: Dict[str, Callable[..., List[np.ndarray]]] = {
    "add": lambda v, o, g, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
    "multiply": lambda v, o, g, a: [_unbroadcast(g * v[1], v[0].shape),
                                    _unbroadcast(g * v[0], v[1].shape)],
    "matmul": _bwd_matmul,
    "affine": _bwd_affine,
    "relu": lambda v, o, g, a: [g * (v[0] > 0)],
    "leaky_relu": lambda v, o, g, a: [g * np.where(v[0] > 0, 1.0, a["slope"])],
    "leaky_relu_slope": lambda v, o, g, a: [np.zeros_like(v[0])],
    "sigmoid": lambda v, o, g, a: [g * o * (1.0 - o)],
    "tanh": lambda v, o, g, a: [g * (1.0 - o * o)],
    "softmax": _bwd_softmax,
    "log": lambda v, o, g, a: [g / v[0]],
    "exp": lambda v, o, g, a: [g * o],
    "mean": _bwd_mean,
    "sum": _bwd_sum,
    "l2_norm": _bwd_l2_norm,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "power": lambda v, o, g, a: [g * a["exponent"] * np.power(v[0], a["exponent"] - 1.0)],
}


def _as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return Tensor(value).data


def _ancestors(graph: Graph, targets: Iterable[int]) -> List[int]:
    needed = set()
    stack = list(targets)
    while stack:
        node_id = stack.pop()
        if node_id in needed:
            continue
        needed.add(node_id)
        stack.extend(graph.node(node_id).inputs)
    return sorted(needed)


def _bind_leaf(node: Node, inputs: Mapping[str, ArrayLike]) -> np.ndarray:
    if node.op == "constant":
        return node.attrs["value"]
    if node.name not in inputs:
        raise UnboundLeafError("Leaf is not bound", node.id, node.name, node.op)
    try:
        value = _as_array(inputs[node.name])
    except NonFiniteError as exc:
        raise NonFiniteError("Bound value is not finite", node.id, node.name, node.op) from exc
    declared = node.attrs.get("shape")
    if declared is not None:
        if len(declared) != value.ndim or any(d is not None and d != e for d, e in zip(declared, value.shape)):
            raise ShapeError(f"Bound shape {value.shape} does not match declared {declared}",
                             node.id, node.name, node.op)
    return value


def _run_forward(graph: Graph, inputs: Mapping[str, ArrayLike], targets: Iterable[int]) -> Dict[int, np.ndarray]:
    values: Dict[int, np.ndarray] = {}
    for node_id in _ancestors(graph, targets):
        node = graph.node(node_id)
        if node.op in LEAF_OPS:
            values[node_id] = _bind_leaf(node, inputs)
            continue
        operands = [values[i] for i in node.inputs]
        try:
            with np.errstate(all="ignore"):
                result = np.asarray(_FORWARD[node.op](operands, node.attrs), dtype=np.float64)
        except ShapeError as exc:
            raise ShapeError(str(exc), node.id, node.name, node.op) from exc
        if not np.all(np.isfinite(result)):
            raise NonFiniteError("Non-finite intermediate value", node.id, node.name, node.op)
        values[node_id] = result
    return values


def evaluate(graph: Graph, inputs: Mapping[str, ArrayLike],
             outputs: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
    """
    Evaluate named nodes.

    Args:
        graph: Graph to run
        inputs: Bindings for every input/param leaf the requested outputs need
        outputs: Node names to return; defaults to every named non-leaf node

    Returns:
        Mapping from output name to Tensor
    """
    names = list(outputs) if outputs is not None else graph.named_outputs()
    ids = [graph.node(name).id for name in names]
    values = _run_forward(graph, inputs, ids)
    return {name: Tensor(values[node_id]) for name, node_id in zip(names, ids)}


def backward(graph: Graph, inputs: Mapping[str, ArrayLike], output: str) -> Dict[str, Tensor]:
    """
    Gradient of a scalar node with respect to every trainable leaf.

    Leaves the output does not depend on receive zero gradients of their
    declared shape. Accumulation runs in reverse node-id order, so results
    are bit-reproducible.
    """
    return value_and_gradient(graph, inputs, output)[1]


def value_and_gradient(graph: Graph, inputs: Mapping[str, ArrayLike],
                       output: str) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Scalar output value and its parameter gradients from one forward pass"""
    target = graph.node(output)
    values = _run_forward(graph, inputs, [target.id])
    if values[target.id].size != 1:
        raise ShapeError(f"Gradient output must be scalar, got shape {values[target.id].shape}",
                         target.id, target.name, target.op)

    grads: Dict[int, np.ndarray] = {target.id: np.ones_like(values[target.id])}
    for node_id in sorted(values, reverse=True):
        node = graph.node(node_id)
        if node_id not in grads or node.op in LEAF_OPS:
            continue
        operands = [values[i] for i in node.inputs]
        with np.errstate(all="ignore"):
            partials = _BACKWARD[node.op](operands, values[node_id], grads[node_id], node.attrs)
        for input_id, partial in zip(node.inputs, partials):
            partial = np.asarray(partial, dtype=np.float64)
            if input_id in grads:
                grads[input_id] = grads[input_id] + partial
            else:
                grads[input_id] = partial

    result: Dict[str, Tensor] = {}
    for node in graph.nodes:
        if node.op != "param":
            continue
        if node.id in grads:
            grad = grads[node.id]
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError("Non-finite gradient", node.id, node.name, node.op)
        else:
            shape = values[node.id].shape if node.id in values else node.attrs["shape"]
            grad = np.zeros(shape)
        result[node.name] = Tensor(grad)
    return Tensor(values[target.id]), result


def finite_diff_check(graph: Graph, inputs: Mapping[str, ArrayLike], output: str,
                      eps: float = 1e-5, floor: float = 1e-7) -> float:
    """
    Compare analytic gradients against central differences.

    Returns:
        max over every trainable coordinate of
        |analytic - numeric| / max(|analytic| + |numeric|, floor)

    The floor keeps coordinates whose gradient is at round-off scale from
    reporting a relative error of order one.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    analytic = backward(graph, inputs, output)
    base = {name: _as_array(value) for name, value in inputs.items()}

    def objective(bindings: Dict[str, np.ndarray]) -> float:
        return float(evaluate(graph, bindings, [output])[output].data.reshape(-1)[0])

    worst = 0.0
    for name in graph.param_names:
        if name not in base:
            continue
        flat = base[name].reshape(-1)
        grad = analytic[name].data.reshape(-1)
        for index in range(flat.size):
            shifted = dict(base)
            plus = flat.copy()
            plus[index] += eps
            shifted[name] = plus.reshape(base[name].shape)
            f_plus = objective(shifted)
            minus = flat.copy()
            minus[index] -= eps
            shifted[name] = minus.reshape(base[name].shape)
            f_minus = objective(shifted)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            error = abs(grad[index] - numeric) / max(abs(grad[index]) + abs(numeric), floor)
            worst = max(worst, error)
    logger.debug(f"Finite-difference check on '{output}': max relative error {worst:.3e}")
    return worst
