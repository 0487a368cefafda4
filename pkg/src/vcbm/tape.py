"""Dense float64 tensors with a record-on-execute reverse-mode tape.

Every op goes through :func:`apply`, which runs the numpy forward and, when
any input requires a gradient, records a :class:`Node` holding what the
backward rule needs. Node ids come from a global counter, so creation order
is a valid topological order and :func:`backward` simply walks the reachable
nodes by descending id.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

L2_EPS = 1e-12
CHECKPOINT_VERSION = 1

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return apply("add", [self, other])

    def __radd__(self, other):
        return apply("add", [other, self])

    def __sub__(self, other):
        return apply("sub", [self, other])

    def __rsub__(self, other):
        return apply("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply("scalar_mul", [self], scalar=float(other))
        return apply("mul_elementwise", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            if other == 0:
                raise DomainError("divide: scalar divisor is zero")
            return apply("scalar_mul", [self], scalar=1.0 / float(other))
        return apply("divide", [self, other])

    def __rtruediv__(self, other):
        return apply("divide", [other, self])

    def __neg__(self):
        return apply("negate", [self])

    def __matmul__(self, other):
        return apply("matmul", [self, other])


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    id: int
    op: str
    inputs: list[Tensor]
    saved: Any
    attrs: dict
    out: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# op table: name -> (forward(*arrays, **attrs) -> (out, saved),
#                    backward(g, arrays, out, saved, **attrs) -> grads)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


def _norm_axis(op: str, axis, ndim: int):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for a {ndim}-d input")
    return axis % ndim


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _matmul_fwd(a, b, transpose_a=False, transpose_b=False):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: needs >=2-d operands, got {a.shape} and {b.shape}")
    a2 = np.swapaxes(a, -1, -2) if transpose_a else a
    b2 = np.swapaxes(b, -1, -2) if transpose_b else b
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}"
            f" (transpose_a={transpose_a}, transpose_b={transpose_b})"
        )
    _broadcast_shape("matmul", a2.shape[:-2], b2.shape[:-2])
    return np.matmul(a2, b2), (a2, b2)


def _matmul_bwd(g, arrays, out, saved, transpose_a=False, transpose_b=False):
    a2, b2 = saved
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b2, -1, -2)), a2.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g), b2.shape)
    if transpose_a:
        ga = np.swapaxes(ga, -1, -2)
    if transpose_b:
        gb = np.swapaxes(gb, -1, -2)
    return [ga, gb]


def _add_fwd(a, b):
    _broadcast_shape("add", a.shape, b.shape)
    return a + b, None


def _add_bwd(g, arrays, out, saved):
    a, b = arrays
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _sub_fwd(a, b):
    _broadcast_shape("sub", a.shape, b.shape)
    return a - b, None


def _sub_bwd(g, arrays, out, saved):
    a, b = arrays
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


def _mul_fwd(a, b):
    _broadcast_shape("mul_elementwise", a.shape, b.shape)
    return a * b, None


def _mul_bwd(g, arrays, out, saved):
    a, b = arrays
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _div_fwd(a, b):
    _broadcast_shape("divide", a.shape, b.shape)
    if np.any(b == 0):
        raise DomainError(f"divide: zero in denominator of shape {b.shape}")
    return a / b, None


def _div_bwd(g, arrays, out, saved):
    a, b = arrays
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


def _scalar_mul_fwd(a, scalar):
    return a * scalar, None


def _scalar_mul_bwd(g, arrays, out, saved, scalar):
    return [g * scalar]


def _neg_fwd(a):
    return -a, None


def _neg_bwd(g, arrays, out, saved):
    return [-g]


def _exp_fwd(a):
    return np.exp(a), None


def _exp_bwd(g, arrays, out, saved):
    return [g * out]


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError(f"log: non-positive operand (min {a.min()!r}) in shape {a.shape}")
    return np.log(a), None


def _log_bwd(g, arrays, out, saved):
    return [g / arrays[0]]


def _sigmoid_fwd(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), None


def _sigmoid_bwd(g, arrays, out, saved):
    return [g * out * (1.0 - out)]


def _abs_fwd(a):
    return np.abs(a), None


def _abs_bwd(g, arrays, out, saved):
    return [g * np.sign(arrays[0])]


def _softmax_fwd(a, axis=-1):
    axis = _norm_axis("softmax", axis, a.ndim)
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True), None


def _softmax_bwd(g, arrays, out, saved, axis=-1):
    dot = np.sum(g * out, axis=axis, keepdims=True)
    return [out * (g - dot)]


def _sum_fwd(a, axis=None, keepdims=False):
    axis = _norm_axis("sum", axis, a.ndim)
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _sum_bwd(g, arrays, out, saved, axis=None, keepdims=False):
    a = arrays[0]
    axis = _norm_axis("sum", axis, a.ndim)
    return [np.array(_expand_reduced(g, a.shape, axis, keepdims))]


def _mean_fwd(a, axis=None, keepdims=False):
    axis = _norm_axis("mean", axis, a.ndim)
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _mean_bwd(g, arrays, out, saved, axis=None, keepdims=False):
    a = arrays[0]
    axis = _norm_axis("mean", axis, a.ndim)
    n = a.size if axis is None else a.shape[axis]
    return [np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n]


def _l2_norm_fwd(a, axis=-1, keepdims=False, eps=L2_EPS):
    axis = _norm_axis("l2_norm", axis, a.ndim)
    return np.sqrt(np.sum(a * a, axis=axis, keepdims=keepdims) + eps), None


def _l2_norm_bwd(g, arrays, out, saved, axis=-1, keepdims=False, eps=L2_EPS):
    a = arrays[0]
    axis = _norm_axis("l2_norm", axis, a.ndim)
    g = _expand_reduced(g, a.shape, axis, keepdims)
    n = _expand_reduced(out, a.shape, axis, keepdims)
    return [g * a / n]


def _concat_fwd(*arrays, axis=0):
    ref = arrays[0]
    axis = _norm_axis("concat", axis, ref.ndim)
    for other in arrays[1:]:
        if other.ndim != ref.ndim or any(
            i != axis and x != y for i, (x, y) in enumerate(zip(ref.shape, other.shape))
        ):
            raise ShapeError(
                f"concat(axis={axis}): incompatible shapes {[x.shape for x in arrays]}"
            )
    return np.concatenate(arrays, axis=axis), None


def _concat_bwd(g, arrays, out, saved, axis=0):
    axis = _norm_axis("concat", axis, arrays[0].ndim)
    cuts = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return list(np.split(g, cuts, axis=axis))


def _gather_fwd(a, indices, axis=0):
    axis = _norm_axis("gather", axis, a.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim > 1:
        raise ShapeError(f"gather: indices must be a scalar or 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {a.shape}")
    return np.take(a, idx, axis=axis), idx


def _gather_bwd(g, arrays, out, idx, indices, axis=0):
    a = arrays[0]
    axis = _norm_axis("gather", axis, a.ndim)
    ga = np.zeros_like(a)
    np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0) if idx.ndim else g)
    return [ga]


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None


def _reshape_bwd(g, arrays, out, saved, shape):
    return [g.reshape(arrays[0].shape)]


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul_elementwise": (_mul_fwd, _mul_bwd),
    "scalar_mul": (_scalar_mul_fwd, _scalar_mul_bwd),
    "divide": (_div_fwd, _div_bwd),
    "negate": (_neg_fwd, _neg_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "abs": (_abs_fwd, _abs_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "l2_norm": (_l2_norm_fwd, _l2_norm_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
}


def apply(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Run ``op`` on ``inputs`` and record a node if any input needs a gradient."""
    try:
        fwd, _ = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    out_data, saved = fwd(*(t.data for t in tensors), **attrs)
    out = Tensor(out_data)
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._node = Node(next(_node_ids), op, tensors, saved, attrs, out.data)
    return out


def trace(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss`` in topological (execution) order."""
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(x for x in node.inputs if x.requires_grad)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Grads accumulate across calls; call :func:`zero_grad` between steps.
    Leaves not reachable from ``loss`` keep ``grad is None``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    for node in reversed(trace(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        _, bwd = OPS[node.op]
        in_grads = bwd(g, [t.data for t in node.inputs], node.out, node.saved, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            if t._node is None:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                key = t._node.id
                grads[key] = gi if key not in grads else grads[key] + gi


def zero_grad(params) -> None:
    for p in _values(params):
        p.grad = None


def _values(params):
    return params.values() if isinstance(params, Mapping) else params


# ---------------------------------------------------------------------------
# functional wrappers


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    return apply("matmul", [a, b], transpose_a=transpose_a, transpose_b=transpose_b)


def add(a, b) -> Tensor:
    return apply("add", [a, b])


def sub(a, b) -> Tensor:
    return apply("sub", [a, b])


def mul(a, b) -> Tensor:
    return apply("mul_elementwise", [a, b])


def scalar_mul(a, c: float) -> Tensor:
    return apply("scalar_mul", [a], scalar=float(c))


def divide(a, b) -> Tensor:
    return apply("divide", [a, b])


def negate(a) -> Tensor:
    return apply("negate", [a])


def exp(a) -> Tensor:
    return apply("exp", [a])


def log(a) -> Tensor:
    return apply("log", [a])


def sigmoid(a) -> Tensor:
    return apply("sigmoid", [a])


def absolute(a) -> Tensor:
    return apply("abs", [a])


def softmax(a, axis: int = -1) -> Tensor:
    return apply("softmax", [a], axis=axis)


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply("sum", [a], axis=axis, keepdims=keepdims)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return apply("mean", [a], axis=axis, keepdims=keepdims)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return apply("l2_norm", [a], axis=axis, keepdims=keepdims)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", list(tensors), axis=axis)


def gather(a, indices, axis: int = 0) -> Tensor:
    return apply("gather", [a], indices=indices, axis=axis)


def reshape(a, shape) -> Tensor:
    return apply("reshape", [a], shape=tuple(shape))


def log_sum_exp(a: Tensor, axis: int = -1) -> Tensor:
    """Stable log-sum-exp; the shift is a constant so gradients are exact."""
    shift = Tensor(np.max(as_tensor(a).data, axis=axis, keepdims=True))
    return add(log(sum(exp(sub(a, shift)), axis=axis, keepdims=True)), shift)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^a) without overflow: both exponents below are <= 0."""
    shift = Tensor(np.maximum(as_tensor(a).data, 0.0))
    return add(log(add(exp(negate(shift)), exp(sub(a, shift)))), shift)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(scalar_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    The error for each entry is |analytic - numeric| / max(1, |analytic|).
    ``scalar_fn`` must rebuild its graph from the current parameter data.
    """
    if not eps > 0:
        raise ValueError(f"grad_check: eps must be > 0, got {eps}")
    params = list(params)
    zero_grad(params)
    loss = scalar_fn()
    if not np.isfinite(loss.data).all():
        raise DomainError("grad_check: function value is not finite")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _value(scalar_fn)
            flat[i] = orig - eps
            f_minus = _value(scalar_fn)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    zero_grad(params)
    return worst


def _value(fn) -> float:
    v = fn().data
    if not np.isfinite(v).all():
        raise DomainError("grad_check: function value is not finite")
    return float(v.reshape(-1)[0])


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write ``name -> (shape, row-major data)`` as versioned JSON."""
    doc = {"format": "vcbm-params", "version": CHECKPOINT_VERSION, "meta": meta or {}, "params": {}}
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name], dtype=np.float64)
        if not np.isfinite(arr).all():
            raise DomainError(f"save_params: parameter {name!r} has non-finite entries")
        doc["params"][name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "vcbm-params":
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    out = {}
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        data = np.array(entry["data"], dtype=np.float64)
        if data.size != math.prod(shape):
            raise ValueError(f"{path}: parameter {name!r} has {data.size} values for shape {shape}")
        out[name] = data.reshape(shape)
    return out, doc.get("meta", {})
