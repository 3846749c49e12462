"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``backward`` walks the recorded graph in reverse topological order.
The graph is dynamic: it is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

# Floor inside sqrt derivative denominators; variances legitimately reach 0.
SQRT_EPS = 1e-12

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = "leaf"
        self.parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def from_op(cls, op: str, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Create the output of an operation.

        ``backward`` maps the output gradient to one gradient (or None) per
        parent. Recording is skipped when no parent needs a gradient.
        """
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out.parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return Tensor.from_op("matmul", A @ B, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return Tensor.from_op("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# -- elementwise ----------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def bw(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return Tensor.from_op("mul", A * B, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    A = a.data
    return Tensor.from_op("square", A * A, (a,), lambda g: (2.0 * A * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min()!r})")
    out = np.sqrt(a.data)
    return Tensor.from_op("sqrt", out, (a,), lambda g: (g / (2.0 * np.maximum(out, np.sqrt(SQRT_EPS))),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op("exp", out, (a,), lambda g: (g * out,))


def elementwise(kind: str, *operands, factor: float = 1.0) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sqrt, square, scale."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "sqrt": sqrt, "square": square}
    if kind in binary:
        a, b = operands
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shapes differ {a.shape} vs {b.shape}")
        return binary[kind](a, b)
    if kind in unary:
        (a,) = operands
        return unary[kind](a)
    if kind == "scale":
        (a,) = operands
        return scale(a, factor)
    raise ValueError(f"unknown elementwise op {kind!r}")


# -- reductions and reshaping ----------------------------------------------
def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return np.split(g, splits, axis=axis)

    return Tensor.from_op("concat", out, tuple(tensors), bw)


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op("take_rows", a.data[idx], (a,), bw)


def reshape_row(a: Tensor) -> Tensor:
    """[1×D] -> [D]."""
    shape = a.shape
    return Tensor.from_op("reshape_row", a.data.reshape(-1), (a,), lambda g: (g.reshape(shape),))


def column(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of a 2-D tensor, kept as [B×1]."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, j : j + 1] = g
        return (out,)

    return Tensor.from_op("column", a.data[:, j : j + 1].copy(), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op("softmax", p, (a,), bw)


def reduce_stats(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-column mean and population variance (divide by B) of a [B×D] batch."""
    if x.data.ndim != 2:
        raise ShapeError(f"reduce_stats: expected a 2-D batch, got {x.shape}")
    if x.shape[0] < 1:
        raise DomainError("reduce_stats: empty batch")
    # shift by the first row: exact for constant batches
    first = take_rows(x, [0])
    mu = add(reshape_row(first), mean(sub(x, first), axis=0))
    centered = sub(x, mu)
    var = mean(square(centered), axis=0)
    return mu, var


# -- losses --------------------------------------------------------------
def softmax_cross_entropy(logits: Tensor, label: int, margins: Optional[Tensor] = None) -> Tensor:
    """-log p(label) with optional additive margins on competitor logits.

    The margin at the label position is ignored. Zero or absent margins give
    the plain softmax cross-entropy.
    """
    s = logits.data
    if s.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: expected 1-D logits, got {s.shape}")
    C = s.shape[0]
    if not 0 <= label < C:
        raise IndexError(f"label {label} out of range for {C} classes")
    if margins is not None:
        m = np.array(margins.data if isinstance(margins, Tensor) else margins, dtype=np.float64)
        if m.shape != (C,):
            raise ShapeError(f"margins shape {m.shape} does not match logits {s.shape}")
        m[label] = 0.0
        z = s + m
    else:
        z = s
    shift = z.max()
    e = np.exp(z - shift)
    total = e.sum()
    loss = np.log(total) + shift - s[label]
    p = e / total

    def bw(g):
        d = p.copy()
        d[label] -= 1.0
        return (g * d,)

    return Tensor.from_op("softmax_xent", np.asarray(loss), (logits,), bw)


def batch_cross_entropy(logits: Tensor, labels: Sequence[int], margins: Optional[np.ndarray] = None) -> Tensor:
    """Mean over rows of ``softmax_cross_entropy``; ``margins`` is an optional [B×C] array."""
    s = logits.data
    if s.ndim != 2:
        raise ShapeError(f"batch_cross_entropy: expected [B×C] logits, got {s.shape}")
    B, C = s.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (B,):
        raise ShapeError(f"{y.shape[0]} labels for {B} rows")
    if np.any((y < 0) | (y >= C)):
        raise IndexError(f"label out of range for {C} classes")
    rows = np.arange(B)
    if margins is not None:
        m = np.array(margins, dtype=np.float64)
        if m.shape != (B, C):
            raise ShapeError(f"margins shape {m.shape} does not match logits {s.shape}")
        m[rows, y] = 0.0
        z = s + m
    else:
        z = s
    shift = z.max(axis=1, keepdims=True)
    e = np.exp(z - shift)
    total = e.sum(axis=1, keepdims=True)
    per_row = np.log(total[:, 0]) + shift[:, 0] - s[rows, y]
    p = e / total

    def bw(g):
        d = p.copy()
        d[rows, y] -= 1.0
        return (g * d / B,)

    return Tensor.from_op("batch_xent", np.asarray(per_row.mean()), (logits,), bw)


# -- graph traversal ---------------------------------------------------------
@dataclass
class Graph:
    """Recorded operations reachable from a root, inputs before outputs."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node.parents:
                if p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def operations(self) -> List[Tensor]:
        return [n for n in self.nodes if n._backward is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any parameter")
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(Graph.from_root(loss).nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# -- finite differences -------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    max_abs_error: Dict[str, float]
    passed: bool
    step: float
    failure: Optional[str] = None

    def summary(self) -> str:
        lines = [f"step={self.step:g} passed={self.passed}"]
        for name in self.max_rel_error:
            lines.append(f"  {name}: max_rel={self.max_rel_error[name]:.3e} max_abs={self.max_abs_error[name]:.3e}")
        if self.failure:
            lines.append(f"  failure: {self.failure}")
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current values of ``params``. An
    entry passes when its absolute error is below ``atol`` or its relative
    error is below ``rtol``. ``max_entries`` subsamples large parameters.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.requires_grad:
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rel: Dict[str, float] = {}
    abs_: Dict[str, float] = {}
    passed = True
    failure = None
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst_rel = worst_abs = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                passed = False
                failure = failure or f"non-finite value probing {name}[{int(i)}]"
                continue
            num = (fp - fm) / (2 * step)
            err = abs(num - gflat[i])
            denom = max(abs(num), abs(gflat[i]))
            r = err / denom if denom > 0 else 0.0
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, r)
            if err > atol and r >= rtol:
                passed = False
                failure = failure or f"{name}[{int(i)}]: analytic {gflat[i]!r} vs numeric {num!r}"
        rel[name] = worst_rel
        abs_[name] = worst_abs
    return GradCheckReport(rel, abs_, passed, step, failure)


def parameters_of(tensors: Iterable[Tensor]) -> List[Tensor]:
    return [t for t in tensors if t.requires_grad]
