"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the pipeline is carried by :class:`Tensor`,
a thin immutable wrapper around a numpy array that records the operation
which produced it. Calling :func:`backward` on a scalar builds a :class:`Tape`
(a topological ordering of the reachable graph) and accumulates gradients in
one reverse sweep, visiting each node exactly once.

Only first-order gradients are supported. All values are float64.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "ContractError",
    "GradCheckReport",
    "as_tensor",
    "constant",
    "param",
    "forward_primitive",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "bmm",
    "exp",
    "log",
    "power",
    "sigmoid",
    "tanh",
    "relu",
    "clip",
    "softmax",
    "logsumexp",
    "norm",
    "gather",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "reshape",
    "transpose",
    "cos",
    "sin",
    "sqrt",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the primitive."""


class ContractError(ValueError):
    """A caller violated an interface contract (wrong arity, unknown op, ...)."""


_node_counter = itertools.count()


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise DomainError(f"non-finite values produced by '{op}'")


class Tensor:
    """Immutable node in the differentiation graph.

    ``values`` is always a C-contiguous float64 array. ``requires_grad``
    propagates from parents; gradient accumulation only touches the
    grad-requiring subgraph.
    """

    __slots__ = ("values", "requires_grad", "grad", "op", "parents", "_vjp", "node_id")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        _owned: bool = False,
    ):
        # _owned marks freshly computed op outputs, which may be frozen in
        # place; external arrays are always copied so callers keep theirs
        # writable (and 0-d shapes are preserved).
        if (
            _owned
            and isinstance(values, np.ndarray)
            and values.dtype == np.float64
            and values.flags.c_contiguous
        ):
            arr = values
        else:
            arr = np.array(values, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.node_id = next(_node_counter)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def backward(self, seed=None) -> "Tape":
        return backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return _getitem(self, key)


def as_tensor(x) -> Tensor:
    """Lift numpy arrays / scalars to constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, op="const")


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False, op="const")


def param(x) -> Tensor:
    return Tensor(x, requires_grad=True, op="param")


def _make(values, op, parents, vjp) -> Tensor:
    _check_finite(values, op)
    rg = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=rg, op=op, parents=parents,
                  vjp=vjp if rg else None, _owned=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"'{op}' cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.values + b.values
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.values - b.values
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = a.values * b.values
    return _make(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.values == 0.0):
        raise DomainError("division by zero")
    out = a.values / b.values
    return _make(
        out,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.values)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log of non-positive input")
    out = np.log(a.values)
    return _make(out, "log", (a,), lambda g: (g / a.values,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != round(p) and np.any(a.values < 0.0):
        raise DomainError(f"power({p}) of negative input")
    if p < 1.0 and p != 0.0 and np.any(a.values == 0.0):
        raise DomainError(f"power({p}) at zero has unbounded derivative")
    out = a.values**p
    return _make(out, "power", (a,), lambda g: (g * p * a.values ** (p - 1.0),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.values)
    pos = a.values >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
    e = np.exp(a.values[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.values, 0.0)
    mask = (a.values > 0.0).astype(np.float64)
    return _make(out, "relu", (a,), lambda g: (g * mask,))


def clip(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else float(lo)
    hi_v = np.inf if hi is None else float(hi)
    out = np.clip(a.values, lo_v, hi_v)
    mask = ((a.values > lo_v) & (a.values < hi_v)).astype(np.float64)
    return _make(out, "clip", (a,), lambda g: (g * mask,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.values), "cos", (a,), lambda g: (-g * np.sin(a.values),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.values), "sin", (a,), lambda g: (g * np.cos(a.values),))


# ---------------------------------------------------------------------------
# linear algebra / reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = a.values @ b.values
    return _make(out, "matmul", (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def bmm(a, b) -> Tensor:
    """Batched matmul over the leading axis: (B, n, k) @ (B, k, m) -> (B, n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} vs {b.shape}")
    out = a.values @ b.values

    def vjp(g):
        return (g @ b.values.transpose(0, 2, 1), a.values.transpose(0, 2, 1) @ g)

    return _make(out, "bmm", (a, b), vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _make(out, "mean", (a,), vjp)


def _extreme(a, axis, keepdims, kind):
    a = as_tensor(a)
    red = np.max if kind == "max" else np.min
    out = red(a.values, axis=axis, keepdims=keepdims)
    out_kd = red(a.values, axis=axis, keepdims=True)
    # route gradient to the first extremal entry along the reduced axes
    hit = a.values == out_kd
    if axis is None:
        flat = hit.reshape(-1)
        first = np.zeros_like(flat)
        first[np.argmax(flat)] = True
        mask = first.reshape(a.shape).astype(np.float64)
    else:
        ax = axis % a.ndim if isinstance(axis, int) else axis
        if not isinstance(ax, int):
            raise ContractError(f"{kind} reduction over multiple axes is unsupported")
        idx = np.argmax(hit, axis=ax)
        mask = np.zeros(a.shape)
        np.put_along_axis(mask, np.expand_dims(idx, ax), 1.0, axis=ax)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    return _make(out, kind, (a,), vjp)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, "max")


def reduce_min(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, "min")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax", (a,), vjp)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.values.max(axis=axis, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=axis, keepdims=True)
    out_kd = np.log(s) + m
    out = out_kd if keepdims else np.squeeze(out_kd, axis=axis)
    soft = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (soft * g,)

    return _make(out, "log-sum-exp", (a,), vjp)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``. Exactly-zero vectors are a domain error."""
    a = as_tensor(a)
    sq = (a.values * a.values).sum(axis=axis, keepdims=True)
    if np.any(sq == 0.0):
        raise DomainError("euclidean-norm of zero vector (gradient undefined)")
    out_kd = np.sqrt(sq)
    out = out_kd if keepdims else np.squeeze(out_kd, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (a.values / out_kd * g,)

    return _make(out, "euclidean-norm", (a,), vjp)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def gather(a, index) -> Tensor:
    """Select rows ``a[index]`` along axis 0. Out-of-range indices are a hard error."""
    a = as_tensor(a)
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise ContractError("gather index must be integer-typed")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DomainError(
            f"gather index out of range [0, {a.shape[0]}): min={idx.min()}, max={idx.max()}"
        )
    out = a.values[idx]

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, "gather", (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of empty sequence")
    out = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis % t.ndim] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(ts), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.values.reshape(shape)
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def _getitem(a: Tensor, key) -> Tensor:
    out = a.values[key]

    def vjp(g):
        ga = np.zeros(a.shape)
        ga[key] = g
        return (ga,)

    return _make(out, "slice", (a,), vjp)


# ---------------------------------------------------------------------------
# tape and backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph reachable from a root.

    ``nodes`` lists every reachable tensor with inputs before outputs;
    ``visit_count`` is the number of vjp invocations performed by the
    backward sweep that produced this tape (one per non-leaf node).
    """

    def __init__(self, nodes: list):
        self.nodes = nodes
        self.visit_count = 0

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return Tape(order)


def backward(root: Tensor, seed=None) -> Tape:
    """Accumulate gradients of ``root`` into every reachable grad-requiring tensor.

    Returns the tape used for the sweep. Each node's vjp runs exactly once,
    after all its downstream contributions have been accumulated.
    """
    if seed is None:
        if root.values.size != 1:
            raise ContractError(f"backward on non-scalar of shape {root.shape} needs a seed")
        seed = np.ones_like(root.values)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} != root shape {root.shape}")

    tape = Tape.trace(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        tape.visit_count += 1
        parent_grads = node._vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return tape


# ---------------------------------------------------------------------------
# primitive registry and gradient checking
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "bmm": bmm,
    "exp": exp,
    "log": log,
    "power": power,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max": reduce_max,
    "min": reduce_min,
    "softmax": softmax,
    "log-sum-exp": logsumexp,
    "euclidean-norm": norm,
    "gather": gather,
    "concat": concat,
    "clip": clip,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "cos": cos,
    "sin": sin,
}


def forward_primitive(op_name: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, recording it on the graph."""
    fn = PRIMITIVES.get(op_name)
    if fn is None:
        raise ContractError(f"unknown primitive '{op_name}'")
    return fn(*inputs, **kwargs)


class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    def __init__(self, passed, max_rel_err, worst_index, analytic, numeric):
        self.passed = bool(passed)
        self.max_rel_err = float(max_rel_err)
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, "
            f"worst_index={self.worst_index})"
        )


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    tolerance: float = 1e-6,
    abs_floor: float = 1e-6,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the tape gradient of a scalar function with central differences.

    Coordinates where both gradients are below ``abs_floor`` are compared
    absolutely against that floor; otherwise the relative discrepancy is
    ``|ad - fd| / max(|ad|, |fd|)``. With ``sample`` set, only a seeded random
    subset of coordinates is differenced (the full analytic gradient is still
    computed in one sweep).
    """
    x0 = np.ascontiguousarray(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True, op="param")
    out = fn(xt)
    if not isinstance(out, Tensor) or out.values.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = np.zeros(x0.shape) if xt.grad is None else xt.grad

    flat = x0.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(gen.choice(n, size=sample, replace=False))
    else:
        coords = np.arange(n)

    numeric = np.full(n, np.nan)
    for i in coords:
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        f_plus = fn(Tensor(plus.reshape(x0.shape))).item()
        f_minus = fn(Tensor(minus.reshape(x0.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2 * step)

    a = analytic.reshape(-1)[coords]
    b = numeric[coords]
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), abs_floor)
    rel = np.abs(a - b) / scale
    worst = int(np.argmax(rel))
    report = GradCheckReport(
        passed=bool(rel[worst] <= tolerance),
        max_rel_err=rel[worst],
        worst_index=int(coords[worst]),
        analytic=analytic,
        numeric=numeric.reshape(-1),
    )
    return report
