"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them. ``backward`` replays the recorded graph in reverse topological
order, so gradients accumulate as a sum over paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"only 2-D tensors are supported, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _node(values: np.ndarray, parents: tuple, op: str, fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(values, _parents=parents, op=op)
    if out.requires_grad:
        out._backward = fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def fn(g):
        a._accumulate(g @ b.values.T)
        b._accumulate(a.values.T @ g)

    return _node(a.values @ b.values, (a, b), "matmul", fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def fn(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.values + b.values, (a, b), "add", fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def fn(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _node(a.values - b.values, (a, b), "sub", fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def fn(g):
        a._accumulate(g * b.values)
        b._accumulate(g * a.values)

    return _node(a.values * b.values, (a, b), "mul", fn)


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias, with a 1 x n bias repeated over the rows of x."""
    if bias.rows != 1 or bias.cols != x.cols:
        raise DimensionError(f"add_row: bias {bias.shape} does not fit {x.shape}")

    def fn(g):
        x._accumulate(g)
        bias._accumulate(g.sum(axis=0, keepdims=True))

    return _node(x.values + bias.values, (x, bias), "add_row", fn)


def scale(x: Tensor, c: float) -> Tensor:
    def fn(g):
        x._accumulate(g * c)

    return _node(x.values * c, (x,), "scale", fn)


# --- pointwise nonlinearities --------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.values > 0.0  # gradient at exactly 0 is 0

    def fn(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.values, 0.0), (x,), "relu", fn)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)

    def fn(g):
        x._accumulate(g * s * (1.0 - s))

    return _node(s, (x,), "sigmoid", fn)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)

    def fn(g):
        x._accumulate(g * e)

    return _node(e, (x,), "exp", fn)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped and pass no gradient."""
    v = x.values
    if floor > 0.0:
        clamped = v < floor
        v = np.where(clamped, floor, v)
    else:
        clamped = np.zeros_like(v, dtype=bool)

    def fn(g):
        x._accumulate(np.where(clamped, 0.0, g / v))

    return _node(np.log(v), (x,), "log", fn)


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    unary = {"relu": relu, "sigmoid": sigmoid, "exp": exp}
    binary = {"add": add, "mul": mul, "sub": sub}
    if kind in unary:
        (x,) = operands
        return unary[kind](x)
    if kind in binary:
        a, b = operands
        return binary[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def softmax_rows(x: Tensor) -> Tensor:
    if x.cols < 1:
        raise DimensionError("softmax_rows needs at least one column")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        x._accumulate(p * (g - inner))

    return _node(p, (x,), "softmax_rows", fn)


# --- reductions and reshaping ---------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        x._accumulate(np.full(x.shape, g[0, 0]))

    return _node(np.array([[x.values.sum()]]), (x,), "sum", fn)


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size

    def fn(g):
        x._accumulate(np.full(x.shape, g[0, 0] / n))

    return _node(np.array([[x.values.mean()]]), (x,), "mean", fn)


def mean_rows(x: Tensor) -> Tensor:
    """Column means: (m x n) -> (1 x n)."""
    m = x.rows

    def fn(g):
        x._accumulate(np.repeat(g / m, m, axis=0))

    return _node(x.values.mean(axis=0, keepdims=True), (x,), "mean_rows", fn)


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _node(x.values[idx], (x,), "gather_rows", fn)


def scatter_rows(x: Tensor, index: Sequence[int], n_rows: int) -> Tensor:
    """Place the rows of x at ``index`` inside an otherwise zero n_rows-row tensor."""
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) != x.rows:
        raise DimensionError(f"scatter_rows: {len(idx)} indices for {x.rows} rows")
    if len(set(idx.tolist())) != len(idx):
        raise ValueError("scatter_rows: duplicate row index")
    out = np.zeros((n_rows, x.cols))
    out[idx] = x.values

    def fn(g):
        x._accumulate(g[idx])

    return _node(out, (x,), "scatter_rows", fn)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    k = a.cols

    def fn(g):
        a._accumulate(g[:, :k])
        b._accumulate(g[:, k:])

    return _node(np.hstack([a.values, b.values]), (a, b), "concat_cols", fn)


def add_scalars(*terms: Tensor) -> Tensor:
    """Sum of 1x1 tensors."""
    for t in terms:
        if t.shape != (1, 1):
            raise DimensionError(f"add_scalars expects 1x1 operands, got {t.shape}")

    def fn(g):
        for t in terms:
            t._accumulate(g)

    return _node(np.array([[sum(t.values[0, 0] for t in terms)]]), tuple(terms), "add_scalars", fn)


# --- graph traversal ------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.shape != (1, 1):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    # only leaves keep .grad after the pass
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
    for node in order:
        if node._parents and node is not loss:
            node.grad = None


# --- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""
    per_param: dict[str, float] = field(default_factory=dict)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    build: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``build`` must rebuild the scalar loss from the current parameter values.
    Pass ``analytic`` to check externally supplied gradients instead of the
    ones from ``backward``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    if analytic is None:
        for p in params.values():
            p.zero_grad()
        backward(build())
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
            for name, p in params.items()
        }
    worst_err, worst_name = 0.0, ""
    per_param: dict[str, float] = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = build().item()
            flat[k] = orig - eps
            down = build().item()
            flat[k] = orig
            numeric.reshape(-1)[k] = (up - down) / (2.0 * eps)
        err = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
        per_param[name] = err
        if err > worst_err:
            worst_err, worst_name = err, name
    return GradCheckReport(worst_err, worst_err <= tol, worst_name, per_param)


# --- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> AdamState:
        return cls(
            {k: np.zeros_like(p.values) for k, p in params.items()},
            {k: np.zeros_like(p.values) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: dict[str, np.ndarray] | None = None,
) -> None:
    """One in-place Adam update with bias correction.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        if state.m[name].shape != p.values.shape:
            raise DimensionError(f"adam state for {name} has shape {state.m[name].shape}, param {p.shape}")
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
