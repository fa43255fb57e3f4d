"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The model code is written against this contract: a `DiffTensor` carries a
value array, a `requires_grad` flag, and a `grad` slot populated by
`backward`. The op set is exactly what the mesh VAE needs; sparse matrices
participate as constants only (the hierarchy is fixed). Training runs in
float32; gradient verification runs in float64 through `grad_check`.

Any op that produces a NaN or Inf raises immediately, naming the op, so a
diverging run fails at the first bad value instead of three layers later.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .sparse import SparseMatrix


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    """An operation produced NaN or Inf; message names the operation."""


class ShapeMismatchError(AutodiffError):
    """Operands have incompatible shapes; message names both."""


class DiffTensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_op", "_parents", "_vjps")

    def __init__(self, values, requires_grad=False, name=None, _op="leaf", _parents=(), _vjps=()):
        self.values = np.asarray(values)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op = _op
        self._parents: tuple[DiffTensor, ...] = _parents
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = _vjps

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r}{label})"

    # Operator sugar; scalars become constants of the tensor's dtype.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return subtract(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return subtract(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return multiply(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return multiply(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, DiffTensor):
            raise AutodiffError("tensor/tensor division is not part of the op set")
        return multiply(self, _coerce(1.0 / other, self.dtype))

    def __neg__(self):
        return multiply(self, _coerce(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)


def tensor(values, requires_grad=False, dtype=None, name=None) -> DiffTensor:
    arr = np.array(values, dtype=dtype) if dtype is not None else np.array(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    label = f"tensor({name})" if name else "tensor"
    _ensure_finite(arr, label)
    return DiffTensor(arr, requires_grad=requires_grad, name=name)


def constant(values, dtype=None) -> DiffTensor:
    return tensor(values, requires_grad=False, dtype=dtype)


def _coerce(value, dtype) -> DiffTensor:
    if isinstance(value, DiffTensor):
        return value
    return DiffTensor(np.asarray(value, dtype=dtype))


def _ensure_finite(values: np.ndarray, op: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def _make(op, values, parents, vjps) -> DiffTensor:
    _ensure_finite(values, op)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return DiffTensor(values, requires_grad=False, _op=op)
    return DiffTensor(values, requires_grad=True, _op=op, _parents=tuple(parents), _vjps=tuple(vjps))


def _check_same_dtype(op, a: DiffTensor, b: DiffTensor):
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return np.ascontiguousarray(grad)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_dtype("add", a, b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "add",
        values,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def subtract(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_dtype("subtract", a, b)
    try:
        values = a.values - b.values
    except ValueError:
        raise ShapeMismatchError(f"subtract: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "subtract",
        values,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def multiply(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_dtype("multiply", a, b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeMismatchError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "multiply",
        values,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.values, a.shape),
            lambda g: _unbroadcast(g * a.values, b.shape),
        ),
    )


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)

    return _make("matmul", values, (a, b), (grad_a, grad_b))


def sparse_matmul(matrix: SparseMatrix, x: DiffTensor) -> DiffTensor:
    """matrix @ x where x is (N, C) or batched (B, N, C); no gradient flows
    to the sparse operand."""
    n = matrix.shape[0]
    if x.ndim == 2:
        if x.shape[0] != matrix.shape[1]:
            raise ShapeMismatchError(
                f"sparse_matmul: {matrix.shape} @ {x.shape} rows disagree"
            )
        csr = matrix.to_csr(x.dtype)
        values = csr @ x.values
        return _make("sparse_matmul", values, (x,), (lambda g: csr.T @ g,))
    if x.ndim == 3:
        if x.shape[1] != matrix.shape[1]:
            raise ShapeMismatchError(
                f"sparse_matmul: {matrix.shape} @ {x.shape} vertex axis disagrees"
            )
        csr = matrix.to_csr(x.dtype)
        batch, _, channels = x.shape

        def apply(mat, arr, rows_out):
            folded = np.moveaxis(arr, 1, 0).reshape(arr.shape[1], batch * channels)
            out = mat @ folded
            return np.moveaxis(out.reshape(rows_out, batch, channels), 0, 1)

        values = apply(csr, x.values, n)
        return _make(
            "sparse_matmul",
            values,
            (x,),
            (lambda g: apply(csr.T.tocsr(), g, matrix.shape[1]),),
        )
    raise ShapeMismatchError(f"sparse_matmul: expected 2-D or 3-D input, got {x.shape}")


def elu(x: DiffTensor) -> DiffTensor:
    negative = x.values <= 0
    values = x.values.copy()
    values[negative] = np.expm1(x.values[negative])

    def vjp(g):
        slope = np.ones_like(values)
        slope[negative] = values[negative] + 1.0
        return g * slope

    return _make("elu", values, (x,), (vjp,))


def exp(x: DiffTensor) -> DiffTensor:
    with np.errstate(over="ignore"):
        values = np.exp(x.values)
    return _make("exp", values, (x,), (lambda g: g * values,))


def log(x: DiffTensor) -> DiffTensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(x.values)
    return _make("log", values, (x,), (lambda g: g / x.values,))


def absolute(x: DiffTensor) -> DiffTensor:
    values = np.abs(x.values)
    return _make("absolute", values, (x,), (lambda g: g * np.sign(x.values),))


def clip(x: DiffTensor, lo: float, hi: float) -> DiffTensor:
    values = np.clip(x.values, lo, hi)

    def vjp(g):
        inside = (x.values >= lo) & (x.values <= hi)
        return g * inside.astype(x.dtype)

    return _make("clip", values, (x,), (vjp,))


def reshape(x: DiffTensor, shape) -> DiffTensor:
    values = x.values.reshape(shape)
    return _make("reshape", values, (x,), (lambda g: g.reshape(x.shape),))


def transpose(x: DiffTensor, axes=None) -> DiffTensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = np.argsort(axes)
    values = x.values.transpose(axes)
    return _make("transpose", values, (x,), (lambda g: g.transpose(inverse),))


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    tensors = list(tensors)
    if not tensors:
        raise AutodiffError("concat: empty input list")
    for t in tensors[1:]:
        _check_same_dtype("concat", tensors[0], t)
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(index):
        def vjp(g):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(offsets[index], offsets[index + 1])
            return g[tuple(slicer)]

        return vjp

    return _make("concat", values, tensors, tuple(make_vjp(i) for i in range(len(tensors))))


def take_slice(x: DiffTensor, key) -> DiffTensor:
    values = x.values[key]

    def vjp(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        out[key] = g
        return out

    return _make("slice", values, (x,), (vjp,))


def sum(x: DiffTensor, axis=None) -> DiffTensor:  # noqa: A001 - mirrors numpy naming
    values = np.sum(x.values, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).astype(x.dtype)
        expanded = np.expand_dims(g, axis)
        return np.broadcast_to(expanded, x.shape).astype(x.dtype)

    return _make("sum", np.asarray(values), (x,), (vjp,))


def mean(x: DiffTensor, axis=None) -> DiffTensor:
    values = np.mean(x.values, axis=axis)
    if axis is None:
        count = x.values.size
    else:
        count = x.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape) / count).astype(x.dtype)
        expanded = np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, x.shape) / count).astype(x.dtype)

    return _make("mean", np.asarray(values), (x,), (vjp,))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(output: DiffTensor) -> None:
    """Reverse-mode sweep from a scalar output; accumulates into `.grad` of
    every reachable tensor with requires_grad."""
    if output.values.size != 1:
        raise AutodiffError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise AutodiffError("backward on a tensor that does not require grad")

    topo: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    pending: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=output.dtype)}
    for node in reversed(topo):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.grad is None:
            node.grad = grad.copy()
        else:
            node.grad = node.grad + grad
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            contribution = np.asarray(vjp(grad))
            if contribution.shape != parent.shape:
                raise AutodiffError(
                    f"{node._op}: vjp produced shape {contribution.shape} "
                    f"for parent of shape {parent.shape}"
                )
            slot = pending.get(id(parent))
            pending[id(parent)] = contribution if slot is None else slot + contribution


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    tol: float
    entries: tuple[GradCheckEntry, ...]
    passed: bool

    def __str__(self):
        lines = [f"grad_check tol={self.tol:g} -> {'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e.name}: max_rel_error={e.max_rel_error:.3e} {'ok' if e.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    function: Callable[..., DiffTensor],
    inputs: Sequence[DiffTensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `function` must map the given tensors to a scalar DiffTensor and be a
    pure function of them; inputs must be float64. The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|), so
    tolerances behave absolutely for small gradients and relatively for
    large ones. Failures are report content, not exceptions.
    """
    inputs = list(inputs)
    for x in inputs:
        if x.dtype != np.float64:
            raise AutodiffError(f"grad_check requires float64 inputs, got {x.dtype}")
        x.zero_grad()
    output = function(*inputs)
    if output.values.size != 1:
        raise AutodiffError("grad_check requires a scalar-valued function")
    backward(output)

    entries = []
    for index, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
        flat = x.values.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = function(*inputs).item()
            flat[i] = original - h
            f_minus = function(*inputs).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
        name = x.name or f"input{index}"
        entries.append(GradCheckEntry(name=name, max_rel_error=worst, passed=worst <= tol))
    return GradCheckReport(tol=tol, entries=tuple(entries), passed=all(e.passed for e in entries))
