"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the attention / prototype / loss graph needs are
provided.  Every forward op checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating it.

Ops are recorded on the innermost active :class:`Tape`; outside a tape they
are plain forward evaluations with no side effects::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DegenerateInputError",
    "NonFiniteError",
    "GradCheckError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "elementwise",
    "sigmoid",
    "relu",
    "activation",
    "exp",
    "log",
    "sqrt",
    "clip",
    "tensor_sum",
    "mean",
    "gap",
    "amax",
    "take_rows",
    "take_along",
    "where",
    "logsumexp",
    "l2_normalize",
    "reshape",
    "transpose",
    "stack",
    "grad_check",
]

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies outside an op's domain (e.g. a zero-norm vector)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GradCheckError(RuntimeError):
    """The finite-difference oracle could not evaluate the function."""


class Tensor:
    """Dense array node.  ``data`` is a numpy array; ``grad`` mirrors its shape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.size == 0 or any(n < 1 for n in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_size(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_size(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    A tape is confined to the thread that entered it.  ``backward`` walks the
    records in reverse, so every op's inputs are visited after the op itself.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        self.records.append(_Record(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec.output) for rec in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in produced:
                    leaves[key] = inp
                grads[key] = grads[key] + gi if key in grads else gi
        if id(loss) in grads and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _finish(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _one_sided_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None
    if out != a.shape and out != b.shape:
        raise DimensionError(f"{op}: two-sided broadcasting of {a.shape} and {b.shape} is unsupported")
    return out


# ---------------------------------------------------------------------------
# Linear algebra and pointwise ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; at most one operand may carry a leading batch axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or (a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):  # _finish raises on non-finite output
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _finish("matmul", (a, b), out, backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)
    return _finish("transpose", (x,), out, lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _finish("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _finish("stack", tensors, out, backward)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _one_sided_shape(a, b, "add")
    out = a.data + b.data
    return _finish("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _one_sided_shape(a, b, "sub")
    out = a.data - b.data
    return _finish("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _one_sided_shape(a, b, "mul")
    out = a.data * b.data
    return _finish(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _one_sided_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DegenerateInputError("div: zero denominator")
    out = a.data / b.data
    return _finish(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def maximum(a, b) -> Tensor:
    """Pointwise max; on ties the subgradient goes to ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _one_sided_shape(a, b, "maximum")
    first = a.data >= b.data
    out = np.where(first, a.data, b.data)
    return _finish(
        "maximum", (a, b), out,
        lambda g: (_unbroadcast(np.where(first, g, 0.0), a.shape), _unbroadcast(np.where(first, 0.0, g), b.shape)),
    )


_ELEMENTWISE = {"add": add, "mul": mul, "max": maximum}


def elementwise(a, b, op: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) in the working precision."""
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    lo = np.finfo(x.dtype).tiny
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(s, lo, hi)
    return _finish("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0).astype(x.dtype, copy=False)
    return _finish("relu", (x,), out, lambda g: (np.where(pos, g, 0.0),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DegenerateInputError("log of non-positive value")
    out = np.log(x.data)
    return _finish("log", (x,), out, lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DegenerateInputError("sqrt needs strictly positive input")
    out = np.sqrt(x.data)
    return _finish("sqrt", (x,), out, lambda g: (0.5 * g / out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return _finish("clip", (x,), out, lambda g: (np.where(inside, g, 0.0),))


# ---------------------------------------------------------------------------
# Reductions and indexing


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish("sum", (x,), out, backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(x.ndim) if axis is None else ((axis,) if np.isscalar(axis) else axis)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gap(F: Tensor) -> Tensor:
    """Global average pooling over the two trailing (spatial) axes.

    Accepts ``C x H x W`` or a batch ``B x C x H x W``.
    """
    if F.ndim not in (3, 4):
        raise DimensionError(f"gap expects C x H x W (optionally batched), got {F.shape}")
    h, w = F.shape[-2:]
    out = F.data.mean(axis=(-2, -1))
    scale = 1.0 / (h * w)
    return _finish(
        "gap", (F,), out,
        lambda g: (np.broadcast_to(g[..., None, None] * scale, F.shape).astype(F.dtype),),
    )


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Reduce-max along ``axis``; ties send the gradient to the lowest index."""
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        return (gx,)

    return _finish("amax", (x,), out, backward)


def take_rows(x: Tensor, idx) -> Tensor:
    """``x[idx]`` along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish("take_rows", (x,), out, backward)


def take_along(x: Tensor, idx, axis: int) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take_along_axis(x.data, idx, axis=axis)
    ax = axis % x.ndim

    def backward(g):
        gx = np.zeros_like(x.data)
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return _finish("take_along", (x,), out, backward)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where ``cond`` else ``b``; ``cond`` is not differentiated."""
    cond = np.asarray(cond, dtype=bool)
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape or cond.shape != a.shape:
        raise DimensionError(f"where: shapes {cond.shape}, {a.shape}, {b.shape} differ")
    out = np.where(cond, a.data, b.data)
    return _finish("where", (a, b), out, lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with max-subtraction."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _finish("logsumexp", (x,), out, lambda g: (np.expand_dims(g, axis) * soft,))


def l2_normalize(v: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``.

    Raises :class:`DegenerateInputError` when any norm is <= ``eps``.
    """
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        bad = np.argwhere(np.squeeze(norm, axis=axis) <= eps)
        raise DegenerateInputError(f"l2_normalize: near-zero norm at {bad[:5].tolist()}")
    y = v.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _finish("l2_normalize", (v,), y, backward)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Returns the maximum over every coordinate of every parameter of
    ``|analytic - numeric| / max(1, |numeric|)``.  Parameters must be 64-bit.
    ``f`` is re-evaluated with each coordinate nudged by ``+-eps``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise GradCheckError(f"grad_check needs float64 parameters, got {p.dtype} for {p.name or p.shape}")
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value(pi, idx) -> float:
        try:
            val = f()
        except (NonFiniteError, DegenerateInputError) as err:
            raise GradCheckError(f"f not evaluable at parameter {pi} coordinate {idx}: {err}") from err
        fv = float(val.data.reshape(-1)[0])
        if not np.isfinite(fv):
            raise GradCheckError(f"f is non-finite at parameter {pi} coordinate {idx}")
        return fv

    worst = 0.0
    for pi, p in enumerate(params):
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = value(pi, idx)
            p.data[idx] = orig - eps
            fm = value(pi, idx)
            p.data[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[pi][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
