"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are define-by-run. While a Tape is active, every primitive that touches
a tensor requiring grad appends one node (inputs, output, vector-Jacobian
product). `backward` walks the nodes in reverse append order, which is a
topological order by construction.

Usage:
    w = Parameter(np.zeros(3), name="w")
    with Tape() as tape:
        loss = (w * w).sum()
    backward(loss, tape)
    w.grad  # -> 2w
"""

from __future__ import annotations

import contextvars
import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel
from scipy.special import expit

from supnerf.errors import DeterminismError, InvalidArgumentError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

Array = NDArray[np.float64]
Vjp = Callable[[Array], Sequence[Array | None]]

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "supnerf_active_tape", default=None
)
_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf tripwire that runs after every primitive."""
    global _finite_checks
    _finite_checks = enabled


# ---------------------------------------------------------------------------
# Tensors and tape
# ---------------------------------------------------------------------------


class Tensor:
    """An n-dimensional float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "is_leaf", "grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.grad: Array | None = None
        self.name = name

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> Tensor:
        return matmul(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf whose gradient buffer always exists and matches its shape."""

    __slots__ = ()

    def __init__(self, data: ArrayLike, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Vjp


@dataclass
class Tape:
    """Append-only record of primitive applications."""

    nodes: list[Node] = field(default_factory=lambda: [])
    _token: contextvars.Token[Tape | None] | None = field(default=None, repr=False)

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *args: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def lift(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op: str, inputs: tuple[Tensor, ...], out: Array, vjp: Vjp) -> Tensor:
    """Wrap a forward value and record its backward rule on the active tape."""
    out = np.asarray(out, dtype=np.float64)
    if _finite_checks and not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.is_leaf = False
        tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------------------------
# Elementwise binary
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("add", a, b)
    return record_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("sub", a, b)
    return record_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("mul", a, b)
    return record_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = lift(a), lift(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return record_op(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def square_difference(a: Any, b: Any) -> Tensor:
    """(a - b)² elementwise."""
    a, b = lift(a), lift(b)
    _broadcast_shape("square_difference", a, b)
    diff = a.data - b.data

    def vjp(g: Array) -> tuple[Array, Array]:
        gd = 2.0 * diff * g
        return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)

    return record_op("square_difference", (a, b), diff * diff, vjp)


def matmul(a: Any, b: Any) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def vjp(g: Array) -> tuple[Array, Array]:
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return record_op("matmul", (a, b), av @ bv, vjp)


# ---------------------------------------------------------------------------
# Elementwise unary
# ---------------------------------------------------------------------------


def neg(a: Any) -> Tensor:
    a = lift(a)
    return record_op("neg", (a,), -a.data, lambda g: (-g,))


def relu(a: Any) -> Tensor:
    a = lift(a)
    on = a.data > 0
    return record_op("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def sigmoid(a: Any) -> Tensor:
    a = lift(a)
    s = expit(a.data)
    return record_op("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def softplus(a: Any) -> Tensor:
    a = lift(a)
    return record_op(
        "softplus", (a,), np.logaddexp(0.0, a.data), lambda g: (g * expit(a.data),)
    )


def tanh(a: Any) -> Tensor:
    a = lift(a)
    t = np.tanh(a.data)
    return record_op("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def exp(a: Any) -> Tensor:
    a = lift(a)
    e = np.exp(a.data)
    return record_op("exp", (a,), e, lambda g: (g * e,))


def log(a: Any) -> Tensor:
    a = lift(a)
    if np.any(a.data <= 0):
        raise InvalidArgumentError("log: input must be strictly positive")
    return record_op("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sin(a: Any) -> Tensor:
    a = lift(a)
    return record_op("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a: Any) -> Tensor:
    a = lift(a)
    return record_op("cos", (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def sqrt(a: Any) -> Tensor:
    a = lift(a)
    if np.any(a.data < 0):
        raise InvalidArgumentError("sqrt: input must be nonnegative")
    r = np.sqrt(a.data)
    return record_op("sqrt", (a,), r, lambda g: (g / (2.0 * np.maximum(r, 1e-300)),))


def square(a: Any) -> Tensor:
    a = lift(a)
    return record_op("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def clip(a: Any, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes only strictly inside the range."""
    a = lift(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return record_op("clip", (a,), out, lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Reductions and shape
# ---------------------------------------------------------------------------


def _expand_reduced(g: Array, shape: tuple[int, ...], axis: Any, keepdims: bool) -> Array:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    return record_op(
        "sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


def mean(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = lift(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size / max(out.size, 1)
    return record_op(
        "mean", (a,), out,
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


def cumsum(a: Any, axis: int = -1) -> Tensor:
    a = lift(a)

    def vjp(g: Array) -> tuple[Array]:
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return record_op("cumsum", (a,), np.cumsum(a.data, axis=axis), vjp)


def broadcast_to(a: Any, shape: tuple[int, ...]) -> Tensor:
    a = lift(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e
    return record_op("broadcast", (a,), out, lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = lift(a)
    if len(shape) == 1 and isinstance(shape[0], tuple | list):
        shape = tuple(shape[0])
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from e
    return record_op("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    a = lift(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return record_op(
        "transpose", (a,), np.transpose(a.data, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def take(a: Any, index: Any) -> Tensor:
    """Basic or advanced indexing (the `slice` primitive)."""
    a = lift(a)
    try:
        out = a.data[index]
    except IndexError as e:
        raise ShapeError(f"slice: index invalid for shape {a.shape}") from e

    def vjp(g: Array) -> tuple[Array]:
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return record_op("slice", (a,), np.array(out), vjp)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = tuple(lift(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in parts)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]
    return record_op("concat", parts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = tuple(lift(t) for t in tensors)
    try:
        out = np.stack([t.data for t in parts], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in parts)
        raise ShapeError(f"stack: incompatible shapes {shapes}") from e

    def vjp(g: Array) -> tuple[Array, ...]:
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return record_op("stack", parts, out, vjp)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d(x: Any, w: Any, b: Any, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. x: (C, H, W), w: (O, C, k, k), b: (O,) -> (O, H', W')."""
    x, w, b = lift(x), lift(w), lift(b)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, Ho, Wo, k, k)
    out = np.einsum("chwij,ocij->ohw", windows, w.data, optimize=True) + b.data[:, None, None]
    ho, wo = out.shape[1], out.shape[2]

    def vjp(g: Array) -> tuple[Array, Array, Array]:
        gw = np.einsum("chwij,ohw->ocij", windows, g, optimize=True)
        cols = np.einsum("ocij,ohw->chwij", w.data, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                    :, :, :, i, j
                ]
        h, wdt = x.shape[1], x.shape[2]
        gx = gxp[:, padding : padding + h, padding : padding + wdt]
        return gx, gw, g.sum(axis=(1, 2))

    return record_op("conv2d", (x, w, b), out, vjp)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's `.grad`.

    Grads accumulate; call `zero_grad` between passes.
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    seed = np.ones_like(loss.data)
    if loss.is_leaf:
        _accumulate_leaf(loss, seed)
        return

    adjoints: dict[int, Array] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g), strict=True):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                _accumulate_leaf(inp, gi)
            else:
                key = id(inp)
                prev = adjoints.get(key)
                adjoints[key] = np.array(gi) if prev is None else prev + gi


def _accumulate_leaf(t: Tensor, g: Array) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match leaf {t.name!r} {t.shape}")
    t.grad = np.array(g) if t.grad is None else t.grad + g


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Gradient descent with (heavy-ball) momentum."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        for p, vel in zip(self.params, self._velocity, strict=True):
            assert p.grad is not None
            vel *= self.momentum
            vel += p.grad
            p.data = p.data - self.lr * vel


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


class GradCheckReport(BaseModel):
    tolerance: float
    step: float
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    skipped_kinks: dict[str, int]
    passed: bool


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int = 256,
    seed: int = 0,
    magnitude_floor: float = 1e-3,
    kink_ratio: float = 0.1,
) -> GradCheckReport:
    """Compare backward() against central differences (f(x+h) - f(x-h)) / 2h.

    At most `max_coords` seeded coordinates are probed per parameter. A
    coordinate whose one-sided slopes disagree by more than `kink_ratio` sits
    on a kink (e.g. relu at 0) and is skipped.
    """
    zero_grad(params)
    with Tape() as tape:
        loss = fn()
    base = loss.item()
    backward(loss, tape)
    if fn().item() != base:
        raise DeterminismError("two forward passes of the checked function differ")

    rng = np.random.default_rng(seed)
    max_err: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped: dict[str, int] = {}
    for p in params:
        name = p.name or f"param{len(max_err)}"
        assert p.grad is not None
        coords = np.arange(p.size)
        if p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        flat = p.data.reshape(-1)
        worst, n_checked, n_kinks = 0.0, 0, 0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = fn().item()
            flat[idx] = orig - h
            f_minus = fn().item()
            flat[idx] = orig
            fwd, bwd = (f_plus - base) / h, (base - f_minus) / h
            if abs(fwd - bwd) > kink_ratio * max(abs(fwd), abs(bwd), magnitude_floor):
                n_kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(p.grad.reshape(-1)[idx])
            denom = max(abs(numeric), abs(analytic), magnitude_floor)
            worst = max(worst, abs(numeric - analytic) / denom)
            n_checked += 1
        max_err[name], checked[name], skipped[name] = worst, n_checked, n_kinks

    passed = all(err < tol for err in max_err.values())
    if not passed:
        log.warning("grad_check failed: %s", max_err)
    return GradCheckReport(
        tolerance=tol, step=h, max_rel_error=max_err, checked=checked,
        skipped_kinks=skipped, passed=passed,
    )
