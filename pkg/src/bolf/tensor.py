"""Dense tensors with reverse-mode automatic differentiation.

Ops execute eagerly on numpy float64 arrays. While a :class:`Tape` is
active, every op whose output requires a gradient records an adjoint
closure; :func:`backward` replays the closures in reverse execution
order, which for a define-by-run graph is a valid topological order.
Gradients accumulate additively across fan-out, so running several
backward passes before clearing grads sums their contributions.

:func:`grad_check` is the independent oracle: central finite differences
on a sampled subset of coordinates, compared against the tape's
analytic gradient.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT_2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar loss, or backward on a consumed tape."""


class Tensor:
    """A dense float array plus an optional same-shape gradient buffer.

    Tensors are immutable once created except for ``grad`` accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # operator sugar; all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed primitives, replayed in reverse by backward.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)

    Tapes nest; only the innermost active tape records. A tape belongs to
    the thread that opened it (the active-tape stack is thread-local).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _record(out: Tensor, adjoint: Callable[[np.ndarray], None]) -> None:
    stack = _tape_stack()
    if stack and out.requires_grad:
        stack[-1]._nodes.append((out, adjoint))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    _record(out, adjoint)
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    _record(out, adjoint)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, adjoint)
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data, a.requires_grad)

    def adjoint(g):
        _accum(a, -g)

    _record(out, adjoint)
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def adjoint(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record(out, adjoint)
    return out


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy(), a.requires_grad)

    def adjoint(g):
        _accum(a, g.T)

    _record(out, adjoint)
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def adjoint(g):
        _accum(a, g.reshape(a.data.shape))

    _record(out, adjoint)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _wrap(a)
    if not 0 <= axis < a.ndim:
        raise ShapeMismatch(f"narrow: axis {axis} out of range for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatch(
            f"narrow: [{start}, {start + length}) exceeds axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy(), a.requires_grad)

    def adjoint(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        _accum(a, buf)

    _record(out, adjoint)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    out = Tensor(data, any(t.requires_grad for t in tensors))
    sizes = [t.shape[axis] for t in tensors]

    def adjoint(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + n)
                _accum(t, g[tuple(index)])
            offset += n

    _record(out, adjoint)
    return out


def take(a, index: int) -> Tensor:
    """Select one element of a vector as a scalar tensor."""
    a = _wrap(a)
    if a.ndim != 1:
        raise ShapeMismatch(f"take expects a vector, got shape {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise ShapeMismatch(f"take: index {index} out of range for shape {a.shape}")
    out = Tensor(a.data[index], a.requires_grad)

    def adjoint(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        _accum(a, buf)

    _record(out, adjoint)
    return out


def sum_all(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(), a.requires_grad)

    def adjoint(g):
        _accum(a, np.full(a.data.shape, float(g), dtype=DTYPE))

    _record(out, adjoint)
    return out


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.size
    out = Tensor(a.data.mean(), a.requires_grad)

    def adjoint(g):
        _accum(a, np.full(a.data.shape, float(g) / n, dtype=DTYPE))

    _record(out, adjoint)
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):  # overflow is reported as NumericError below
        data = np.exp(a.data)
    if not np.all(np.isfinite(data)):
        raise NumericError("exp overflowed to a non-finite value")
    out = Tensor(data, a.requires_grad)

    def adjoint(g):
        _accum(a, g * data)

    _record(out, adjoint)
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")
    out = Tensor(np.log(a.data), a.requires_grad)

    def adjoint(g):
        _accum(a, g / a.data)

    _record(out, adjoint)
    return out


# ---------------------------------------------------------------------------
# fused neural-net primitives
# ---------------------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by per-row max subtraction.

    Every output row is nonnegative and sums to 1 for any finite input,
    including extreme magnitudes.
    """
    x = _wrap(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, x.requires_grad)

    def adjoint(g):
        # d/dx of softmax: y * (g - sum_j g_j y_j) per row
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    _record(out, adjoint)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis, then apply the affine map.

    Per vector: subtract the mean, divide by sqrt(variance + eps)
    (population variance), scale by gamma and shift by beta.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({d},) "
            f"to match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(gamma.data * xhat + beta.data,
                 x.requires_grad or gamma.requires_grad or beta.requires_grad)

    def adjoint(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    _record(out, adjoint)
    return out


def gelu(x, approximate: bool = False) -> Tensor:
    """Gaussian-error linear unit.

    Default is the exact erf formulation 0.5*x*(1 + erf(x/sqrt(2))).
    With ``approximate=True`` uses the tanh form; the adjoint matches
    whichever formulation produced the output.
    """
    x = _wrap(x)
    if approximate:
        inner = _SQRT_2_OVER_PI * (x.data + 0.044715 * x.data ** 3)
        t = np.tanh(inner)
        out = Tensor(0.5 * x.data * (1.0 + t), x.requires_grad)

        def adjoint(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x.data ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
            _accum(x, g * d)
    else:
        cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
        out = Tensor(x.data * cdf, x.requires_grad)

        def adjoint(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            _accum(x, g * (cdf + x.data * pdf))

    _record(out, adjoint)
    return out


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) at train time.

    Eval mode (or p == 0) is the identity, so eval outputs are a pure
    function of the weights.
    """
    x = _wrap(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng for determinism")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask, x.requires_grad)

    def adjoint(g):
        _accum(x, g * mask)

    _record(out, adjoint)
    return out


# ---------------------------------------------------------------------------
# backward + gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every requires_grad leaf reachable from the loss.

    Visits each recorded op exactly once, in reverse execution order.
    The tape is single-use.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, adjoint in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        adjoint(g)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    passed: bool
    tol: float
    step: float
    n_checked: int
    worst_rel: float
    worst_coord: tuple[int, ...] | None
    worst_analytic: float
    worst_numeric: float

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.worst_coord is None else (
            f" at {self.worst_coord} (analytic {self.worst_analytic:.6g}, "
            f"central {self.worst_numeric:.6g})")
        return (f"{status}: worst relative error {self.worst_rel:.3g} over "
                f"{self.n_checked} coordinates (tol {self.tol:g}){where}")


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3,
               tol: float = 1e-2, max_coords: int = 16,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare the tape's gradient of scalar f against central differences.

    Checks a sampled subset of coordinates (all of them when the input is
    small). Relative error per coordinate is
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.

    Raises NumericError if re-evaluating f at the same point gives a
    different value (f must be deterministic).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE, copy=True)
    probe = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued f")
    y0 = float(y.data)
    if float(f(Tensor(base.copy())).data) != y0:
        raise NumericError("grad_check: f is not deterministic (re-evaluation mismatch)")
    backward(y, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    flat_analytic = analytic.reshape(-1)

    n = base.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))

    worst_rel = 0.0
    worst_coord = None
    worst_a = worst_n = 0.0
    flat_base = base.reshape(-1)
    for c in coords:
        plus = flat_base.copy()
        plus[c] += step
        minus = flat_base.copy()
        minus[c] -= step
        f_plus = float(f(Tensor(plus.reshape(base.shape))).data)
        f_minus = float(f(Tensor(minus.reshape(base.shape))).data)
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(flat_analytic[c])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel >= worst_rel:
            worst_rel = rel
            worst_coord = np.unravel_index(int(c), base.shape)
            worst_a, worst_n = a, numeric
    return GradCheckReport(
        passed=worst_rel < tol,
        tol=tol,
        step=step,
        n_checked=len(coords),
        worst_rel=worst_rel,
        worst_coord=worst_coord,
        worst_analytic=worst_a,
        worst_numeric=worst_n,
    )
