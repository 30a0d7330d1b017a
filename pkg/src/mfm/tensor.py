"""Dense real-array kernel with reverse-mode gradients.

Every differentiable operation here computes its forward value with numpy
and registers a vector-Jacobian product on the active :class:`GradTape`.
Outputs are checked for NaN/Inf on every call; a non-finite value raises
:class:`NumericalError` instead of propagating silently.

The kernel runs in one of two global precision modes, 64-bit (used for all
gradient verification) or 32-bit (used for training throughput). The
independent oracle for every analytic gradient is :func:`finite_diff_grad`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "ShapeError",
    "NumericalError",
    "TapeError",
    "set_precision",
    "precision_bits",
    "precision",
    "backward",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "bmm",
    "transpose",
    "reshape",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "take",
    "conv2d_3x3",
    "linear",
    "detach",
]


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """A gradient tape was misused (e.g. replayed twice)."""


# ---------------------------------------------------------------------------
# precision mode
# ---------------------------------------------------------------------------

_DTYPE = np.float64


def set_precision(bits: int) -> None:
    """Select the global precision mode: 64 for checks, 32 for training."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


def precision_bits() -> int:
    return 64 if _DTYPE is np.float64 else 32


class precision:
    """Context manager that temporarily switches the precision mode."""

    def __init__(self, bits: int):
        self.bits = bits
        self._saved = 64

    def __enter__(self):
        self._saved = precision_bits()
        set_precision(self.bits)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


def _ensure_finite(data: np.ndarray, op: str) -> None:
    # a NaN/Inf anywhere makes the sum non-finite, so one pass suffices
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(np.sum(data)):
            raise NumericalError(f"non-finite values in output of {op}")


# ---------------------------------------------------------------------------
# tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable dense array of reals.

    The backing numpy array is marked read-only; all operations allocate
    fresh outputs, so tensors are safe to share across threads.
    """

    __slots__ = ("data", "_param")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self._param: "Parameter | None" = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: take ownership of a freshly allocated array, no copy
        out = cls.__new__(cls)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        arr.flags.writeable = False
        out.data = arr
        out._param = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # arithmetic sugar; scalars become constants in the current precision
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _raw(x: Tensor | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


class Parameter:
    """Named trainable value with an accumulated gradient of the same shape."""

    __slots__ = ("name", "_value", "grad")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        self._value = value
        value._param = self
        self.grad = np.zeros(value.shape, dtype=value.data.dtype)

    @property
    def value(self) -> Tensor:
        return self._value

    @value.setter
    def value(self, new: Tensor) -> None:
        if new.shape != self._value.shape:
            raise ShapeError(
                f"parameter {self.name}: new value shape {new.shape} != {self._value.shape}"
            )
        self._value._param = None
        self._value = new
        new._param = self

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["GradTape"] = []


_TAPES = _TapeStack()


class GradTape:
    """Records the operation sequence needed for one reverse sweep.

    Use as a context manager around a forward computation; call
    :func:`backward` (or :meth:`backward`) exactly once afterwards.
    Replaying a consumed tape raises :class:`TapeError`. Recording is
    per-thread: a tape only sees operations run on the thread that opened it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __enter__(self):
        _TAPES.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.stack.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    _ensure_finite(out_data, op)
    out = Tensor._wrap(np.asarray(out_data))
    stack = _TAPES.stack
    if stack:
        stack[-1]._nodes.append(_Node(out, tuple(inputs), vjp, op))
    return out


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every parameter reached by loss.

    Parameters never touched by the recorded computation keep their grad
    untouched (zero after a fresh zero-grad).
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape._used:
        raise TapeError("tape already replayed; record a fresh forward pass")
    tape._used = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        leaves.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            if gi.shape != t.shape:
                raise ShapeError(
                    f"internal: vjp of {node.op} produced shape {gi.shape} for input {t.shape}"
                )
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    for key, g in grads.items():
        param = leaves[key]._param
        if param is not None:
            param.grad += g.astype(param.grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _record(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _record(
        "sub", (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _record(
        "div", (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * dens),)

    return _record("gelu", (a,), out, vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _record("mean", (a,), out, vjp)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ax = axis % parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", parts, out, vjp)


def take(a: Tensor, index: int) -> Tensor:
    """Select a single slice along axis 0 (a scalar for 1-d input)."""
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"index {index} out of range for leading dim {a.shape[0]}")
    out = a.data[index].copy() if a.ndim > 1 else np.asarray(a.data[index])

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("take", (a,), out, vjp)


def detach(a: Tensor) -> Tensor:
    """Copy of `a` cut off from the recorded graph."""
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; `a` of rank 2 or 3 (batched over the leading dim), `b` of rank 2."""
    if b.ndim != 2 or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs rank-2/3 x rank-2, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T
        if a.ndim == 2:
            gb = a.data.T @ g
        else:
            k, m = a.shape[-1], g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return (ga, gb)

    return _record("matmul", (a, b), out, vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, [B,n,k] x [B,k,m]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm needs [B,n,k] x [B,k,m], got {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g)

    return _record("bmm", (a, b), out, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------------------
# normalization and softmax
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; outputs are positive and sum to 1."""
    ax = axis % x.ndim
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (x,), out, vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=ax, keepdims=True),)

    return _record("log_softmax", (x,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain and bias.

    Uses the population (biased) variance. `gain` and `bias` must have the
    last-axis length of `x`.
    """
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        lead = tuple(range(x.ndim - 1))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _record("layer_norm", (x, gain, bias), out, vjp)


# ---------------------------------------------------------------------------
# spatial convolution (3x3, stride 1, zero same-padding)
# ---------------------------------------------------------------------------


def conv2d_3x3(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 same-padded convolution: [B,C,H,W] x [O,C,3,3] -> [B,O,H,W]."""
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3 needs [B,C,H,W] x [O,C,3,3], got {x.shape} x {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_3x3 channel mismatch: {x.shape} x {kernel.shape}")
    B, C, H, W = x.shape
    O = kernel.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, H, W), dtype=x.data.dtype)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum(
                "bchw,oc->bohw", xp[:, :, dy : dy + H, dx : dx + W], kernel.data[:, :, dy, dx]
            )

    def vjp(g):
        gk = np.zeros(kernel.shape, dtype=g.dtype)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                patch = xp[:, :, dy : dy + H, dx : dx + W]
                gk[:, :, dy, dx] = np.einsum("bohw,bchw->oc", g, patch)
                gxp[:, :, dy : dy + H, dx : dx + W] += np.einsum(
                    "bohw,oc->bchw", g, kernel.data[:, :, dy, dx]
                )
        return (gxp[:, :, 1 : 1 + H, 1 : 1 + W], gk)

    return _record("conv2d_3x3", (x, kernel), out, vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x.

    Independent of the tape machinery; expects a deterministic f and the
    64-bit precision mode.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - h
        fm = f(Tensor(bumped.reshape(x.shape))).item()
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))


def rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Max elementwise |a - r| / max(1, |a|), the gradient-check metric."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(analytic))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - reference) / denom))
