"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while gradient recording is enabled are appended to a
module-level tape. ``backward`` replays the tape in reverse and accumulates
gradients onto leaf tensors flagged with ``requires_grad``. The tape is
intended to live for a single training step: call ``reset_tape`` (or use the
optimizer helpers in :mod:`nidkit.nn`) after each update.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "DecompositionError",
    "SingularityError",
    "no_grad",
    "reset_tape",
    "tape_length",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "sqrt",
    "exp",
    "log",
    "power",
    "relu",
    "gelu",
    "negate",
    "matmul",
    "tsum",
    "tmean",
    "tvar",
    "softmax",
    "reshape",
    "transpose",
    "take",
    "concat",
    "cholesky",
    "triangular_solve",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values fall outside the mathematical domain of the operation."""


class DecompositionError(ArithmeticError):
    """Cholesky factorization failed; ``pivot`` is the failing pivot index."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


class SingularityError(ArithmeticError):
    """Triangular solve hit a zero diagonal element."""


ArrayLike = Union[float, int, Sequence, np.ndarray]

# ---------------------------------------------------------------------------
# Tape machinery


class _OpRecord:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: "Tensor", inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_tape: list[_OpRecord] = []
_grad_enabled: bool = True


def reset_tape() -> None:
    """Drop every recorded operation. Call between training steps."""
    _tape.clear()


def tape_length() -> int:
    return len(_tape)


class no_grad:
    """Context manager that disables gradient recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _record(output: "Tensor", inputs: tuple, backward_fn: Callable) -> None:
    _tape.append(_OpRecord(output, inputs, backward_fn))


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """Dense n-dimensional array that can participate in gradient recording.

    ``values`` is always a float numpy array (float64 by default, float32 for
    reduced-precision training). ``grad`` is populated by ``backward`` and has
    the same shape as ``values``; repeated backward calls accumulate into it.
    """

    __slots__ = ("values", "requires_grad", "grad", "is_leaf")

    def __init__(self, values: ArrayLike, requires_grad: bool = False,
                 dtype: Optional[np.dtype] = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if dtype is not None:
            arr = arr.astype(dtype)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph management ---------------------------------------------------

    def detach(self) -> "Tensor":
        """Return a leaf sharing this tensor's values, cut from the tape."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def var(self, axis=None, keepdims=False, unbiased=False):
        return tvar(self, axis=axis, keepdims=keepdims, unbiased=unbiased)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(values: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    out.is_leaf = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def bwd(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _result(av * bv, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if np.any(b.values == 0.0):
        raise DomainError("div: divisor contains zero elements")
    av, bv = a.values, b.values

    def bwd(g):
        return (_unbroadcast(g / bv, a.shape),
                _unbroadcast(-g * av / (bv * bv), b.shape))

    return _result(av / bv, (a, b), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0.0):
        raise DomainError("sqrt: negative input")
    out_v = np.sqrt(a.values)

    def bwd(g):
        return (g * 0.5 / out_v,)

    return _result(out_v, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_v = np.exp(a.values)

    def bwd(g):
        return (g * out_v,)

    return _result(out_v, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log: non-positive input")
    av = a.values

    def bwd(g):
        return (g / av,)

    return _result(np.log(av), (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    av = a.values

    def bwd(g):
        return (g * p * np.power(av, p - 1.0),)

    return _result(np.power(av, p), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    av = a.values
    mask = av > 0.0

    def bwd(g):
        return (g * mask,)

    return _result(np.where(mask, av, 0.0), (a,), bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    av = a.values
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * av * av) * _INV_SQRT_2PI
        return (g * (cdf + av * pdf),)

    return _result(av * cdf, (a,), bwd)


def negate(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _result(-a.values, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree ({a.shape} x {b.shape})")
    av, bv = a.values, b.values

    def bwd(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _result(av @ bv, (a, b), bwd)


def cholesky(a: Tensor) -> Tensor:
    """Lower-triangular factor L with L @ L.T == a.

    Only the lower triangle of ``a`` is read (LAPACK convention), so the
    gradient of any upper-triangle element is zero and off-diagonal lower
    elements absorb the symmetric contribution.
    """
    av = a.values
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise ShapeError(f"cholesky: expected a square matrix, got {av.shape}")
    potrf, = lapack.get_lapack_funcs(("potrf",), (av,))
    c, info = potrf(av, lower=1, overwrite_a=False)
    if info > 0:
        raise DecompositionError(pivot=info - 1)
    if info < 0:
        raise ValueError(f"cholesky: illegal argument {-info}")
    lv = np.tril(c)

    def bwd(g):
        # Murray (2016)-style reverse rule:  S = L^{-T} Phi(L^T g) L^{-1},
        # where Phi keeps the lower triangle and halves the diagonal. The
        # stored-lower-triangle convention folds S + S^T into the lower part.
        p = np.tril(lv.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        tmp = solve_triangular(lv, p.T, lower=True, trans="T")
        s = solve_triangular(lv, tmp.T, lower=True, trans="T").T
        ga = np.tril(s + s.T)
        ga[np.diag_indices_from(ga)] = np.diag(s)
        return (ga,)

    return _result(lv, (a,), bwd)


def triangular_solve(l: Tensor, b: Tensor) -> Tensor:
    """Solve l @ x = b for lower-triangular ``l``."""
    lv, bv = l.values, b.values
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1]:
        raise ShapeError(f"triangular_solve: expected square matrix, got {lv.shape}")
    if bv.ndim != 2 or bv.shape[0] != lv.shape[0]:
        raise ShapeError(f"triangular_solve: rhs shape {bv.shape} incompatible with {lv.shape}")
    if np.any(np.diag(lv) == 0.0):
        raise SingularityError("triangular_solve: zero diagonal element")
    xv = solve_triangular(lv, bv, lower=True)

    def bwd(g):
        gb = solve_triangular(lv, g, lower=True, trans="T")
        gl = np.tril(-gb @ xv.T)
        return gl, gb

    return _result(xv, (l, b), bwd)


# ---------------------------------------------------------------------------
# Reductions


def _reduction_axis(a: Tensor, axis) -> None:
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _reduction_axis(a, axis)
    if a.size == 0:
        raise DomainError("sum: empty reduction")

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.values.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _reduction_axis(a, axis)
    if a.size == 0:
        raise DomainError("mean: empty reduction")
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _result(a.values.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def tvar(a: Tensor, axis=None, keepdims: bool = False, unbiased: bool = False) -> Tensor:
    """Variance with population denominator by default (n, not n-1)."""
    _reduction_axis(a, axis)
    if a.size == 0:
        raise DomainError("var: empty reduction")
    n = a.size if axis is None else a.shape[axis]
    denom = (n - 1) if unbiased else n
    if denom <= 0:
        raise DomainError("var: fewer than two elements for unbiased variance")
    mean_v = a.values.mean(axis=axis, keepdims=True)
    centered = a.values - mean_v

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * centered * g / denom,)

    out_v = np.sum(centered * centered, axis=axis, keepdims=keepdims) / denom
    return _result(out_v, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_v = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_v).sum(axis=axis, keepdims=True)
        return (out_v * (g - dot),)

    return _result(out_v, (a,), bwd)


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _result(a.values.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes_fwd = tuple(reversed(range(a.ndim)))
    else:
        axes_fwd = tuple(axes)
    inv = np.argsort(axes_fwd)

    def bwd(g):
        return (g.transpose(inv),)

    return _result(a.values.transpose(axes_fwd), (a,), bwd)


def take(a: Tensor, key) -> Tensor:
    """Indexing view (slices or integer arrays); backward scatter-adds."""
    out_v = a.values[key]
    fancy = isinstance(key, (np.ndarray, list)) or (
        isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key))

    def bwd(g):
        ga = np.zeros_like(a.values)
        if fancy:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        return (ga,)

    return _result(out_v, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis; backward splits the gradient."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gm = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(gm[offsets[i]:offsets[i + 1]], 0, axis)
            for i in range(len(tensors)))

    return _result(np.concatenate([t.values for t in tensors], axis=axis),
                   tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Backward driver


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` onto all requires_grad leaves.

    ``loss`` must be a scalar recorded on the live tape. Gradients of leaves
    add onto any existing ``grad``, so repeated calls without ``zero_grad``
    accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for rec in reversed(_tape):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.backward_fn(g)
        for tensor, ig in zip(rec.inputs, input_grads):
            if ig is None:
                continue
            if tensor.is_leaf:
                if tensor.requires_grad:
                    tensor._accumulate(ig)
            else:
                prev = grads.get(id(tensor))
                grads[id(tensor)] = ig if prev is None else prev + ig
