"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is implicit: every tensor produced by an operation keeps references
to its inputs together with a closure that routes the output gradient back to
them.  A monotonically increasing sequence number is assigned at construction
time, so ``backward()`` can replay the recorded operations in reverse
execution order and visit each node exactly once.

Everything is float64.  Tensors are treated as immutable once they take part
in a graph; optimizers mutate parameter ``data`` buffers between forward
passes, never inside one.  A tape belongs to a single owner and must not be
shared across threads; independent tapes may run concurrently.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GradcheckReport",
    "matmul",
    "add",
    "mul",
    "sigmoid",
    "exp",
    "log",
    "leaky_relu",
    "relu",
    "elu",
    "power",
    "clamp",
    "clamp_min",
    "l2_normalize",
    "pool",
    "softmax",
    "concat",
    "take_rows",
    "im2col",
    "gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain."""


_seq = itertools.count()


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape.

        Nodes are processed in descending creation order, which is a valid
        reverse topological order because inputs always predate outputs.
        Each node is visited exactly once; leaf gradients accumulate.
        """
        if self.data.size != 1:
            raise ShapeError("backward() expects a scalar output")
        nodes: dict[int, Tensor] = {}
        stack: list[Tensor] = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)
        for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_np(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / _np(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis=axis, keepdims=keepdims)

    def amax(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _amax(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return _reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return _transpose(self, axes)


def _np(x):
    return np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient contributions over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product.  2-D operands follow the m*k x k*n contract; extra
    leading axes are treated as numpy-style batch dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bwd)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * out_data)

    return _make(out_data, (x,), bwd)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    out_data = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g / x.data)

    return _make(out_data, (x,), bwd)


def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha)
    out_data = x.data * slope

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * slope)

    return _make(out_data, (x,), bwd)


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def elu(x) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise."""
    x = _as_tensor(x)
    neg = x.data <= 0
    e = np.exp(np.minimum(x.data, 0.0))
    out_data = np.where(neg, e - 1.0, x.data)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * np.where(neg, e, 1.0))

    return _make(out_data, (x,), bwd)


def power(x, p) -> Tensor:
    """Elementwise x**p for a constant real exponent.

    The derivative coefficient p*x**(p-1) is forced to zero wherever it is
    non-finite (x = 0 with p < 1), so degenerate boundary points cannot leak
    NaN into the rest of the tape.
    """
    x = _as_tensor(x)
    p = float(p)
    out_data = np.power(x.data, p)

    def bwd(g):
        if not x.requires_grad:
            return
        if p == 0.0:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = p * np.power(x.data, p - 1.0)
        coef = np.where(np.isfinite(coef), coef, 0.0)
        _accumulate(x, g * coef)

    return _make(out_data, (x,), bwd)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _make(out_data, (x,), bwd)


def clamp_min(x, lo: float) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, lo)
    mask = x.data >= lo

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _make(out_data, (x,), bwd)


# -- reductions and shape ops ----------------------------------------------------


def _sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy() if keepdims else np.full_like(x.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(gg, x.data.shape).copy())

    return _make(out_data, (x,), bwd)


def _mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient is routed to the first occurrence of the
    maximum in row-major order."""
    if axis is None:
        out_data = x.data.max(keepdims=keepdims)
        flat_idx = int(x.data.argmax())

        def bwd(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                gx.reshape(-1)[flat_idx] = np.sum(g)
                _accumulate(x, gx)

    else:
        out_data = x.data.max(axis=axis, keepdims=keepdims)
        idx = np.expand_dims(x.data.argmax(axis=axis), axis)

        def bwd(g):
            if x.requires_grad:
                gg = g if keepdims else np.expand_dims(g, axis)
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, idx, gg, axis)
                _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


def _reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    out_data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), bwd)


def _transpose(x: Tensor, axes=None) -> Tensor:
    out_data = x.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g.transpose(inv))

    return _make(out_data, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


def take_rows(x, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; backward scatter-adds, so repeated
    indices accumulate correctly."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a 1-D index list")
    out_data = np.take(x.data, idx, axis=axis)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            sl = (slice(None),) * axis + (idx,)
            np.add.at(gx, sl, g)
            _accumulate(x, gx)

    return _make(out_data, (x,), bwd)


# -- compound numeric ops ----------------------------------------------------


def l2_normalize(v, axis=-1, eps: float = 1e-12) -> Tensor:
    """Scale ``v`` to unit L2 norm along ``axis``.

    The denominator is max(norm, eps), so a zero vector maps to zero instead
    of raising; its gradient is 1/eps there (large but finite).
    """
    v = _as_tensor(v)
    n2 = _sum(mul(v, v), axis=axis, keepdims=True)
    norm = power(clamp_min(n2, eps * eps), 0.5)
    return mul(v, power(norm, -1.0))


def pool(f, kind: str) -> Tensor:
    """Per-channel global pooling.

    Rank-3 input (channels, h, w) reduces to (channels,); a leading batch
    axis is also accepted, giving (batch, channels).  Max pooling routes the
    gradient to the first maximal element in row-major order.
    """
    f = _as_tensor(f)
    if f.ndim not in (3, 4):
        raise ShapeError(f"pool expects rank-3 or rank-4 input, got shape {f.shape}")
    if f.data.shape[-1] == 0 or f.data.shape[-2] == 0:
        raise ShapeError("pool over empty spatial extent")
    flat = _reshape(f, f.shape[:-2] + (f.shape[-2] * f.shape[-1],))
    if kind == "avg":
        return _mean(flat, axis=-1)
    if kind == "max":
        return _amax(flat, axis=-1)
    raise ValueError(f"unknown pool kind {kind!r}")


def softmax(x, axis=-1) -> Tensor:
    """Normalized exponentials along ``axis``, computed with max subtraction."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise DomainError("softmax requires finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = np.sum(g * out_data, axis=axis, keepdims=True)
            _accumulate(x, out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def im2col(x, kernel: int, stride: int, pad: int) -> Tensor:
    """Extract kernel*kernel patches as rows.

    (C, H, W) maps to (positions, C*kernel*kernel); a leading batch axis is
    preserved.  Padding is zero-filled; backward scatter-adds patch gradients
    back into the input.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 3
    d = x.data[None] if squeeze else x.data
    if d.ndim != 4:
        raise ShapeError(f"im2col expects rank-3 or rank-4 input, got shape {x.shape}")
    b, c, h, w = d.shape
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("im2col output would be empty")
    xp = np.pad(d, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, oh, ow, kernel, kernel),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
    )
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kernel * kernel)
    out_data = cols[0] if squeeze else cols

    def bwd(g):
        if not x.requires_grad:
            return
        gg = g[None] if squeeze else g
        gc = gg.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
        gp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                gp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gc[:, :, :, :, i, j]
        gx = gp[:, :, pad : pad + h, pad : pad + w]
        _accumulate(x, gx[0] if squeeze else gx)

    return _make(out_data, (x,), bwd)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradcheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_err: float
    tol: float
    passed: bool
    worst_input: int = -1
    worst_index: tuple = ()
    failures: list = field(default_factory=list)

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        msg = f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"
        if self.failures:
            msg += "; " + "; ".join(self.failures)
        return msg


def gradcheck(fn, inputs, tol: float = 1e-5, step: float = 1e-5) -> GradcheckReport:
    """Compare analytic gradients of a scalar-valued ``fn`` with central
    finite differences.

    ``fn`` is called as ``fn(*inputs)`` and must return a scalar Tensor.
    Only inputs with ``requires_grad`` are checked.  The relative error uses
    a unit floor, |a - n| / max(1, |a|, |n|), so near-zero gradients are
    compared absolutely.  Non-finite values fail the check and are reported
    with their location.
    """
    inputs = [_as_tensor(t) for t in inputs]
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError("gradcheck requires a scalar-valued function")
    failures: list[str] = []
    if not np.isfinite(out.data).all():
        return GradcheckReport(math.inf, tol, False, failures=["non-finite output"])
    out.backward()

    max_rel = 0.0
    worst_input, worst_index = -1, ()
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.isfinite(analytic).all():
            loc = np.argwhere(~np.isfinite(analytic))[0]
            failures.append(f"non-finite analytic grad at input {i}, index {tuple(loc)}")
            continue
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(fn(*inputs).data)
            flat[j] = orig - step
            f_minus = float(fn(*inputs).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[j])
            if not math.isfinite(numeric):
                failures.append(f"non-finite numeric grad at input {i}, flat index {j}")
                continue
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > max_rel:
                max_rel = rel
                worst_input = i
                worst_index = np.unravel_index(j, t.data.shape)
    passed = not failures and max_rel < tol
    return GradcheckReport(max_rel, tol, passed, worst_input, worst_index, failures)
