"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run: every primitive returns a new :class:`Tensor`
that remembers its inputs and a closure producing the local vector-Jacobian
product.  :meth:`Tensor.backward` orders the recorded nodes topologically and
sweeps them once in reverse, accumulating over fan-out.

Only the primitives needed by the models, losses and attacks in this package
are provided.  ``relu``, ``clamp`` and ``l2norm`` use a zero subgradient at
their kinks.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DomainError", "tensor", "as_tensor",
    "add", "sub", "mul", "div", "neg", "scale", "power", "matmul", "conv2d",
    "avg_pool2d", "relu", "exp", "log", "softplus", "tanh", "transpose", "sum", "mean", "l2norm",
    "clamp", "log_softmax", "logsumexp", "softmax", "gather", "broadcast_to", "reshape",
    "backward", "gradients", "grad_check", "GradCheckResult",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class DomainError(ArithmeticError):
    """A primitive was evaluated outside its domain (log of <= 0, division by 0)."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None, op: str = ""):
        self.data = _f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return power(self, p)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _node(data, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a non-differentiable scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError("power: negative base with non-integer exponent")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("power: zero base with negative exponent")
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul: only 1-D/2-D operands supported, got {a.shape} and {b.shape}")

    def vjp(g):
        A = a.data if a.ndim == 2 else a.data[None, :]
        B = b.data if b.ndim == 2 else b.data[:, None]
        G = g.reshape(A.shape[0], B.shape[1])
        ga = (G @ B.T).reshape(a.shape)
        gb = (A.T @ G).reshape(b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return cols, oh, ow


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; ``x`` is (N, C, H, W) and ``w`` is (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    out = np.einsum("nckloq,dckl->ndoq", cols, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def vjp(g):
        gw = np.einsum("ndoq,nckloq->dckl", g, cols, optimize=True)
        gx_pad = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        gcols = np.einsum("ndoq,dckl->nckloq", g, w.data, optimize=True)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
        gx = gx_pad[:, :, pad:pad + h, pad:pad + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, vjp, "conv2d")


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (trailing rows/cols are dropped)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    if oh == 0 or ow == 0:
        raise ShapeError(f"avg_pool2d: window {k} larger than input {x.shape}")
    cropped = x.data[:, :, :oh * k, :ow * k]
    out = cropped.reshape(n, c, oh, k, ow, k).mean(axis=(3, 5))

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[:, :, :oh * k, :ow * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _node(out, (x,), vjp, "avg_pool2d")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    sig = np.exp(-np.logaddexp(0.0, -a.data))
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sig,), "softplus")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.data
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        out = np.maximum(out, lo)
        inside &= a.data > lo
    if hi is not None:
        out = np.minimum(out, hi)
        inside &= a.data < hi
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis, keepdims), 1.0 / count)


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; gradient at the zero vector is 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a.data / safe, 0.0),)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp, "l2norm")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp, "log_softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    """``log(sum(exp(a)))`` along ``axis``; ``-inf`` entries contribute nothing."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (np.expand_dims(g, axis) * np.exp(a.data - out),)

    return _node(np.squeeze(out, axis=axis), (a,), vjp, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def gather(a, index, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with a differentiable source and integer index."""
    a = as_tensor(a)
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise TypeError("gather: index must be integer-valued")
    if index.ndim != a.ndim:
        raise ShapeError(f"gather: index rank {index.ndim} differs from source rank {a.ndim}")
    out = np.take_along_axis(a.data, index, axis=axis)

    def vjp(g):
        ga = np.zeros(a.shape)
        ax = axis % a.ndim
        idx = list(np.indices(index.shape, sparse=True))
        idx[ax] = index
        np.add.at(ga, tuple(idx), g)
        return (ga,)

    return _node(out, (a,), vjp, "gather")


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(node) into ``.grad`` of every reachable tracked node."""
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        return
    order = _topological(output)
    pending: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def gradients(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(output)/d(w) for each ``w``; existing ``.grad`` values are reset first."""
    for w in wrt:
        w.grad = None
    backward(output)
    return [np.zeros(w.shape) if w.grad is None else w.grad for w in wrt]


class GradCheckResult(NamedTuple):
    max_error: float
    skipped: list[int]


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-6,
               kink_tol: float = 1e-4) -> GradCheckResult:
    """Compare the analytic gradient of scalar ``fn`` at ``point`` with central differences.

    The error per coordinate is ``|analytic - fd| / max(1, |analytic|)``.  A
    coordinate whose forward and backward one-sided slopes disagree by more than
    ``kink_tol`` sits on a kink and is excluded (its flat index is reported in
    ``skipped``).
    """
    x0 = _f64(point).copy()
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    (analytic,) = gradients(out, [x])
    f0 = float(out.data)
    flat = x0.reshape(-1)
    errs, skipped = [], []
    for i in range(flat.size):
        orig = flat[i]
        # divide by the steps actually representable around orig
        hi, lo = orig + step, orig - step
        flat[i] = hi
        fp = float(fn(Tensor(x0.copy())).data)
        flat[i] = lo
        fm = float(fn(Tensor(x0.copy())).data)
        flat[i] = orig
        fwd, bwd = (fp - f0) / (hi - orig), (f0 - fm) / (orig - lo)
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            skipped.append(i)
            continue
        a = analytic.reshape(-1)[i]
        errs.append(abs(a - (fp - fm) / (hi - lo)) / max(1.0, abs(a)))
    return GradCheckResult(max(errs, default=0.0), skipped)
