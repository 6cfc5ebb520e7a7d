"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 by default; float64 is carried
through unchanged, which the gradient checks rely on). Every differentiable
operation records its parents and a closure computing the parents' gradients
from the output gradient, so the graph is rebuilt on each forward pass.
:func:`backward` walks it in reverse topological order.

Operations never write to their inputs' arrays.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from lowbridge._backend import kernels

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "conv2d",
    "pool_max2x2",
    "upsample_nearest2x",
    "instance_norm",
    "relu",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "div",
    "tsum",
    "mean",
    "softmax_channels",
    "log_softmax_channels",
]

_grad_enabled = True
_debug = os.environ.get("LOWBRIDGE_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf and raise ``FloatingPointError``."""
    global _debug
    _debug = bool(flag)


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a graph (inference, frozen models)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d float array that can take part in a compute graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        self.data = np.array(data, dtype=dtype, copy=True, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable, op: str) -> "Tensor":
        """Wrap an op result. ``backward_fn(grad)`` returns one gradient (or None) per parent."""
        if _debug and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        data = np.asarray(data)
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; tensor-tensor arithmetic requires identical dims
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else _shift(self, -other)

    def __rsub__(self, other):
        return _shift(_scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else _scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else _scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return _reciprocal(self, other)

    def __neg__(self):
        return _scale(self, -1.0)

    def __pow__(self, exponent):
        return _power(self, exponent)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got dims {t.dims}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.dims} vs {b.dims}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ----------------------------------------------------------------------------
# neural network ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an FCkk weight."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be N,C,H,W; got dims {x.dims}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be F,C,kh,kw; got dims {weight.dims}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: input channels C={c} do not match weight channels {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel height/width must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    for label, size, k in (("height H", h, kh), ("width W", w, kw)):
        span = size + 2 * padding - k
        if span < 0 or span % stride:
            raise ValueError(f"conv2d: input {label}={size} incompatible with kernel {k}, stride {stride}, padding {padding}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias must have dims [{f}], got {bias.dims}")
    if x.dtype != weight.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = kernels.im2col(x.data, kh, kw, stride, padding)  # N, C*kh*kw, Ho*Wo
    wmat = weight.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, f, ho, wo)

    def _backward(g):
        gm = g.reshape(n, f, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im(np.ascontiguousarray(np.matmul(wmat.T, gm)), x.shape, kh, kw, stride, padding)
        if weight.requires_grad:
            acc = gm[0] @ cols[0].T
            for i in range(1, n):
                acc += gm[i] @ cols[i].T
            gw = acc.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor.from_op(out, parents, _backward, "conv2d")


def pool_max2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pooling. Ties route the gradient to the first max in row-major order."""
    if x.ndim != 4:
        raise ValueError(f"pool_max2x2: input must be N,C,H,W; got dims {x.dims}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"pool_max2x2: H and W must be even, got H={x.shape[2]}, W={x.shape[3]}")
    out, arg = kernels.maxpool2x2_forward(x.data)

    def _backward(g):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg),)

    return Tensor.from_op(out, (x,), _backward, "pool_max2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2x: input must be N,C,H,W; got dims {x.dims}")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), _backward, "upsample_nearest2x")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardisation over H,W (biased variance), then affine."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm: input must be N,C,H,W; got dims {x.dims}")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ValueError("instance_norm: needs at least two pixels per channel")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: gamma/beta must have dims [{c}]")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centred * inv
    g4 = gamma.data[None, :, None, None]
    out = xhat * g4 + beta.data[None, :, None, None]

    def _backward(g):
        gx = gg = gbeta = None
        if x.requires_grad:
            dxhat = g * g4
            m1 = dxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        return gx, gg, gbeta

    return Tensor.from_op(out, (x, gamma, beta), _backward, "instance_norm")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def _backward(g):
        return (g * mask,)

    return Tensor.from_op(out, (x,), _backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data > 0
    s = x.data.dtype.type(slope)
    out = np.where(mask, x.data, x.data * s)

    def _backward(g):
        return (np.where(mask, g, g * s),)

    return Tensor.from_op(out, (x,), _backward, "leaky_relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def _backward(g):
        return (g * out * (1 - out),)

    return Tensor.from_op(out, (x,), _backward, "sigmoid")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate NCHW tensors along C. Accepts tensors or a single sequence of them."""
    if len(tensors) == 1 and not isinstance(tensors[0], Tensor):
        tensors = tuple(tensors[0])
    if not tensors:
        raise ValueError("concat_channels: nothing to concatenate")
    ref = tensors[0]
    for t in tensors:
        if t.ndim != 4:
            raise ValueError(f"concat_channels: inputs must be N,C,H,W; got dims {t.dims}")
        for axis, label in ((0, "N"), (2, "H"), (3, "W")):
            if t.shape[axis] != ref.shape[axis]:
                raise ValueError(f"concat_channels: {label} mismatch {ref.shape[axis]} vs {t.shape[axis]}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, _backward, "concat_channels")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "add")

    def _backward(g):
        return g, g

    return Tensor.from_op(a.data + b.data, (a, b), _backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "sub")

    def _backward(g):
        return g, -g

    return Tensor.from_op(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "mul")

    def _backward(g):
        return g * b.data, g * a.data

    return Tensor.from_op(a.data * b.data, (a, b), _backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "div")
    out = a.data / b.data

    def _backward(g):
        return g / b.data, -g * out / b.data

    return Tensor.from_op(out, (a, b), _backward, "div")


def _scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def _backward(g):
        return (g * c,)

    return Tensor.from_op(x.data * c, (x,), _backward, "scale")


def _shift(x: Tensor, c: float) -> Tensor:
    def _backward(g):
        return (g,)

    return Tensor.from_op(x.data + x.data.dtype.type(c), (x,), _backward, "shift")


def _reciprocal(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    out = c / x.data

    def _backward(g):
        return (-g * out / x.data,)

    return Tensor.from_op(out, (x,), _backward, "reciprocal")


def _power(x: Tensor, p: float) -> Tensor:
    if p == 2:
        out = x.data * x.data

        def _backward(g):
            return (g * 2 * x.data,)
    else:
        p = x.data.dtype.type(p)
        out = np.power(x.data, p)

        def _backward(g):
            return (g * p * np.power(x.data, p - 1),)

    return Tensor.from_op(out, (x,), _backward, "power")


def _normalize_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis: int | Iterable[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor.from_op(np.asarray(out), (x,), _backward, "sum")


def mean(x: Tensor, axis: int | Iterable[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return _scale(tsum(x, axes, keepdims), 1.0 / count)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of an N,n,H,W tensor (max-subtracted)."""
    if x.ndim != 4:
        raise ValueError(f"softmax_channels: input must be N,n,H,W; got dims {x.dims}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(out, (x,), _backward, "softmax_channels")


def log_softmax_channels(x: Tensor) -> Tensor:
    """log-softmax over axis 1 via log-sum-exp."""
    if x.ndim != 4:
        raise ValueError(f"log_softmax_channels: input must be N,n,H,W; got dims {x.dims}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def _backward(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Tensor.from_op(out, (x,), _backward, "log_softmax_channels")
