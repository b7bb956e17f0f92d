"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays underneath, a closure per graph
node for the backward pass, and only the operations the prefix-sums
networks need (1D convolution, batch norm, a handful of pointwise maps,
two-class cross-entropy).

Broadcasting is limited to two patterns: a scalar (shape ``()``) against
anything, and a per-channel vector (shape ``(C,)``) against a ``[B, C, L]``
tensor.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "graph_generation",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "sum",
    "mean",
    "relu",
    "elu",
    "tanh",
    "logistic",
    "gelu",
    "elementwise",
    "conv1d",
    "concat",
    "batchnorm1d",
    "cross_entropy",
    "detach",
]

_grad_enabled = True
# Bumped after every backward(); lets callers tell whether a cached graph
# node has already had its buffers released.
_generation = 0


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the dimension."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def graph_generation() -> int:
    return _generation


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        global _generation
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        _generation += 1

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


# broadcasting ---------------------------------------------------------------

def _broadcast_kind(a: tuple[int, ...], b: tuple[int, ...]) -> str:
    if a == b:
        return "same"
    if b == ():
        return "scalar_b"
    if a == ():
        return "scalar_a"
    if len(b) == 1 and len(a) == 3 and a[1] == b[0]:
        return "channel_b"
    if len(a) == 1 and len(b) == 3 and b[1] == a[0]:
        return "channel_a"
    for dim, (da, db) in enumerate(zip(a, b)):
        if da != db:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}: dimension {dim} is {da} vs {db}")
    raise ShapeError(f"cannot broadcast shapes {a} and {b}: rank {len(a)} vs {len(b)}")


def _lift(arr: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == f"channel_{side}":
        return arr[None, :, None]
    return arr


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # per-channel
    return grad.sum(axis=(0, 2))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a.shape, b.shape)
    out = _lift(a.data, kind, "a") + _lift(b.data, kind, "b")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a.shape, b.shape)
    out = _lift(a.data, kind, "a") - _lift(b.data, kind, "b")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a.shape, b.shape)
    ad, bd = _lift(a.data, kind, "a"), _lift(b.data, kind, "b")
    out = ad * bd

    def backward(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a.shape, b.shape)
    ad, bd = _lift(a.data, kind, "a"), _lift(b.data, kind, "b")
    out = ad / bd

    def backward(g):
        ga = _reduce_to(g / bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


# pointwise nonlinearities -----------------------------------------------------

def relu(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0)
    # right-derivative at the kink
    mask = (x >= 0).astype(x.dtype)
    return _node(out, (a,), lambda g: (g * mask,), "relu")


def elu(a: Tensor) -> Tensor:
    """ELU with alpha fixed at 1."""
    x = a.data
    out = np.maximum(x, 0) + np.expm1(np.minimum(x, 0))

    def backward(g):
        # slope is exp(x) = out + 1 below zero, 1 at and above
        return (g * (np.minimum(out, 0) + 1),)

    return _node(out, (a,), backward, "elu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def _stable_logistic(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype, copy=False)


def logistic(a: Tensor) -> Tensor:
    out = _stable_logistic(a.data)
    return _node(out, (a,), lambda g: (g * out * (1 - out),), "logistic")


_INV_SQRT2 = 1 / math.sqrt(2)
_INV_SQRT2PI = 1 / math.sqrt(2 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(out, (a,), backward, "gelu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "elu": elu,
    "tanh": tanh,
    "logistic": logistic,
    "gelu": gelu,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def detach(a: Tensor) -> Tensor:
    """Same values, no history. Shares the underlying buffer."""
    return Tensor(a.data)


# convolution --------------------------------------------------------------------

def _pad_length(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    out = np.zeros(x.shape[:2] + (x.shape[2] + 2 * p,), dtype=x.dtype)
    out[:, :, p:-p] = x
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    cout, cin, k = w.shape
    xp = _pad_length(x, padding)
    lout = xp.shape[2] - k + 1
    # im2col with tap-major rows, one GEMM broadcast over the batch
    cols = np.concatenate([xp[:, :, t:t + lout] for t in range(k)], axis=1)
    wr = w.transpose(0, 2, 1).reshape(cout, k * cin)
    return np.matmul(wr, cols)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``padding`` defaults to ``(k - 1) // 2``, which preserves length for odd k.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [B, Cin, L], got rank {x.ndim}")
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [Cout, Cin, k], got rank {kernel.ndim}")
    cout, cin, k = kernel.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv1d channel mismatch: input Cin={x.shape[1]} but kernel Cin={cin}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got k={k}")
    p = (k - 1) // 2 if padding is None else int(padding)
    if not 0 <= p <= k - 1:
        raise ShapeError(f"conv1d padding must lie in [0, {k - 1}], got {p}")
    if x.shape[2] + 2 * p < k:
        raise ShapeError(f"conv1d input length L={x.shape[2]} too short for kernel k={k}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d bias must have shape ({cout},), got {bias.shape}")

    xd, wd = x.data, kernel.data
    out = _conv_forward(xd, wd, p)
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            # full correlation with the flipped, transposed kernel
            wt = np.ascontiguousarray(wd[:, :, ::-1].transpose(1, 0, 2))
            gx = _conv_forward(g, wt, k - 1 - p)
        if kernel.requires_grad:
            xp = _pad_length(xd, p)
            win = sliding_window_view(xp, g.shape[2], axis=2)  # B, Cin, k, Lout
            gw = np.einsum("bol,bitl->oit", g, win, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward, "conv1d")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        for dim, (a, b) in enumerate(zip(ref, t.shape)):
            if dim != axis and a != b:
                raise ShapeError(f"concat mismatch in dimension {dim}: {a} vs {b}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, tuple(tensors), backward, "concat")


# normalization and loss ------------------------------------------------------------

def batchnorm1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, L).

    In training mode the running statistics are updated in place (running
    variance uses the unbiased estimate, as is conventional).
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d input must be [B, C, L], got rank {x.ndim}")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batchnorm1d channel mismatch: input C={c}, scale {weight.shape}, shift {bias.shape}")
    xd = x.data
    if training:
        n = xd.shape[0] * xd.shape[2]
        if n < 2:
            raise ShapeError(f"batchnorm1d in train mode needs B*L >= 2, got {n}")
        mu = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        n = None
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None]) * inv_std[None, :, None]
    out = xhat * weight.data[None, :, None] + bias.data[None, :, None]

    def backward(g):
        gw = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * weight.data[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2))[None, :, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, gw, gb

    return _node(out, (x, weight, bias), backward, "batchnorm1d")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean two-class (or C-class) cross-entropy over every (batch, position)."""
    if logits.ndim != 3:
        raise ShapeError(f"cross_entropy logits must be [B, C, L], got rank {logits.ndim}")
    t = np.asarray(targets)
    b, c, length = logits.shape
    if t.shape != (b, length):
        raise ShapeError(f"cross_entropy targets must have shape {(b, length)}, got {t.shape}")
    if not np.all((t >= 0) & (t < c) & (t == np.floor(t))):
        raise ValueError(f"cross_entropy targets must be class indices in [0, {c}); binary for two channels")
    t = t.astype(np.intp)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    picked = np.take_along_axis(logp, t[:, None, :], axis=1)
    n = b * length
    out = np.asarray(-picked.sum() / n)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[:, None, :], np.take_along_axis(p, t[:, None, :], axis=1) - 1, axis=1)
        return (p * (g / n),)

    return _node(out, (logits,), backward, "cross_entropy")
