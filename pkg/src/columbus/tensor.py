"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the CNN needs are provided. Every op records
its parents and a backward closure when any parent requires a gradient; a
call to :func:`backward` walks the recorded graph in reverse topological
order. ReLU nodes consult the :class:`ReluMode` passed to ``backward`` so
that guided backpropagation reuses the same forward graph.
"""
from __future__ import annotations

import enum
from typing import Callable, Optional, Sequence

import numpy as np

from columbus.errors import ConfigError, StateError


class ReluMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


BackwardFn = Callable[[np.ndarray, ReluMode], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-d array of float64 values with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=fn, op=op)
    return Tensor(data, op=op)


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, relu_mode: ReluMode = ReluMode.STANDARD) -> None:
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; gradients of interior nodes
    (recorded level outputs) are reset so the same forward graph can be
    differentiated repeatedly under different ReLU modes.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        raise StateError("backward called on a tensor without a recorded forward pass")
    order = _topological(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.is_leaf or node.grad is None:
            continue
        grads = node._backward(node.grad, relu_mode)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def fn(g, mode):
        return g, g

    return _make(a.data + b.data, (a, b), fn, "add")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def fn(g, mode):
        return (g * factor,)

    return _make(a.data * factor, (a,), fn, "scale")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ConfigError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")

    def fn(g, mode):
        return (g * c,)

    return _make(a.data * c, (a,), fn, "mul_const")


def masked(a: Tensor, keep: np.ndarray) -> Tensor:
    """Zero the entries where ``keep`` is False; gradient flows through survivors only."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ConfigError(f"masked: shape mismatch {a.shape} vs {keep.shape}")

    def fn(g, mode):
        return (np.where(keep, g, 0.0),)

    return _make(np.where(keep, a.data, 0.0), (a,), fn, "masked")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def fn(g, mode):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum()), (a,), fn, "sum")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def fn(g, mode):
        if mode is ReluMode.GUIDED:
            return (g * (positive & (g > 0)),)
        return (g * positive,)

    return _make(np.maximum(x.data, 0.0), (x,), fn, "relu")


# ---------------------------------------------------------------------------
# Layer ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col; shapes (N,C,H,W) * (K,C,kh,kw) -> (N,K,H',W')."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ConfigError(f"conv2d: input has {c} channels but weight expects {wc}")
    if bias.shape != (k,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} does not match {k} filters")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d: stride must be positive and padding nonnegative")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = (wmat @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def fn(g, mode):
        gt = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros((c, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxt[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), fn, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties go to the first element of the window in row-major order.
    """
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ConfigError(f"max_pool2d: input {h}x{w} smaller than pool size {size}")
    views = [
        x.data[:, :, i:ho * size:size, j:wo * size:size] for i in range(size) for j in range(size)
    ]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # Route each window's gradient to the first maximal element in row-major order.
    taken = np.zeros(out.shape, dtype=bool)
    routes = []
    for v in views:
        hit = (v == out) & ~taken
        taken |= hit
        routes.append(hit)

    def fn(g, mode):
        gx = np.zeros((n, c, h, w))
        for (i, j), hit in zip(((i, j) for i in range(size) for j in range(size)), routes):
            gx[:, :, i:ho * size:size, j:wo * size:size] = g * hit
        return (gx,)

    return _make(out, (x,), fn, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def fn(g, mode):
        return (np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight of shape (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear: input {x.shape} incompatible with weight {weight.shape}")

    def fn(g, mode):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), fn, "linear")


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    p = _softmax(logits.data)

    def fn(g, mode):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), fn, "softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of one-hot ``targets`` under softmax(logits)."""
    y = np.asarray(targets, dtype=np.float64)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -(y * log_p).sum() / n

    def fn(g, mode):
        return (g * (np.exp(log_p) - y) / n,)

    return _make(np.asarray(loss), (logits,), fn, "cross_entropy")
