"""Dense float64 tensors with a reverse-mode autodiff tape.

Every differentiable op builds its output through :func:`make_op`, which
records the parents and a closure mapping the output gradient to one
gradient per parent. :func:`backward` topologically orders the reachable
records (the :class:`Tape`) and walks it once in reverse.

Broadcasting is limited to scalars and trailing-suffix shapes (per-channel
bias, per-matrix constants); anything else needs an explicit reshape.
Reductions used as losses (``mse_reduce``, ``l1``) average over all elements.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


class SingularityError(ArithmeticError):
    """Raised when a Cholesky factorization meets a non-positive pivot."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-positive pivot {value:.3e} at diagonal index {index}")
        self.index = index
        self.value = value


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(g)`` must return one array (or None) per parent.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Records reachable from a root, inputs before the ops that consume them."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def n_ops(self) -> int:
        return sum(1 for r in self.records if not r.is_leaf)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(tape.records):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + pg if key in pending else pg
    return tape


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(a: tuple, b: tuple, name: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0 or int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{name}: shapes {a} and {b} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return make_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,), "exp")


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_op(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def elu_plus_one(a: Tensor) -> Tensor:
    """elu(x) + 1: x + 1 for x > 0, exp(x) otherwise. Strictly positive."""
    x = a.data
    e = np.exp(np.minimum(x, 0.0))
    y = np.where(x > 0, x + 1.0, e)
    return make_op(y, (a,), lambda g: (g * np.where(x > 0, 1.0, e),), "elu_plus_one")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return make_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return make_op(y, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return make_op(y, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    y = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(y, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def mse_reduce(pred: Tensor, target) -> Tensor:
    """mean((pred - target)^2) over all elements; d/dpred = 2(pred - target)/n."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_reduce: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    n = d.size
    return make_op(
        np.asarray(np.mean(d * d)),
        (pred, target),
        lambda g: (2.0 * g * d / n, -2.0 * g * d / n),
        "mse",
    )


def l1(pred: Tensor, target) -> Tensor:
    """mean(|pred - target|) over all elements (subgradient 0 at ties)."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    n = d.size
    s = np.sign(d)
    return make_op(np.asarray(np.mean(np.abs(d))), (pred, target), lambda g: (g * s / n, -g * s / n), "l1")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return make_op(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return make_op(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    n = len(ts)
    axis = axis % (ts[0].ndim + 1)
    return make_op(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D (shared across a's batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def _cholesky(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    # locate the failing pivot for the error message
    for M in A.reshape(-1, *A.shape[-2:]):
        n = M.shape[0]
        L = np.zeros_like(M)
        for j in range(n):
            d = M[j, j] - L[j, :j] @ L[j, :j]
            if not d > 0:
                raise SingularityError(j, float(d))
            L[j, j] = np.sqrt(d)
            L[j + 1 :, j] = (M[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    raise SingularityError(-1, float("nan"))


def _chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    # L is lower-triangular; solve L L^T X = B, batched over leading axes
    Y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), Y)


def solve_spd(G: Tensor, B: Tensor) -> Tensor:
    """X with G X = B for symmetric positive definite G (Cholesky).

    G is symmetrized as (G + G^T)/2 before factorization, so the gradient
    with respect to G is symmetric as well.
    """
    G, B = as_tensor(G), as_tensor(B)
    if G.shape[-1] != G.shape[-2] or G.shape[-1] != B.shape[-2] or G.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"solve_spd: incompatible shapes {G.shape} and {B.shape}")
    Gs = 0.5 * (G.data + np.swapaxes(G.data, -1, -2))
    L = _cholesky(Gs)
    X = _chol_solve(L, B.data)

    def bw(g):
        gB = _chol_solve(L, g)
        gG = -gB @ np.swapaxes(X, -1, -2)
        return 0.5 * (gG + np.swapaxes(gG, -1, -2)), gB

    return make_op(X, (G, B), bw, "solve_spd")


# ---------------------------------------------------------------------------
# fused normalization / softmax


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, -1) + eps) * weight (scale-only)."""
    xd, w = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xh = xd * r
    D = xd.shape[-1]

    def bw(g):
        gw = _unbroadcast(g * xh, w.shape)
        gxh = g * w
        gx = r * (gxh - xh * np.sum(gxh * xh, axis=-1, keepdims=True) / D)
        return gx, gw

    return make_op(xh * w, (x, weight), bw, "rms_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),), "softmax")


# ---------------------------------------------------------------------------
# spatial ops on channels-last grids (... x H x W x D)


def avg_pool2(x: Tensor) -> Tensor:
    *lead, H, W, D = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {H}x{W}")
    y = x.data.reshape(*lead, H // 2, 2, W // 2, 2, D).mean(axis=(-4, -2))

    def bw(g):
        g4 = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g4 * 0.25,)

    return make_op(y, (x,), bw, "avg_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    *lead, h, w, D = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)

    def bw(g):
        return (g.reshape(*lead, h, 2, w, 2, D).sum(axis=(-4, -2)),)

    return make_op(y, (x,), bw, "upsample_nearest2")


def depthwise_conv2(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 2-D correlation with zero padding; output keeps x's shape."""
    kh, kw, Dk = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise_conv2 needs odd kernel extents, got {kh}x{kw}")
    *lead, H, W, D = x.shape
    if D != Dk:
        raise DimensionError(f"depthwise_conv2: {D} channels vs kernel channels {Dk}")
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * len(lead) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad)
    k = kernels.data
    y = np.zeros(x.shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            y += xp[..., i : i + H, j : j + W, :] * k[i, j]

    def bw(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(k)
        red = tuple(range(g.ndim - 1))
        for i in range(kh):
            for j in range(kw):
                gp[..., i : i + H, j : j + W, :] += g * k[i, j]
                gk[i, j] = np.sum(xp[..., i : i + H, j : j + W, :] * g, axis=red)
        return gp[..., ph : ph + H, pw : pw + W, :], gk

    return make_op(y, (x, kernels), bw, "depthwise_conv2")


def const_axis_matmul(x: Tensor, M: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix along one axis: y[..., i, ...] = sum_j M[i, j] x[..., j, ...]."""
    axis = axis % x.ndim
    if x.shape[axis] != M.shape[1]:
        raise DimensionError(f"axis {axis} has extent {x.shape[axis]}, operator expects {M.shape[1]}")
    y = np.moveaxis(np.tensordot(M, x.data, axes=([1], [axis])), 0, axis)

    def bw(g):
        return (np.moveaxis(np.tensordot(M.T, g, axes=([1], [axis])), 0, axis),)

    return make_op(y, (x,), bw, "axis_matmul")


# ---------------------------------------------------------------------------
# gradient utilities (plain arrays)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale the whole set by min(1, max_norm / ||g||_2); returns (clipped, norm)."""
    norm = global_norm(grads)
    if norm > max_norm:
        f = max_norm / norm
        return [g * f for g in grads], norm
    return list(grads), norm
