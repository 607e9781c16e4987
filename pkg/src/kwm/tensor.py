"""Dense float32 arrays with a dynamic reverse-mode tape.

Every op builds a new :class:`Tensor` whose ``_backward`` closure maps the
upstream gradient to one gradient per parent. :func:`backward` walks the tape
in reverse topological order and accumulates into the ``grad`` buffers of
leaf tensors (parameters and any user tensor created with
``requires_grad=True``).

Broadcasting is deliberately narrow: two operands must either share a shape,
or the smaller one's shape must be a suffix of the larger one's (a bias
vector against ``[..., D]``, a positional table against ``[B, L, D]``).
Python scalars are treated as constants.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, ShapeError, UsageError

DTYPE = np.float32
SOFTPLUS_THRESHOLD = 20.0
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


@contextlib.contextmanager
def precision(dtype):
    """Temporarily store new tensors as ``dtype``.

    Training and inference always run in float32; float64 exists so
    finite-difference oracles can evaluate the same forward code without
    float32 rounding swamping the difference quotient.
    """
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor carrying a hierarchical name such as ``layers.3.fwd.conv_w``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(grad)`` must return one gradient array (or ``None``) per
    parent, in order. Custom ops outside this module (the selective scan)
    register themselves through this function.
    """
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ----------------------------------------------------------------------------
# tape traversal


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(DTYPE, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) == 0 or big[len(big) - len(small):] != small:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}: need equal shapes or a trailing-suffix operand")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)), dtype=DTYPE) if lead else g


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = DTYPE(b)
        return make_node(a.data + c, (a,), lambda g: (g,), "add_const")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -b)


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = DTYPE(b)
        return make_node(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def _bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), _bw, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data).astype(DTYPE)
    return make_node(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """``v * sigmoid(v)``."""
    x = a.data
    s = expit(x).astype(DTYPE)
    return make_node(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),), "silu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    out = 0.5 * x * (1 + t)

    def _bw(g):
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return make_node(out, (a,), _bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(v))``; returns ``v`` itself above the overflow threshold."""
    x = a.data
    big = x > SOFTPLUS_THRESHOLD
    out = np.where(big, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_THRESHOLD))))
    slope = np.where(big, DTYPE(1), expit(x)).astype(DTYPE)
    return make_node(out, (a,), lambda g: (g * slope,), "softplus")


# ----------------------------------------------------------------------------
# reductions and linear algebra


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, dtype=DTYPE)

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(DTYPE),)

    return make_node(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., M, K] @ [K, P] -> [..., M, P]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_node(ad @ bd, (a, b), _bw, "matmul")


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return make_node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 or missing leading axes; gradient sums them back."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def _bw(g):
        g = g.sum(axis=tuple(range(lead)), dtype=DTYPE) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True, dtype=DTYPE) if axes else g,)

    return make_node(out, (a,), _bw, "broadcast_to")


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    axis = axis % a.ndim
    idx = (np.s_[:],) * axis + (np.s_[start:stop],)
    src = a.shape

    def _bw(g):
        full = np.zeros(src, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return make_node(a.data[idx], (a,), _bw, "slice")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    axis = axis % parts[0].ndim
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concat shapes {[p.shape for p in parts]} on axis {axis}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return make_node(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def reverse_seq(a: Tensor, axis: int = 1) -> Tensor:
    """Flip the sequence axis (axis 1 of ``[B, L, E]`` by default)."""
    return make_node(np.flip(a.data, axis), (a,), lambda g: (np.flip(g, axis),), "reverse_seq")


# ----------------------------------------------------------------------------
# layers


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match last axis of {x.shape}")
    # statistics and the input gradient are formed in float64: for narrow rows the
    # gradient is a small difference of O(1) terms and loses most float32 digits
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    xhat_out = xhat.astype(DTYPE)
    gd = gain.data

    def _bw(g):
        gx_hat = g.astype(np.float64) * gd
        gx = inv * (gx_hat - gx_hat.mean(-1, keepdims=True) - xhat * (gx_hat * xhat).mean(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx.astype(DTYPE), (g * xhat_out).sum(axis=lead, dtype=DTYPE), g.sum(axis=lead, dtype=DTYPE)

    return make_node(xhat_out * gd + bias.data, (x, gain, bias), _bw, "layer_norm")


def conv1d_depthwise(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Causal depthwise convolution over ``[B, E, L]``.

    ``K - 1`` zeros are padded on the leading edge, so output position ``t``
    sees inputs ``t - K + 1 .. t`` of its own channel only.
    """
    if kernel.ndim != 2 or kernel.shape[1] <= 0:
        raise ConfigError(f"conv kernel must be [E, K] with K >= 1, got {kernel.shape}")
    b, e, length = x.shape
    k = kernel.shape[1]
    if kernel.shape[0] != e or bias.shape != (e,):
        raise ShapeError(f"conv channels mismatch: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    xp = np.concatenate([np.zeros((b, e, k - 1), dtype=DTYPE), x.data], axis=2)
    w = kernel.data
    out = np.empty((b, e, length), dtype=DTYPE)
    out[...] = bias.data[:, None]
    for j in range(k):
        out += w[:, j, None] * xp[:, :, j:j + length]

    def _bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for j in range(k):
            gxp[:, :, j:j + length] += w[:, j, None] * g
            gw[:, j] = (g * xp[:, :, j:j + length]).sum(axis=(0, 2), dtype=DTYPE)
        return gxp[:, :, k - 1:], gw, g.sum(axis=(0, 2), dtype=DTYPE)

    return make_node(out, (x, kernel, bias), _bw, "conv1d_depthwise")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_label_smoothed(logits: Tensor, target, smoothing: float = 0.0) -> Tensor:
    """Batch-mean of ``(1 - s) * CE(target) + s * mean_c CE(c)`` for ``[B, C]`` logits."""
    if logits.ndim != 2:
        raise ShapeError(f"expected [B, C] logits, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {smoothing}")
    n, c = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (n,):
        raise ShapeError(f"{target.shape[0]} targets for {n} logit rows")
    if target.min(initial=0) < 0 or target.max(initial=0) >= c:
        raise DataError(f"target ids must lie in [0, {c}), got range [{target.min()}, {target.max()}]")
    logp = log_softmax(logits.data)
    q = np.full((n, c), smoothing / c, dtype=DTYPE)
    q[np.arange(n), target] += DTYPE(1.0 - smoothing)
    loss = -(q * logp).sum(dtype=np.float64) / n

    def _bw(g):
        return ((np.exp(logp) - q) * (g / n),)

    return make_node(np.asarray(loss, dtype=DTYPE), (logits,), _bw, "cross_entropy")
