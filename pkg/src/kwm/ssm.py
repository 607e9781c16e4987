"""Diagonal state space recurrences: discretization, selective scan, kernel form.

Shapes follow the usual Mamba naming: ``B`` batch, ``L`` sequence length,
``E`` channels (expanded width), ``N`` state size per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._scan_kernels import scan_backward, scan_forward
from .errors import NumericDomainError, ShapeError, UsageError
from .tensor import Tensor


@dataclass
class SsmParams:
    """Continuous diagonal state matrix; ``A[e, n]`` is the n-th pole of channel e."""

    A: Tensor

    def __post_init__(self):
        if self.A.ndim != 2:
            raise ShapeError(f"A must be [E, N], got {self.A.shape}")


@dataclass
class SelectiveInputs:
    """Input-dependent scan operands for one direction.

    ``delta``/``x`` are ``[B, L, E]``, ``B_in``/``C_in`` are ``[B, L, N]`` and
    ``D_skip`` is a per-channel feedthrough ``[E]`` (``None`` means zero).
    """

    delta: Tensor
    B_in: Tensor
    C_in: Tensor
    x: Tensor
    D_skip: Tensor | None = None

    def reversed(self) -> SelectiveInputs:
        """Same operands with the sequence axis flipped."""
        return SelectiveInputs(
            T.reverse_seq(self.delta), T.reverse_seq(self.B_in), T.reverse_seq(self.C_in),
            T.reverse_seq(self.x), self.D_skip,
        )


@dataclass
class DiscretizedParams:
    A_bar: Tensor  # [B, L, E, N]
    B_bar: Tensor  # [B, L, E, N]


def _require_positive(delta: np.ndarray) -> None:
    if not np.all(delta > 0):
        raise NumericDomainError(f"delta must be strictly positive; min is {float(np.min(delta))}")


def discretize(A: Tensor, delta: Tensor, B_in: Tensor) -> DiscretizedParams:
    """``A_bar = exp(delta * A)``, ``B_bar = delta * B`` (Euler form for B).

    Both outputs are differentiable. The exact zero-order-hold B is available
    from :func:`discretize_zoh`.
    """
    _require_positive(delta.data)
    ad, dd, bd = A.data, delta.data, B_in.data
    prod = dd[..., None] * ad
    a_bar = np.exp(prod)

    def _bw_a(g):
        gp = g * a_bar
        return (gp * dd[..., None]).sum(axis=(0, 1), dtype=T.DTYPE), (gp * ad).sum(-1, dtype=T.DTYPE)

    def _bw_b(g):
        return (g * bd[:, :, None, :]).sum(-1, dtype=T.DTYPE), (g * dd[..., None]).sum(-2, dtype=T.DTYPE)

    a_node = T.make_node(a_bar, (A, delta), _bw_a, "discretize_A")
    b_node = T.make_node(dd[..., None] * bd[:, :, None, :], (delta, B_in), _bw_b, "discretize_B")
    return DiscretizedParams(a_node, b_node)


def discretize_zoh(A, delta, B_in) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order hold in float64: ``(dA)^-1 (exp(dA) - 1) dB``, elementwise for diagonal A.

    Accepts plain arrays or tensors with the shapes of :func:`discretize`.
    Only used as a reference.
    """
    A = np.asarray(getattr(A, "data", A), dtype=np.float64)
    delta = np.asarray(getattr(delta, "data", delta), dtype=np.float64)
    B_in = np.asarray(getattr(B_in, "data", B_in), dtype=np.float64)
    dA = delta[..., None] * A
    a_bar = np.exp(dA)
    # (exp(dA) - 1) / dA -> 1 as dA -> 0
    phi = np.where(np.abs(dA) < 1e-12, 1.0, np.expm1(dA) / np.where(dA == 0, 1.0, dA))
    b_bar = phi * delta[..., None] * B_in[:, :, None, :]
    return a_bar, b_bar


def _validate(inputs: SelectiveInputs, A: Tensor) -> tuple[int, int, int, int]:
    if inputs.x.ndim != 3:
        raise ShapeError(f"x must be [B, L, E], got {inputs.x.shape}")
    b, length, e = inputs.x.shape
    if A.ndim != 2 or A.shape[0] != e:
        raise ShapeError(f"A {A.shape} does not match x {inputs.x.shape}")
    n = A.shape[1]
    if inputs.delta.shape != (b, length, e):
        raise ShapeError(f"delta {inputs.delta.shape} does not match x {inputs.x.shape}")
    for name, t in (("B_in", inputs.B_in), ("C_in", inputs.C_in)):
        if t.shape != (b, length, n):
            raise ShapeError(f"{name} {t.shape} does not match (B, L, N) = {(b, length, n)}")
    if inputs.D_skip is not None and inputs.D_skip.shape != (e,):
        raise ShapeError(f"D_skip {inputs.D_skip.shape} does not match E = {e}")
    tensors = [inputs.delta, inputs.B_in, inputs.C_in, inputs.x, A]
    if inputs.D_skip is not None:
        tensors.append(inputs.D_skip)
    for t in tensors:
        if np.isnan(t.data).any():
            raise NumericDomainError("NaN in selective scan input")
    _require_positive(inputs.delta.data)
    return b, length, e, n


def selective_scan_seq(inputs: SelectiveInputs, A: Tensor, return_states: bool = False):
    """Sequential selective scan, ``h_0 = 0``.

    For every batch row and channel::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
        y_t = <C_t, h_t> + D * x_t

    Returns ``[B, L, E]``. Gradients flow to delta, B_in, C_in, x, D_skip and A.
    With ``return_states`` the ``[B, L, E, N]`` hidden states are returned too,
    as a plain array.
    """
    b, length, e, n = _validate(inputs, A)
    dtype = T.DTYPE
    delta, x = inputs.delta.data, inputs.x.data
    b_in, c_in, a = inputs.B_in.data, inputs.C_in.data, A.data
    dskip = inputs.D_skip.data if inputs.D_skip is not None else np.zeros(e, dtype=dtype)
    hs = np.empty((b, length, e, n), dtype=dtype)
    y = np.empty((b, length, e), dtype=dtype)
    a_bar = np.exp(delta[..., None] * a)
    scan_forward(delta, a_bar, b_in, c_in, x, dskip, hs, y)

    def _bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        g_delta = np.empty_like(delta)
        g_x = np.empty_like(x)
        g_b = np.zeros_like(b_in)
        g_c = np.zeros_like(c_in)
        g_a = np.zeros(a.shape, dtype=np.float64)
        g_d = np.zeros(e, dtype=np.float64)
        scan_backward(g, delta, a, a_bar, b_in, c_in, x, dskip, hs, g_delta, g_a, g_b, g_c, g_x, g_d)
        grads = [g_delta, g_b, g_c, g_x]
        if inputs.D_skip is not None:
            grads.append(g_d.astype(dtype))
        grads.append(g_a.astype(dtype))
        return tuple(grads)

    parents = [inputs.delta, inputs.B_in, inputs.C_in, inputs.x]
    if inputs.D_skip is not None:
        parents.append(inputs.D_skip)
    parents.append(A)
    out = T.make_node(y, parents, _bw, "selective_scan")
    return (out, hs) if return_states else out


def ssm_kernel_conv(A_bar, B_bar, C, x) -> Tensor:
    """Time-invariant SSM evaluated as a causal convolution with ``K_j = C A_bar^j B_bar``.

    ``A_bar``/``B_bar`` are ``[E, N]`` with ``x`` of shape ``[L, E]``, or
    ``[N]`` with ``x`` of shape ``[L]`` for a single channel. ``C`` is ``[N]``.
    The kernel and the convolution are accumulated in float64.
    """
    a = np.asarray(getattr(A_bar, "data", A_bar), dtype=np.float64)
    bb = np.asarray(getattr(B_bar, "data", B_bar), dtype=np.float64)
    c = np.asarray(getattr(C, "data", C), dtype=np.float64)
    xs = np.asarray(getattr(x, "data", x), dtype=np.float64)
    single = a.ndim == 1
    if single:
        a, bb, xs = a[None], bb[None], xs[:, None]
    if a.shape != bb.shape or a.shape[1] != c.shape[0] or xs.ndim != 2 or xs.shape[1] != a.shape[0]:
        raise ShapeError(f"ssm_kernel_conv shapes: A_bar {a.shape}, B_bar {bb.shape}, C {c.shape}, x {xs.shape}")
    length = xs.shape[0]
    if length <= 0:
        raise UsageError("ssm_kernel_conv needs a non-empty input sequence")
    powers = a[None] ** np.arange(length)[:, None, None]  # [L, E, N]
    kernel = (powers * bb[None] * c).sum(-1)  # [L, E]
    y = np.zeros_like(xs)
    for j in range(length):
        y[j:] += kernel[j] * xs[: length - j]
    return Tensor(y[:, 0] if single else y)


def selective_scan_bidirectional(inputs_fwd: SelectiveInputs, inputs_bwd: SelectiveInputs,
                                 A_fwd: Tensor, A_bwd: Tensor) -> tuple[Tensor, Tensor]:
    """Forward scan plus a scan over already-reversed operands.

    ``inputs_bwd`` must be laid out in reversed time order (its step 0 is the
    last position of the utterance). The backward result is flipped back so
    both outputs are aligned with the original sequence.
    """
    y_fwd = selective_scan_seq(inputs_fwd, A_fwd)
    y_bwd = T.reverse_seq(selective_scan_seq(inputs_bwd, A_bwd))
    return y_fwd, y_bwd
