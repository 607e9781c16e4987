"""Bidirectional Mamba block: shared in/out projections, one Conv1d + SSM per direction."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .ssm import SelectiveInputs, selective_scan_seq
from .tensor import Parameter, Tensor

DT_MIN, DT_MAX = 1e-3, 1e-1
OUT_INIT_SCALE = 1e-4


class DirectionalityMode(str, Enum):
    """``<conv direction>-<SSM direction>``: Bi-Bi, Fo-Bi (bidirectional SSM only), Fo-Fo."""

    BI_BI = "Bi-Bi"
    FO_BI = "Fo-Bi"
    FO_FO = "Fo-Fo"

    @classmethod
    def parse(cls, value) -> DirectionalityMode:
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for prefix in ("bimamba-", "mamba-"):
            key = key.removeprefix(prefix)
        for mode in cls:
            if mode.value.lower() == key:
                return mode
        raise ConfigError(f"unknown directionality mode {value!r}; expected one of {[m.value for m in cls]}")


FO_BI_CONV_CHOICES = ("shared", "reversed")


@dataclass
class DirectionParams:
    """Parameters private to one scan direction.

    ``conv_w``/``conv_b`` are ``None`` when the direction has no convolution of
    its own (the backward branch in Fo-Bi mode).
    """

    conv_w: Parameter | None
    conv_b: Parameter | None
    w_B: Parameter
    w_C: Parameter
    w_dt_low: Parameter
    w_dt_up: Parameter
    dt_bias: Parameter
    A_log: Parameter  # A = -exp(A_log) keeps every pole negative
    D: Parameter | None

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None]

    @property
    def A(self) -> Tensor:
        return T.neg(T.exp(self.A_log))


@dataclass
class BiMambaBlock:
    norm_gain: Parameter
    norm_bias: Parameter
    w_x: Parameter
    w_z: Parameter
    fwd: DirectionParams
    bwd: DirectionParams | None
    w_out: Parameter
    mode: DirectionalityMode
    fo_bi_conv: str = "shared"

    def __post_init__(self):
        if self.mode is DirectionalityMode.FO_FO and self.bwd is not None:
            raise ConfigError("Fo-Fo block must not carry a backward parameter set")
        if self.mode is not DirectionalityMode.FO_FO and self.bwd is None:
            raise ConfigError(f"{self.mode.value} block needs a backward parameter set")
        if self.mode is DirectionalityMode.BI_BI and self.bwd.conv_w is None:
            raise ConfigError("Bi-Bi block needs a backward Conv1d")
        if self.fo_bi_conv not in FO_BI_CONV_CHOICES:
            raise ConfigError(f"fo_bi_conv must be one of {FO_BI_CONV_CHOICES}, got {self.fo_bi_conv!r}")

    def parameters(self) -> list[Parameter]:
        params = [self.norm_gain, self.norm_bias, self.w_x, self.w_z, *self.fwd.parameters()]
        if self.bwd is not None:
            params += self.bwd.parameters()
        params.append(self.w_out)
        return params

    @property
    def dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def expanded(self) -> int:
        return self.w_x.shape[1]


def block_param_shapes(dim: int, mode, d_state: int = 16, d_conv: int = 4, expand: int = 2,
                       dt_rank: int | None = None, use_d_skip: bool = True) -> dict[str, tuple[int, ...]]:
    """Ordered ``name -> shape`` table for one block; the single source for init and counting."""
    if dim <= 0:
        raise ConfigError(f"model dim must be positive, got {dim}")
    if d_state <= 0 or d_conv <= 0 or expand <= 0:
        raise ConfigError(f"d_state, d_conv and expand must be positive, got {d_state}, {d_conv}, {expand}")
    mode = DirectionalityMode.parse(mode)
    e = expand * dim
    r = dt_rank if dt_rank is not None else math.ceil(dim / 16)
    shapes: dict[str, tuple[int, ...]] = {
        "norm.gain": (dim,), "norm.bias": (dim,), "in_x.weight": (dim, e), "in_z.weight": (dim, e),
    }
    directions = ["fwd"] if mode is DirectionalityMode.FO_FO else ["fwd", "bwd"]
    for d in directions:
        if not (d == "bwd" and mode is DirectionalityMode.FO_BI):
            shapes[f"{d}.conv.weight"] = (e, d_conv)
            shapes[f"{d}.conv.bias"] = (e,)
        shapes[f"{d}.B.weight"] = (e, d_state)
        shapes[f"{d}.C.weight"] = (e, d_state)
        shapes[f"{d}.dt_low.weight"] = (e, r)
        shapes[f"{d}.dt_up.weight"] = (r, e)
        shapes[f"{d}.dt_up.bias"] = (e,)
        shapes[f"{d}.A_log"] = (e, d_state)
        if use_d_skip:
            shapes[f"{d}.D"] = (e,)
    shapes["out.weight"] = (e, dim)
    return shapes


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    role = name.split(".", 1)[-1] if name.startswith(("fwd.", "bwd.")) else name
    if role == "norm.gain" or role == "D":
        return np.ones(shape)
    if role in ("norm.bias", "conv.bias"):
        return np.zeros(shape)
    if role == "A_log":
        return np.broadcast_to(np.log(np.arange(1, shape[1] + 1)), shape)
    if role == "dt_up.bias":
        dt = np.geomspace(DT_MIN, DT_MAX, shape[0])
        return dt + np.log(-np.expm1(-dt))  # inverse softplus
    if role == "out.weight":
        return rng.uniform(-OUT_INIT_SCALE, OUT_INIT_SCALE, shape)
    fan_in = shape[1] if role == "conv.weight" else shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def make_block(dim: int, mode=DirectionalityMode.BI_BI, seed=0, *, d_state: int = 16, d_conv: int = 4,
               expand: int = 2, dt_rank: int | None = None, use_d_skip: bool = True,
               fo_bi_conv: str = "shared", prefix: str = "") -> BiMambaBlock:
    """Build a deterministically initialised block.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    Parameter names are ``prefix + <role>``, e.g. ``layers.0.mixer.fwd.conv.weight``.
    """
    mode = DirectionalityMode.parse(mode)
    shapes = block_param_shapes(dim, mode, d_state, d_conv, expand, dt_rank, use_d_skip)
    rng = np.random.default_rng(seed)
    p = {name: Parameter(_init_value(name, shape, rng), prefix + name) for name, shape in shapes.items()}

    def direction(d: str) -> DirectionParams | None:
        if f"{d}.B.weight" not in p:
            return None
        return DirectionParams(
            conv_w=p.get(f"{d}.conv.weight"), conv_b=p.get(f"{d}.conv.bias"),
            w_B=p[f"{d}.B.weight"], w_C=p[f"{d}.C.weight"],
            w_dt_low=p[f"{d}.dt_low.weight"], w_dt_up=p[f"{d}.dt_up.weight"], dt_bias=p[f"{d}.dt_up.bias"],
            A_log=p[f"{d}.A_log"], D=p.get(f"{d}.D"),
        )

    return BiMambaBlock(
        norm_gain=p["norm.gain"], norm_bias=p["norm.bias"], w_x=p["in_x.weight"], w_z=p["in_z.weight"],
        fwd=direction("fwd"), bwd=direction("bwd"), w_out=p["out.weight"], mode=mode, fo_bi_conv=fo_bi_conv,
    )


def _conv_silu(x: Tensor, conv_w: Parameter, conv_b: Parameter) -> Tensor:
    """``SiLU(Conv1d(x))`` on ``[B, L, E]`` activations."""
    y = T.conv1d_depthwise(T.transpose(x, (0, 2, 1)), conv_w, conv_b)
    return T.silu(T.transpose(y, (0, 2, 1)))


def _scan_branch(xp: Tensor, d: DirectionParams) -> Tensor:
    """Selection projections plus the scan for one direction, in that direction's time order."""
    b_in = T.matmul(xp, d.w_B)
    c_in = T.matmul(xp, d.w_C)
    delta = T.softplus(T.add(T.matmul(T.matmul(xp, d.w_dt_low), d.w_dt_up), d.dt_bias))
    return selective_scan_seq(SelectiveInputs(delta, b_in, c_in, xp, d.D), d.A)


def direction_outputs(block: BiMambaBlock, X_prev: Tensor) -> tuple[Tensor, Tensor | None, Tensor]:
    """Return ``(y_forward, y_backward or None, z)``; both scan outputs in original time order."""
    if X_prev.ndim != 3 or X_prev.shape[-1] != block.dim:
        raise ConfigError(f"block expects [B, L, {block.dim}] input, got {X_prev.shape}")
    xn = T.layer_norm(X_prev, block.norm_gain, block.norm_bias)
    x = T.matmul(xn, block.w_x)
    z = T.matmul(xn, block.w_z)
    xp_fwd = _conv_silu(x, block.fwd.conv_w, block.fwd.conv_b)
    y_fwd = _scan_branch(xp_fwd, block.fwd)
    if block.mode is DirectionalityMode.FO_FO:
        return y_fwd, None, z
    if block.mode is DirectionalityMode.BI_BI:
        xp_bwd = _conv_silu(T.reverse_seq(x), block.bwd.conv_w, block.bwd.conv_b)
    elif block.fo_bi_conv == "shared":
        xp_bwd = T.reverse_seq(xp_fwd)
    else:
        xp_bwd = _conv_silu(T.reverse_seq(x), block.fwd.conv_w, block.fwd.conv_b)
    y_bwd = T.reverse_seq(_scan_branch(xp_bwd, block.bwd))
    return y_fwd, y_bwd, z


def bimamba_forward(block: BiMambaBlock, X_prev: Tensor) -> Tensor:
    """One Mamba layer: pre-norm, gated bidirectional scans, output projection, residual."""
    y_fwd, y_bwd, z = direction_outputs(block, X_prev)
    gate = T.silu(z)
    mixed = T.mul(y_fwd, gate)
    if y_bwd is not None:
        mixed = T.add(mixed, T.mul(y_bwd, gate))
    return T.add(T.matmul(mixed, block.w_out), X_prev)
