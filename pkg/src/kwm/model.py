"""KWM classifier: MFCC patches -> class-token sequence -> BiMamba encoder -> head."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .bimamba import DirectionalityMode, bimamba_forward, block_param_shapes, make_block
from .config import dump_kv, from_kv, parse_kv, to_kv
from .errors import ConfigError, DataError, FormatError, ShapeError
from .tensor import Parameter, Tensor

VARIANTS = ("KWM", "KWM-T")
TOKEN_POSITIONS = ("mid", "head", "end")
EMBED_INIT_STD = 0.02
CKPT_MAGIC = b"KWMCKPT1"


@dataclass
class ModelConfig:
    dim: int = 192
    layers: int = 12
    variant: str = "KWM"
    mode: DirectionalityMode = DirectionalityMode.BI_BI
    num_classes: int = 12
    n_mfcc: int = 40
    n_frames: int = 98
    patch: tuple[int, ...] = (40, 1)
    ffn_dim: int | None = None  # KWM-T only; defaults to 2 * dim
    class_token_pos: str = "mid"
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dt_rank: int | None = None  # defaults to ceil(dim / 16)
    use_d_skip: bool = True
    fo_bi_conv: str = "shared"
    double_residual: bool = False
    seed: int = 0

    def __post_init__(self):
        self.mode = DirectionalityMode.parse(self.mode)
        self.variant = self.variant.upper()
        self.class_token_pos = self.class_token_pos.lower()
        self.patch = tuple(int(v) for v in self.patch)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.class_token_pos not in TOKEN_POSITIONS:
            raise ConfigError(f"class_token_pos must be one of {TOKEN_POSITIONS}, got {self.class_token_pos!r}")
        if self.dim <= 0 or self.layers < 0 or self.num_classes <= 0:
            raise ConfigError(f"dim, layers and num_classes must be positive (got {self.dim}, {self.layers}, "
                              f"{self.num_classes})")
        if len(self.patch) != 2 or min(self.patch) <= 0:
            raise ConfigError(f"patch must be two positive sizes (f, t), got {self.patch}")
        f, t = self.patch
        if self.n_mfcc % f or self.n_frames % t:
            raise ConfigError(f"patch {self.patch} does not tile a {self.n_mfcc}x{self.n_frames} MFCC matrix")

    @property
    def num_patches(self) -> int:
        f, t = self.patch
        return (self.n_mfcc // f) * (self.n_frames // t)

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def token_index(self) -> int:
        return {"mid": self.num_patches // 2, "head": 0, "end": self.num_patches}[self.class_token_pos]

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.dim

    def block_kwargs(self) -> dict:
        return dict(d_state=self.d_state, d_conv=self.d_conv, expand=self.expand, dt_rank=self.dt_rank,
                    use_d_skip=self.use_d_skip)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in construction (and checkpoint) order."""
    d = cfg.dim
    f, t = cfg.patch
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (f * t, d),
        "cls_token": (1, d),
        "pos_embed": (cfg.seq_len, d),
    }
    for i in range(cfg.layers):
        for name, shape in block_param_shapes(d, cfg.mode, **cfg.block_kwargs()).items():
            shapes[f"layers.{i}.mixer.{name}"] = shape
        if cfg.variant == "KWM-T":
            shapes[f"layers.{i}.ffn_norm.gain"] = (d,)
            shapes[f"layers.{i}.ffn_norm.bias"] = (d,)
            shapes[f"layers.{i}.ffn.fc1.weight"] = (d, cfg.ffn_width)
            shapes[f"layers.{i}.ffn.fc1.bias"] = (cfg.ffn_width,)
            shapes[f"layers.{i}.ffn.fc2.weight"] = (cfg.ffn_width, d)
            shapes[f"layers.{i}.ffn.fc2.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Exact number of trainable scalars, without allocating the model."""
    return sum(math.prod(s) for s in param_shapes(cfg).values())


@dataclass
class FeedForward:
    norm_gain: Parameter
    norm_bias: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.norm_gain, self.norm_bias, self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        """``Linear2(GELU(Linear1(Norm(x)))) + x``."""
        h = T.layer_norm(x, self.norm_gain, self.norm_bias)
        h = T.gelu(T.add(T.matmul(h, self.w1), self.b1))
        return T.add(T.add(T.matmul(h, self.w2), self.b2), x)


def _make_ffn(cfg: ModelConfig, prefix: str, rng: np.random.Generator) -> FeedForward:
    d, df = cfg.dim, cfg.ffn_width
    b1, b2 = 1 / math.sqrt(d), 1 / math.sqrt(df)
    return FeedForward(
        Parameter(np.ones(d), prefix + "ffn_norm.gain"), Parameter(np.zeros(d), prefix + "ffn_norm.bias"),
        Parameter(rng.uniform(-b1, b1, (d, df)), prefix + "ffn.fc1.weight"),
        Parameter(np.zeros(df), prefix + "ffn.fc1.bias"),
        Parameter(rng.uniform(-b2, b2, (df, d)), prefix + "ffn.fc2.weight"),
        Parameter(np.zeros(d), prefix + "ffn.fc2.bias"),
    )


class KwmModel:
    """The full classifier. Call it on an ``[B, F, T]`` MFCC batch to get ``[B, C]`` logits."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        seeds = np.random.SeedSequence(cfg.seed).spawn(2 * cfg.layers + 1)
        rng = np.random.default_rng(seeds[0])
        d, (f, t) = cfg.dim, cfg.patch
        bound = 1 / math.sqrt(f * t)
        self.w_patch = Parameter(rng.uniform(-bound, bound, (f * t, d)), "patch.weight")
        self.cls_token = Parameter(rng.normal(0, EMBED_INIT_STD, (1, d)), "cls_token")
        self.pos_embed = Parameter(rng.normal(0, EMBED_INIT_STD, (cfg.seq_len, d)), "pos_embed")
        self.blocks = []
        self.ffns: list[FeedForward] = []
        for i in range(cfg.layers):
            prefix = f"layers.{i}."
            self.blocks.append(make_block(d, cfg.mode, seeds[1 + 2 * i], fo_bi_conv=cfg.fo_bi_conv,
                                          prefix=prefix + "mixer.", **cfg.block_kwargs()))
            if cfg.variant == "KWM-T":
                self.ffns.append(_make_ffn(cfg, prefix, np.random.default_rng(seeds[2 + 2 * i])))
        self.final_gain = Parameter(np.ones(d), "final_norm.gain")
        self.final_bias = Parameter(np.zeros(d), "final_norm.bias")
        self.w_head = Parameter(rng.normal(0, EMBED_INIT_STD, (d, cfg.num_classes)), "head.weight")
        self.b_head = Parameter(np.zeros(cfg.num_classes), "head.bias")

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = [self.w_patch, self.cls_token, self.pos_embed]
        for i, block in enumerate(self.blocks):
            params += block.parameters()
            if self.ffns:
                params += self.ffns[i].parameters()
        params += [self.final_gain, self.final_bias, self.w_head, self.b_head]
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=T.DTYPE)

    # -- forward ------------------------------------------------------------

    def patchify(self, mfcc: Tensor) -> Tensor:
        """``[B, F, T] -> [B, N_p, f*t]``; patches in time-major order, each flattened frequency-major."""
        cfg = self.cfg
        b = mfcc.shape[0]
        f, t = cfg.patch
        nf, nt = cfg.n_mfcc // f, cfg.n_frames // t
        x = T.reshape(mfcc, (b, nf, f, nt, t))
        x = T.transpose(x, (0, 3, 1, 2, 4))
        return T.reshape(x, (b, nt * nf, f * t))

    def embed(self, mfcc) -> Tensor:
        """Project patches, splice in the class token, add positional embeddings.

        Accepts ``[F, T]`` (returns ``[N_p + 1, D]``) or ``[B, F, T]``.
        """
        mfcc = T.as_tensor(mfcc)
        cfg = self.cfg
        single = mfcc.ndim == 2
        if single:
            mfcc = T.reshape(mfcc, (1, *mfcc.shape))
        if mfcc.shape[1:] != (cfg.n_mfcc, cfg.n_frames):
            raise DataError(f"expected MFCC of shape ({cfg.n_mfcc}, {cfg.n_frames}), got {mfcc.shape[1:]}")
        b = mfcc.shape[0]
        tokens = T.matmul(self.patchify(mfcc), self.w_patch)
        cls = T.broadcast_to(T.reshape(self.cls_token, (1, 1, cfg.dim)), (b, 1, cfg.dim))
        k, n = cfg.token_index, cfg.num_patches
        parts = []
        if k > 0:
            parts.append(T.slice(tokens, 1, 0, k))
        parts.append(cls)
        if k < n:
            parts.append(T.slice(tokens, 1, k, n))
        x = T.add(T.concat(parts, axis=1), self.pos_embed)
        return T.reshape(x, x.shape[1:]) if single else x

    def encoder_forward(self, x: Tensor) -> Tensor:
        for i, block in enumerate(self.blocks):
            y = bimamba_forward(block, x)
            if self.cfg.double_residual:
                y = T.add(y, x)
            x = self.ffns[i](y) if self.ffns else y
        return x

    def features(self, mfcc_batch) -> Tensor:
        """Normalised class-token state, ``[B, D]``."""
        x = self.encoder_forward(self.embed(mfcc_batch))
        k = self.cfg.token_index
        tok = T.reshape(T.slice(x, 1, k, k + 1), (x.shape[0], self.cfg.dim))
        return T.layer_norm(tok, self.final_gain, self.final_bias)

    def classify(self, mfcc_batch) -> Tensor:
        return T.add(T.matmul(self.features(mfcc_batch), self.w_head), self.b_head)

    __call__ = classify


# ----------------------------------------------------------------------------
# checkpoint file
#
#   magic "KWMCKPT1"
#   u32 LE byte length + UTF-8 config text (``key = value`` lines)
#   u32 LE byte length + UTF-8 manifest, one line per tensor: name<TAB>f32<TAB>d0,d1,...
#   raw little-endian float32 payloads, manifest order


def save_checkpoint(path, model: KwmModel, extra: dict | None = None) -> None:
    config = dict(to_kv(model.cfg, "model"))
    config.update(extra or {})
    cfg_bytes = dump_kv(config).encode()
    params = model.parameters()
    manifest = "".join(f"{p.name}\tf32\t{','.join(map(str, p.shape))}\n" for p in params).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(cfg_bytes)) + cfg_bytes)
        fh.write(struct.pack("<I", len(manifest)) + manifest)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Decode a checkpoint into ``(config key-values, name -> array)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}", 0)
    pos = 8

    def chunk(what: str) -> bytes:
        nonlocal pos
        if pos + 4 > len(blob):
            raise FormatError(f"{path}: truncated before {what} length", pos)
        (n,) = struct.unpack_from("<I", blob, pos)
        if pos + 4 + n > len(blob):
            raise FormatError(f"{path}: truncated {what}", pos)
        data = blob[pos + 4:pos + 4 + n]
        pos += 4 + n
        return data

    try:
        kv = parse_kv(chunk("config").decode())
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config block is not UTF-8", 8) from exc
    manifest_at = pos + 4
    entries = []
    try:
        for line in chunk("manifest").decode().splitlines():
            name, dtype, dims = line.split("\t")
            if dtype != "f32":
                raise FormatError(f"{path}: tensor {name} has unsupported dtype {dtype}", manifest_at)
            entries.append((name, tuple(int(v) for v in dims.split(",") if v)))
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed manifest ({exc})", manifest_at) from exc
    tensors = {}
    for name, shape in entries:
        nbytes = 4 * math.prod(shape)
        if pos + nbytes > len(blob):
            raise FormatError(f"{path}: payload for {name} truncated", pos)
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=math.prod(shape), offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes", pos)
    return kv, tensors


def load_checkpoint(path) -> tuple[KwmModel, dict[str, str]]:
    kv, tensors = read_checkpoint(path)
    cfg = from_kv(ModelConfig, kv, "model")
    model = KwmModel(cfg)
    expected = param_shapes(cfg)
    if list(tensors) != list(expected):
        raise ConfigError(f"{path}: checkpoint tensor names do not match the configured model")
    model.load_state_dict(tensors)
    return model, kv
