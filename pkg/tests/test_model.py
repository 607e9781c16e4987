import math
import struct

import numpy as np
import pytest

from kwm.errors import ConfigError, DataError, FormatError, ShapeError
from kwm.model import (
    KwmModel,
    ModelConfig,
    count_params,
    load_checkpoint,
    param_shapes,
    read_checkpoint,
    save_checkpoint,
)
from kwm.tensor import Tensor

from .helpers import GRAD_RTOL, check_grads

TOY = dict(dim=8, layers=2, n_mfcc=8, n_frames=12, patch=(4, 2), num_classes=5)


def randomize(model: KwmModel, rng, scale=0.3) -> None:
    for p in model.parameters():
        if p.name.endswith("A_log"):
            p.data = rng.uniform(-1, 1, p.shape).astype(np.float32)
        else:
            p.data = (rng.normal(size=p.shape) * scale).astype(np.float32)


# -- straight-line reference ----------------------------------------------------

def ref_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_silu(x):
    return x / (1 + np.exp(-x))


def ref_softplus(x):
    return np.log1p(np.exp(x))


def ref_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def ref_direction(x, P, pre, conv_pre=None):
    """Conv, SiLU and selective scan over one sequence ``x[L, E]`` in its own time order."""
    length, e = x.shape
    conv_pre = conv_pre or pre
    w, cb = P[conv_pre + "conv.weight"], P[conv_pre + "conv.bias"]
    k = w.shape[1]
    xc = np.zeros_like(x)
    for t in range(length):
        for j in range(k):
            src = t - (k - 1) + j
            if src >= 0:
                xc[t] += w[:, j] * x[src]
    xp = ref_silu(xc + cb)
    return ref_scan(xp, P, pre), xp


def ref_scan(xp, P, pre):
    length, e = xp.shape
    A = -np.exp(P[pre + "A_log"])
    h = np.zeros_like(A)
    y = np.zeros_like(xp)
    for t in range(length):
        bt = xp[t] @ P[pre + "B.weight"]
        ct = xp[t] @ P[pre + "C.weight"]
        dt = ref_softplus(xp[t] @ P[pre + "dt_low.weight"] @ P[pre + "dt_up.weight"] + P[pre + "dt_up.bias"])
        h = np.exp(dt[:, None] * A) * h + (dt[:, None] * bt[None, :]) * xp[t][:, None]
        y[t] = h @ ct + P[pre + "D"] * xp[t]
    return y


def ref_encoder(model: KwmModel, X):
    P = {k: v.astype(np.float64) for k, v in model.state_dict().items()}
    cfg = model.cfg
    out = []
    for seq in X.astype(np.float64):
        x_l = seq
        for i in range(cfg.layers):
            m = f"layers.{i}.mixer."
            xn = ref_layer_norm(x_l, P[m + "norm.gain"], P[m + "norm.bias"])
            xi, z = xn @ P[m + "in_x.weight"], xn @ P[m + "in_z.weight"]
            y_f, xp_f = ref_direction(xi, P, m + "fwd.")
            mode = cfg.mode.value
            if mode == "Bi-Bi":
                y_b = ref_direction(xi[::-1], P, m + "bwd.")[0][::-1]
            elif mode == "Fo-Bi":
                y_b = ref_scan(xp_f[::-1], P, m + "bwd.")[::-1]
            else:
                y_b = 0.0
            x_l = (y_f * ref_silu(z) + y_b * ref_silu(z)) @ P[m + "out.weight"] + x_l
            if cfg.variant == "KWM-T":
                f = f"layers.{i}."
                hn = ref_layer_norm(x_l, P[f + "ffn_norm.gain"], P[f + "ffn_norm.bias"])
                hh = ref_gelu(hn @ P[f + "ffn.fc1.weight"] + P[f + "ffn.fc1.bias"])
                x_l = hh @ P[f + "ffn.fc2.weight"] + P[f + "ffn.fc2.bias"] + x_l
        out.append(x_l)
    return np.stack(out)


# -- embedding ------------------------------------------------------------------

def test_default_embedding_layout():
    model = KwmModel(ModelConfig(dim=16, layers=0))
    assert model.cfg.token_index == 49
    x = model.embed(np.zeros((40, 98)))
    assert x.shape == (99, 16)


@pytest.mark.parametrize("pos,index", [("mid", 49), ("head", 0), ("end", 98)])
def test_zero_projection_leaves_only_the_class_token(pos, index):
    model = KwmModel(ModelConfig(dim=16, layers=0, class_token_pos=pos))
    model.w_patch.data[:] = 0
    model.pos_embed.data[:] = 0
    x = model.embed(np.random.default_rng(0).normal(size=(40, 98))).data
    np.testing.assert_array_equal(x[index], model.cls_token.data[0])
    np.testing.assert_array_equal(np.delete(x, index, axis=0), 0)


def test_single_frame_change_is_local():
    model = KwmModel(ModelConfig(dim=16, layers=0))
    rng = np.random.default_rng(1)
    a = rng.normal(size=(40, 98))
    b = a.copy()
    b[:, 60] += rng.normal(size=40)
    diff = np.abs(model.embed(a).data - model.embed(b).data).max(axis=1)
    assert np.flatnonzero(diff).tolist() == [61]


def test_rectangular_patch_order():
    # time-major across patches, frequency-major within a patch
    model = KwmModel(ModelConfig(dim=4, layers=0, patch=(20, 2)))
    mfcc = np.arange(40 * 98, dtype=np.float64).reshape(1, 40, 98)
    patches = model.patchify(Tensor(mfcc)).data
    assert patches.shape == (1, 98, 40)
    np.testing.assert_array_equal(patches[0, 0], mfcc[0, :20, 0:2].ravel())
    np.testing.assert_array_equal(patches[0, 1], mfcc[0, 20:, 0:2].ravel())
    np.testing.assert_array_equal(patches[0, 2], mfcc[0, :20, 2:4].ravel())


def test_embed_rejects_wrong_shape():
    model = KwmModel(ModelConfig(dim=8, layers=0))
    with pytest.raises(DataError):
        model.embed(np.zeros((40, 97)))


def test_patch_must_tile_the_input():
    with pytest.raises(ConfigError):
        ModelConfig(patch=(8, 5))
    assert ModelConfig(patch=(4, 7)).num_patches == 140


# -- encoder ----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["KWM", "KWM-T"])
def test_zeroed_outputs_make_the_encoder_an_identity(variant):
    model = KwmModel(ModelConfig(dim=8, layers=3, variant=variant))
    rng = np.random.default_rng(2)
    randomize(model, rng)
    for block in model.blocks:
        block.w_out.data[:] = 0
    for ffn in model.ffns:
        ffn.w2.data[:] = 0
        ffn.b2.data[:] = 0
    x = Tensor(rng.normal(size=(2, 5, 8)))
    np.testing.assert_array_equal(model.encoder_forward(x).data, x.data)


@pytest.mark.parametrize("variant", ["KWM", "KWM-T"])
@pytest.mark.parametrize("mode", ["Bi-Bi", "Fo-Bi", "Fo-Fo"])
def test_encoder_matches_transliteration(variant, mode):
    model = KwmModel(ModelConfig(dim=8, layers=1, variant=variant, mode=mode, seed=3))
    rng = np.random.default_rng(3)
    randomize(model, rng)
    x = rng.normal(size=(2, 5, 8))
    np.testing.assert_allclose(model.encoder_forward(Tensor(x)).data, ref_encoder(model, x), rtol=1e-4, atol=1e-5)


def test_double_residual_adds_the_input_again():
    rng = np.random.default_rng(4)
    single = KwmModel(ModelConfig(dim=8, layers=1))
    double = KwmModel(ModelConfig(dim=8, layers=1, double_residual=True))
    randomize(single, rng)
    double.load_state_dict(single.state_dict())
    x = Tensor(rng.normal(size=(1, 5, 8)))
    np.testing.assert_allclose(double.encoder_forward(x).data, single.encoder_forward(x).data + x.data, rtol=1e-6)


# -- classification ---------------------------------------------------------------

def test_constant_head():
    model = KwmModel(ModelConfig(**TOY))
    model.w_head.data[:] = 0
    model.b_head.data[:] = np.arange(5)
    logits = model(np.random.default_rng(5).normal(size=(3, 8, 12))).data
    np.testing.assert_array_equal(logits, np.broadcast_to(np.arange(5), (3, 5)))


def test_logit_shape_and_determinism():
    cfg = ModelConfig(dim=16, layers=2, num_classes=12)
    mfcc = np.random.default_rng(6).normal(size=(3, 40, 98))
    a = KwmModel(cfg)(mfcc).data
    b = KwmModel(cfg)(mfcc).data
    assert a.shape == (3, 12)
    np.testing.assert_array_equal(a, b)


def test_zero_input_logits_flow_only_through_token_and_positions():
    rng = np.random.default_rng(7)
    model = KwmModel(ModelConfig(**TOY))
    randomize(model, rng)
    model.pos_embed.data[:] = 0
    zeros = np.zeros((1, 8, 12))
    before = model(zeros).data
    model.w_patch.data = rng.normal(size=model.w_patch.shape).astype(np.float32)
    np.testing.assert_array_equal(model(zeros).data, before)


def test_logit_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    for seed in range(3):
        model = KwmModel(ModelConfig(**TOY, seed=seed))
        randomize(model, rng)
        mfcc = Tensor(rng.normal(size=(2, 8, 12)), requires_grad=True)
        assert check_grads(lambda: model(mfcc), [mfcc], rng) < GRAD_RTOL


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    model = KwmModel(ModelConfig(**TOY, variant="KWM-T"))
    randomize(model, rng)
    mfcc = Tensor(rng.normal(size=(2, 8, 12)))
    assert check_grads(lambda: model(mfcc), model.parameters(), rng, coords_per_tensor=6) < GRAD_RTOL


# -- parameter counts -------------------------------------------------------------

@pytest.mark.parametrize("variant", ["KWM", "KWM-T"])
@pytest.mark.parametrize("mode", ["Bi-Bi", "Fo-Bi", "Fo-Fo"])
def test_count_matches_allocation(variant, mode):
    cfg = ModelConfig(dim=24, layers=2, variant=variant, mode=mode)
    model = KwmModel(cfg)
    assert count_params(cfg) == model.num_params()
    assert list(param_shapes(cfg)) == [p.name for p in model.parameters()]


@pytest.mark.parametrize("cfg,target,tol", [
    (dict(dim=192, layers=12, num_classes=35), 3.4e6, 0.02),
    (dict(dim=192, layers=12, num_classes=35, variant="KWM-T"), 5.2e6, 0.02),
    (dict(dim=64, layers=6), 0.2e6, 0.15),
], ids=["KWM-192", "KWM-T-192", "KWM-64-6"])
def test_headline_parameter_counts(cfg, target, tol):
    assert count_params(ModelConfig(**cfg)) == pytest.approx(target, rel=tol)


def test_ffn_cost_per_layer():
    base = ModelConfig(dim=192, layers=12)
    per_layer = (count_params(ModelConfig(dim=192, layers=12, variant="KWM-T")) - count_params(base)) / 12
    assert per_layer == 2 * 192 * 384 + 384 + 192 + 2 * 192
    assert per_layer == pytest.approx(2 * 192 * 384, rel=0.01)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = KwmModel(ModelConfig(**TOY, mode="Fo-Bi", variant="KWM-T"))
    randomize(model, np.random.default_rng(10))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, extra={"train.epochs": 3})
    loaded, kv = load_checkpoint(path)
    assert kv["train.epochs"] == "3"
    assert loaded.cfg == model.cfg
    mfcc = np.random.default_rng(11).normal(size=(2, 8, 12))
    np.testing.assert_array_equal(loaded(mfcc).data, model(mfcc).data)
    assert path.read_bytes()[:8] == b"KWMCKPT1"


def test_checkpoint_format_errors(tmp_path):
    model = KwmModel(ModelConfig(**TOY))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(FormatError) as err:
        read_checkpoint(bad)
    assert err.value.offset == 0

    bad.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="byte offset"):
        read_checkpoint(bad)

    bad.write_bytes(blob + b"\0")
    with pytest.raises(FormatError):
        read_checkpoint(bad)

    (n,) = struct.unpack_from("<I", blob, 8)
    cfg_text = blob[12:12 + n].decode().replace("model.dim = 8", "model.dim = 16").encode()
    bad.write_bytes(blob[:8] + struct.pack("<I", len(cfg_text)) + cfg_text + blob[12 + n:])
    with pytest.raises((ConfigError, ShapeError)):
        load_checkpoint(bad)


def test_checkpoint_rejects_malformed_manifest(tmp_path):
    model = KwmModel(ModelConfig(**{**TOY, "layers": 0}))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    (n,) = struct.unpack_from("<I", blob, 8)
    pos = 12 + n
    (m,) = struct.unpack_from("<I", blob, pos)
    manifest = blob[pos + 4:pos + 4 + m].replace(b"\tf32\t", b" f32 ", 1)
    path.write_bytes(blob[:pos] + struct.pack("<I", len(manifest)) + manifest + blob[pos + 4 + m:])
    with pytest.raises(FormatError) as err:
        read_checkpoint(path)
    assert err.value.offset == pos + 4
