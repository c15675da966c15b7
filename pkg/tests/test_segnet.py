import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctvol.segnet import (
    ASPP,
    ChannelMismatch,
    Conv2d,
    ConvParams,
    DeepLabV3Plus,
    EmptyRates,
    LossProbe,
    ModelConfig,
    NonFiniteLoss,
    NonPositiveOutputSize,
    ResidualBlock,
    SegNetError,
    ShapeMismatch,
    TrainState,
    UpsampleProbe,
    aspp,
    bilinear_upsample,
    build_model,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    load_checkpoint,
    loss,
    loss_terms,
    model_forward,
    residual_block,
    save_checkpoint,
    tiny_config,
    train_step,
)
from ctvol.segnet.checkpoint import blob_path, pack, unpack
from ctvol.segnet.layers import conv_output_size


def direct_conv(x, w, b, stride, dilation, padding):
    """Loop-sum oracle for a single-sample dilated cross-correlation."""
    c_in, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    rows = [r for r in range(0, h + 2 * padding) if r + dilation * (k - 1) < h + 2 * padding][::stride]
    cols = [c for c in range(0, wd + 2 * padding) if c + dilation * (k - 1) < wd + 2 * padding][::stride]
    out = np.zeros((co, len(rows), len(cols)))
    for o in range(co):
        for a, r in enumerate(rows):
            for bb, c in enumerate(cols):
                s = b[o]
                for ci in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            s += w[o, ci, i, j] * xp[ci, r + i * dilation, c + j * dilation]
                out[o, a, bb] = s
    return out


def random_conv(rng, c_in, c_out, k, stride=1, dilation=1, padding=0):
    return ConvParams(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out), stride, dilation, padding)


# -- convolution -------------------------------------------------------------

def test_conv_all_ones():
    p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 1, 1)
    out = conv2d_forward(np.ones((1, 1, 3, 3)), p)[0, 0]
    assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    p = ConvParams(np.eye(3)[:, :, None, None], np.zeros(3))
    assert np.array_equal(conv2d_forward(x, p), x)
    g = np.random.default_rng(1).normal(size=x.shape)
    dx, _, _ = conv2d_backward(x, p, g)
    assert np.array_equal(dx, g)


def test_conv_size_dilated_same():
    assert conv_output_size(32, 3, 1, 2, 2) == 32
    # enumerate window positions that fit inside the padded input
    assert sum(1 for r in range(32 + 4) if r + 2 * 2 < 32 + 4) == 32
    x = np.zeros((1, 1, 32, 32))
    assert conv2d_forward(x, ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1), 1, 2, 2)).shape == (1, 1, 32, 32)


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (2, 1, 1), (1, 2, 2), (2, 3, 1), (3, 1, 0)])
def test_conv_matches_loop_oracle(stride, dilation, padding):
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.normal(size=(1, 2, 7, 6))
    p = random_conv(rng, 2, 3, 3, stride, dilation, padding)
    got = conv2d_forward(x, p)[0]
    want = direct_conv(x[0], p.weights, p.bias, stride, dilation, padding)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_errors():
    p = ConvParams(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ChannelMismatch):
        conv2d_forward(np.zeros((1, 3, 5, 5)), p)
    with pytest.raises(NonPositiveOutputSize):
        conv2d_forward(np.zeros((1, 2, 2, 2)), p)
    with pytest.raises(ShapeMismatch):
        conv2d_backward(np.zeros((1, 2, 5, 5)), p, np.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeMismatch):
        ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))


def test_conv_backward_zero_and_bias():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 5, 5))
    p = random_conv(rng, 2, 3, 3, padding=1)
    dx, dw, db = conv2d_backward(x, p, np.zeros((2, 3, 5, 5)))
    assert not dx.any() and not dw.any() and not db.any()
    g = rng.normal(size=(2, 3, 5, 5))
    _, _, db = conv2d_backward(x, p, g)
    np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3)))


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.sampled_from([1, 3, 5]), s=st.integers(1, 3),
       d=st.integers(1, 3), p=st.integers(0, 4), ci=st.integers(1, 3), co=st.integers(1, 3))
def test_conv_shape_algebra(h, w, k, s, d, p, ci, co):
    hp = sum(1 for r in range(h + 2 * p) if r + d * (k - 1) < h + 2 * p and r % s == 0)
    wp = sum(1 for c in range(w + 2 * p) if c + d * (k - 1) < w + 2 * p and c % s == 0)
    params = ConvParams(np.ones((co, ci, k, k)), np.zeros(co), s, d, p)
    x = np.ones((2, ci, h, w))
    if hp < 1 or wp < 1:
        with pytest.raises(NonPositiveOutputSize):
            conv2d_forward(x, params)
    else:
        assert conv2d_forward(x, params).shape == (2, co, hp, wp)
        assert (conv_output_size(h, k, s, d, p), conv_output_size(w, k, s, d, p)) == (hp, wp)


# -- residual block ----------------------------------------------------------

def test_residual_zero_branch_is_relu():
    block = ResidualBlock("b", 4, 4, 1)
    x = np.random.default_rng(3).normal(size=(2, 4, 6, 6))
    assert np.array_equal(residual_block(x, block), np.maximum(x, 0))


def test_residual_stride_shape():
    block = ResidualBlock("b", 4, 8, 2)
    assert residual_block(np.zeros((1, 4, 8, 8)), block).shape == (1, 8, 4, 4)
    assert block.proj is not None


# -- ASPP --------------------------------------------------------------------

@pytest.mark.parametrize("hw", [(4, 4), (8, 6), (5, 7)])
def test_aspp_preserves_spatial(hw):
    m = ASPP("a", 3, 4, (1, 2, 3))
    rng = np.random.default_rng(0)
    for name, arr in m.parameters().items():
        arr[...] = rng.normal(size=arr.shape)
    assert aspp(np.random.default_rng(1).normal(size=(2, 3) + hw), (1, 2, 3), m).shape == (2, 4) + hw


def test_aspp_constant_interior():
    m = ASPP("a", 2, 4, (1, 2))
    rng = np.random.default_rng(5)
    for name, arr in m.parameters().items():
        if name.endswith(".weight"):
            arr[...] = rng.uniform(0.1, 1.0, size=arr.shape)
        elif name.endswith(".beta"):
            arr[...] = rng.normal(size=arr.shape)
    # the rate-2 taps of pixels at least 2 away from the border never read padding
    x = np.full((1, 2, 11, 11), 0.7)
    y = aspp(x, (1, 2), m)
    interior = y[:, :, 2:-2, 2:-2]
    assert np.allclose(interior, interior[:, :, :1, :1], atol=1e-12)


def test_aspp_errors():
    with pytest.raises(EmptyRates):
        ASPP("a", 2, 4, ())
    with pytest.raises(SegNetError):
        ASPP("a", 2, 4, (2, 1))
    m = ASPP("a", 2, 4, (1,))
    with pytest.raises(EmptyRates):
        aspp(np.zeros((1, 2, 4, 4)), [], m)


# -- upsample ----------------------------------------------------------------

def test_upsample_factor_one_and_constant():
    x = np.random.default_rng(0).normal(size=(1, 2, 3, 4))
    assert np.array_equal(bilinear_upsample(x, 1), x)
    assert np.allclose(bilinear_upsample(np.full((1, 1, 3, 2), 2.5), 4), 2.5)


def test_upsample_hand_values():
    x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
    # sample centers (i + 0.5)/2 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
    want = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ])
    np.testing.assert_allclose(bilinear_upsample(x, 2)[0, 0], want, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), f=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_upsample_matches_sampling_formula(h, w, f, seed):
    x = np.random.default_rng(seed).normal(size=(1, 1, h, w))
    out = bilinear_upsample(x, f)[0, 0]
    assert out.shape == (h * f, w * f)

    def coord(i, n):
        s = min(max((i + 0.5) / f - 0.5, 0.0), n - 1)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    for i in range(h * f):
        r0, r1, fr = coord(i, h)
        for j in range(w * f):
            c0, c1, fc = coord(j, w)
            v = ((1 - fr) * ((1 - fc) * x[0, 0, r0, c0] + fc * x[0, 0, r0, c1])
                 + fr * ((1 - fc) * x[0, 0, r1, c0] + fc * x[0, 0, r1, c1]))
            assert abs(out[i, j] - v) < 1e-12


# -- model -------------------------------------------------------------------

def test_model_output_shape_default():
    m = build_model(ModelConfig(), seed=0)
    assert m.forward(np.zeros((2, 1, 32, 32)))[0].shape == (2, 2, 32, 32)


def test_batch_independence():
    m = build_model(tiny_config(), seed=1)
    rng = np.random.default_rng(0)
    a = rng.normal(size=(1, 1, 16, 16))
    b = rng.normal(size=(1, 1, 16, 16))
    one = m.forward(a)[0]
    two = m.forward(np.concatenate([a, b]))[0]
    assert two.shape == (2, 2, 16, 16)
    assert np.max(np.abs(one[0] - two[0])) <= 1e-12


def test_zero_params_give_head_bias():
    cfg = tiny_config()
    m = DeepLabV3Plus(cfg)
    m.head.bias[...] = [0.3, -1.2]
    logits = m.forward(np.random.default_rng(0).normal(size=(2, 1, 8, 8)))[0]
    assert np.all(logits[:, 0] == 0.3) and np.all(logits[:, 1] == -1.2)


def test_model_forward_functional_and_errors():
    cfg = tiny_config()
    m = build_model(cfg, 2)
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8))
    assert np.array_equal(model_forward(cfg, m.parameters(), x), m.forward(x)[0])
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((1, 2, 8, 8)))
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros((1, 1, 6, 8)))
    with pytest.raises(SegNetError):
        tiny_config(aspp_rates=())
    with pytest.raises(SegNetError):
        tiny_config(output_channels=3)


def test_init_is_deterministic_and_finite():
    a = build_model(ModelConfig(), seed=4).parameters()
    b = build_model(ModelConfig(), seed=4).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    out = build_model(ModelConfig(), 4).forward(np.random.default_rng(0).normal(size=(1, 1, 32, 32)))[0]
    assert np.isfinite(out).all()


@settings(max_examples=50, deadline=None)
@given(data=st.data())
def test_model_shape_algebra(data):
    n_stages = data.draw(st.integers(1, 3))
    strides = tuple(data.draw(st.sampled_from([1, 2])) for _ in range(n_stages))
    stem_stride = data.draw(st.sampled_from([1, 2]))
    low = data.draw(st.integers(0, n_stages - 1))
    cfg = ModelConfig(
        stem_width=4, stem_stride=stem_stride,
        stage_widths=tuple(4 * data.draw(st.integers(1, 2)) for _ in range(n_stages)),
        stage_blocks=(1,) * n_stages, stage_strides=strides,
        output_stride=stem_stride * math.prod(strides), low_level_stage=low, low_level_width=4,
        aspp_rates=(1, 2), aspp_width=4, decoder_width=4,
    )
    mult = data.draw(st.integers(1, 3))
    h = cfg.output_stride * mult
    w = cfg.output_stride * data.draw(st.integers(1, 3))
    out = build_model(cfg, 0).forward(np.zeros((1, 1, h, w)))[0]
    assert out.shape == (1, 2, h, w)


# -- loss --------------------------------------------------------------------

def test_loss_at_zero_logits():
    gt = np.zeros((1, 4, 4))
    gt[:, :2] = 1
    terms = loss_terms(np.zeros((1, 2, 4, 4)), gt, gt)
    np.testing.assert_allclose(terms["bce"], math.log(2), rtol=1e-15)
    # p = 0.5 everywhere: dice = (2*4 + 1)/(8 + 8 + 1)
    np.testing.assert_allclose(terms["dice"], 9 / 17)


def test_loss_perfect_limit():
    gt = np.zeros((2, 4, 4))
    gt[:, 1:3, 1:3] = 1
    logits = np.where(np.stack([gt, gt], 1) > 0, 60.0, -60.0)
    assert loss(logits, gt, gt) < 1e-12


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss(np.zeros((1, 2, 4, 4)), np.zeros((1, 4, 5)), np.zeros((1, 4, 5)))


# -- gradient checks ---------------------------------------------------------

def randomize(module, seed):
    rng = np.random.default_rng(seed)
    for arr in module.parameters().values():
        arr[...] = rng.normal(size=arr.shape)
    return module


def test_grad_conv():
    layer = randomize(Conv2d("c", 2, 3, 3, stride=1, dilation=1), 0)
    assert grad_check(layer, (1, 2, 5, 5)) < 1e-6
    layer = randomize(Conv2d("c", 2, 3, 3, stride=2, dilation=2), 1)
    assert grad_check(layer, (1, 2, 7, 7)) < 1e-6


def test_grad_residual():
    assert grad_check(randomize(ResidualBlock("r", 4, 4, 1), 2), (1, 4, 5, 5)) < 1e-5
    assert grad_check(randomize(ResidualBlock("r", 4, 8, 2), 3), (1, 4, 6, 6)) < 1e-5


def test_grad_aspp():
    assert grad_check(randomize(ASPP("a", 4, 4, (1, 2)), 4), (1, 4, 5, 5)) < 1e-5


def test_grad_upsample_and_loss():
    assert grad_check(UpsampleProbe(2), (1, 2, 3, 4)) < 1e-6
    rng = np.random.default_rng(6)
    gt = (rng.uniform(size=(2, 5, 5)) > 0.5).astype(float)
    inf = gt * (rng.uniform(size=(2, 5, 5)) > 0.5)
    assert grad_check(LossProbe(gt, inf), (2, 2, 5, 5)) < 1e-5


def test_grad_check_catches_broken_backward():
    class Broken(Conv2d):
        def backward(self, dy, cache, grads):
            return 1.01 * super().backward(dy, cache, grads)

    assert grad_check(randomize(Broken("c", 2, 2, 3), 0), (1, 2, 4, 4)) > 1e-3


# -- training ----------------------------------------------------------------

def one_sample(size=16, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    lung = (((yy - size / 2) / (size / 3)) ** 2 + ((xx - size / 2) / (size / 4)) ** 2 <= 1).astype(float)
    inf = lung * (((yy - size / 2) ** 2 + (xx - size / 2 - 1) ** 2) <= 4)
    img = 0.2 + 0.5 * lung + 0.3 * inf + 0.02 * rng.normal(size=lung.shape)
    return img[None, None], lung[None], inf[None]


def test_lr_zero_leaves_params():
    state = TrainState(build_model(tiny_config(), 0))
    before = {k: v.copy() for k, v in state.model.parameters().items()}
    value = train_step(state, one_sample(8), 0.0)
    assert math.isfinite(value)
    assert all(np.array_equal(before[k], v) for k, v in state.model.parameters().items())


def test_nonfinite_loss():
    state = TrainState(build_model(tiny_config(), 0))
    img, lung, inf = one_sample(8)
    with pytest.raises(NonFiniteLoss):
        with np.errstate(invalid="ignore"):
            train_step(state, (img * np.nan, lung, inf), 1e-3)


@pytest.mark.slow
def test_overfit_single_sample():
    state = TrainState(build_model(ModelConfig(), 0))
    batch = one_sample(16)
    for _ in range(200):
        value = train_step(state, batch, 1e-2)
    assert value < 0.05


def test_training_is_bitwise_deterministic():
    batch = one_sample(8)
    runs = []
    for _ in range(2):
        state = TrainState(build_model(tiny_config(), 3))
        losses = [train_step(state, batch, 1e-2) for _ in range(5)]
        runs.append((losses, pack(state.model.parameters())[1].tobytes()))
    assert runs[0] == runs[1]


# -- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = build_model(tiny_config(), 7)
    path = tmp_path / "ck" / "model.json"
    save_checkpoint(path, m, step=12, seed=7)
    ck = load_checkpoint(path)
    assert ck.step == 12 and ck.seed == 7 and ck.config == m.cfg
    for k, v in m.parameters().items():
        assert np.array_equal(ck.params[k], v)
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 8))
    assert np.array_equal(ck.model().forward(x)[0], m.forward(x)[0])


def test_checkpoint_manifest_tiles_blob(tmp_path):
    m = build_model(tiny_config(), 0)
    path = tmp_path / "model.json"
    save_checkpoint(path, m, 0, 0)
    doc = json.loads(path.read_text())
    offset = 0
    for entry in doc["parameters"]:
        assert entry["offset"] == offset
        offset += math.prod(entry["shape"])
    assert offset * 8 == blob_path(path).stat().st_size == doc["size"] * 8


def test_checkpoint_corruption(tmp_path):
    m = build_model(tiny_config(), 0)
    path = tmp_path / "model.json"
    save_checkpoint(path, m, 0, 0)
    blob = bytearray(blob_path(path).read_bytes())
    blob[0] ^= 1
    blob_path(path).write_bytes(bytes(blob))
    with pytest.raises(SegNetError):
        load_checkpoint(path)


def test_unpack_rejects_gaps():
    manifest, flat = pack({"a": np.zeros(3), "b": np.zeros((2, 2))})
    manifest[1]["offset"] = 4
    with pytest.raises(SegNetError):
        unpack(manifest, flat)
    with pytest.raises(SegNetError):
        unpack(pack({"a": np.zeros(3)})[0], np.zeros(4))
