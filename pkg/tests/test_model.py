import math

import numpy as np
import pytest

from tfdiag.errors import ConfigError, DimensionError, ParseError
from tfdiag.layers import conv1d
from tfdiag.model import (FAREL, MSCAL, TFFN, Distill, FEMCFormer, GenericCNN, ModelConfig, build_variant,
                          dump_attention, gamma_sweep, load_checkpoint, read_checkpoint, save_checkpoint,
                          shape_chain)
from tfdiag.tensor import Tensor

TABLE1 = [
    ("embedding", (32, 2048)),
    ("distill1", (32, 496)), ("block1", (32, 496)),
    ("distill2", (64, 247)), ("block2", (64, 247)),
    ("distill3", (128, 123)), ("block3", (128, 123)),
    ("distill4", (256, 61)), ("block4", (256, 61)),
    ("flatten", (15616,)), ("hidden", (256,)), ("logits", (4,)),
]


def small_cfg(**kw):
    base = dict(input_length=64, embed_channels=2, embed_kernel=5, num_blocks=2, distill_kernel=8,
                classifier_hidden=6, num_classes=3, seed=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def full_model():
    return FEMCFormer(ModelConfig())


def test_shape_chain_matches_layer_table():
    assert shape_chain(ModelConfig()) == TABLE1


def test_forward_trace_matches_layer_table(full_model):
    trace = {}
    x = np.random.default_rng(0).random((1, 1, 2048))
    logits = full_model(Tensor(x), trace)
    assert logits.shape == (1, 4)
    for name, shape in TABLE1:
        assert trace[name].shape == (1,) + shape, name


def test_first_distill_conv_output_length(full_model):
    x = Tensor(np.zeros((1, 32, 2048)))
    assert full_model.distills[0].conv(x).shape == (1, 32, 993)


def test_input_shape_is_checked():
    m = FEMCFormer(small_cfg())
    with pytest.raises(DimensionError, match="expected input"):
        m(Tensor(np.zeros((1, 1, 63))))
    with pytest.raises(DimensionError):
        m(Tensor(np.zeros((1, 64))))


def test_too_short_input_for_depth():
    with pytest.raises(DimensionError):
        shape_chain(ModelConfig(input_length=32, distill_kernel=8, num_blocks=6))


@pytest.mark.parametrize("kw", [dict(ablation="bogus"), dict(softmax_axis="rows"), dict(gamma=-0.1),
                                dict(num_blocks=0), dict(embed_kernel=64), dict(branch_kernels=(3, 4))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_ablation_names_accept_dashes():
    assert ModelConfig(ablation="non-farel").ablation == "non_farel"


# --- initialization identities -------------------------------------------------

def test_farel_identity_at_init():
    cfg = small_cfg()
    m = FAREL(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 64)))
    conv = conv1d(x, m.conv.weight, m.conv.bias, padding=2).data
    assert np.max(np.abs(m(x).data - 1.1 * conv)) < 1e-9


def test_tffn_identity_at_init():
    cfg = small_cfg()
    m = TFFN(3, 16, cfg, np.random.default_rng(2))
    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 16)))
    trace = {}
    out = m(x, trace).data
    sq = m.squeeze.weight.data[:, :, 0]
    expected = x.data + np.einsum("oi,bil->bol", sq, 0.1 * trace["xdot"])
    assert np.max(np.abs(out - expected)) < 1e-9


def test_tffn_gamma_zero_is_identity():
    m = TFFN(3, 16, small_cfg(gamma=0.0), np.random.default_rng(4))
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 16)))
    assert np.array_equal(m(x).data, x.data)


def test_full_model_gamma_zero_equals_plain_embedding():
    x = Tensor(np.random.default_rng(6).random((3, 1, 64)))
    full = FEMCFormer(small_cfg(gamma=0.0))
    plain = FEMCFormer(small_cfg(gamma=0.0, ablation="non_farel"))
    assert np.max(np.abs(full(x).data - plain(x).data)) < 1e-12


def test_spectral_weights_start_as_identity():
    m = FEMCFormer(small_cfg())
    names = [n for n, _ in m.named_parameters() if ".filter." in n]
    assert names
    for n, p in m.named_parameters():
        if n.endswith("filter.re"):
            assert np.all(p.data == 1.0)
        elif n.endswith("filter.im"):
            assert np.all(p.data == 0.0)


# --- MSCAL -----------------------------------------------------------------------

def _gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def test_mscal_hand_computed_uniform_attention():
    cfg = ModelConfig(input_length=4, embed_channels=1)
    m = MSCAL(1, cfg, np.random.default_rng(0))
    a, c, w0, d, e = 0.7, -0.2, 1.6, 1.3, 0.05
    m.proj_in.weight.data[:] = a
    m.proj_in.bias.data[:] = c
    for br in m.branches:
        br.weight.data[:] = 0.0
        br.bias.data[:] = 0.4
    m.fuse.weight.data[:] = w0
    m.fuse.bias.data[:] = 0.0
    m.proj_out.weight.data[:] = d
    m.proj_out.bias.data[:] = e
    x = [0.5, -1.0, 2.0, 0.25]
    trace = {}
    out = m(Tensor(np.array(x).reshape(1, 1, 4)), trace).data.ravel()
    assert np.allclose(trace["attn"], 0.25, atol=1e-15)
    expected = []
    for xi in x:
        y1 = a * xi + c
        y3 = (w0 / 4) * y1 + y1
        expected.append(d * _gelu(y3) + e + xi)
    assert np.allclose(out, expected, atol=1e-14)


def test_mscal_shape_and_attention_rows():
    m = MSCAL(4, small_cfg(), np.random.default_rng(1))
    trace = {}
    out = m(Tensor(np.random.default_rng(2).standard_normal((2, 4, 30))), trace)
    assert out.shape == (2, 4, 30)
    assert np.max(np.abs(trace["attn"].sum(axis=-1) - 1)) < 1e-12


def test_mscal_channel_softmax_option():
    m = MSCAL(4, small_cfg(softmax_axis="channel"), np.random.default_rng(1))
    trace = {}
    m(Tensor(np.random.default_rng(2).standard_normal((2, 4, 30))), trace)
    assert np.max(np.abs(trace["attn"].sum(axis=1) - 1)) < 1e-12


def test_non_msa_skips_attention():
    m = MSCAL(2, small_cfg(ablation="non_msa"), np.random.default_rng(3))
    x = Tensor(np.random.default_rng(4).standard_normal((1, 2, 8)))
    trace = {}
    out = m(x, trace).data
    assert "attn" not in trace
    y1 = conv1d(x, m.proj_in.weight, m.proj_in.bias).data
    from tfdiag.layers import gelu
    ref = conv1d(gelu(Tensor(y1)), m.proj_out.weight, m.proj_out.bias).data + x.data
    assert np.allclose(out, ref, atol=1e-14)


# --- distillation and variants -------------------------------------------------------

def test_distill_shapes():
    cfg = ModelConfig()
    first = Distill(32, 32, cfg, np.random.default_rng(0), first=True)
    assert first(Tensor(np.zeros((1, 32, 2048)))).shape == (1, 32, 496)
    later = Distill(32, 64, cfg, np.random.default_rng(0), first=False)
    assert later(Tensor(np.zeros((1, 32, 496)))).shape == (1, 64, 247)


def test_ablation_structure():
    count = lambda m, key: sum(p.size for n, p in m.named_parameters() if key in n)  # noqa: E731
    cfg = small_cfg()
    full = build_variant(cfg)
    no_farel = build_variant(cfg, ablation="non_farel")
    no_fft = build_variant(cfg, ablation="non_fft")
    no_msa = build_variant(cfg, ablation="non_msa")
    assert count(no_farel, "embed.filter") == 0 and count(full, "embed.filter") > 0
    assert count(no_fft, "tffn") < count(full, "tffn")
    assert count(no_fft, "embed.filter") == count(full, "embed.filter")
    assert count(no_msa, "branches") == 0 and count(full, "branches") > 0
    for m in (no_farel, no_fft, no_msa):
        assert m(Tensor(np.zeros((2, 1, 64)))).shape == (2, 3)


def test_gamma_sweep_builds_each_gamma():
    models = gamma_sweep(small_cfg(), gammas=(0.1, 0.5))
    assert [m.config.gamma for m in models.values()] == [0.1, 0.5]
    assert models[0.5].embed.gamma == 0.5


def test_same_seed_same_weights():
    a, b = FEMCFormer(small_cfg()), FEMCFormer(small_cfg())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = FEMCFormer(small_cfg(seed=2))
    assert not np.array_equal(a.fc1.weight.data, c.fc1.weight.data)


def test_predict_returns_probabilities():
    m = FEMCFormer(small_cfg())
    p = m.predict(np.random.default_rng(0).random((5, 64)))
    assert p.shape == (5, 3)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert m.training


# --- attention dumps -------------------------------------------------------------------

def test_dump_attention_default_and_errors():
    m = FEMCFormer(small_cfg())
    raw, avg = dump_attention(m, np.random.default_rng(0).random((2, 64)))
    last_len = dict(shape_chain(m.config))["block2"][1]
    assert raw.shape == (2, 4, last_len)
    assert avg.shape == (2, last_len)
    assert np.allclose(avg, raw.mean(axis=1))
    raw0, _ = dump_attention(m, np.zeros((1, 64)), block_index=0, layer_index=1)
    assert raw0.shape[1:] == dict(shape_chain(m.config))["block1"]
    with pytest.raises(ConfigError):
        dump_attention(m, np.zeros((1, 64)), block_index=2)
    with pytest.raises(ConfigError):
        dump_attention(m, np.zeros((1, 64)), layer_index=2)
    with pytest.raises(ConfigError):
        dump_attention(build_variant(small_cfg(), ablation="non_msa"), np.zeros((1, 64)))


# --- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = FEMCFormer(small_cfg(ablation="non_fft", gamma=0.3))
    m.blocks[0].norm1.running_mean[:] = [0.5, -0.5]
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, {"epoch": 7})
    header, state = read_checkpoint(path)
    assert header["meta.epoch"] == 7
    assert header["ablation"] == "non_fft"
    loaded = load_checkpoint(path)
    assert loaded.config == m.config
    for k, v in m.state_dict().items():
        assert np.array_equal(state[k], v)
    x = Tensor(np.random.default_rng(0).random((2, 1, 64)))
    m.eval()
    loaded.eval()
    assert np.array_equal(m(x).data, loaded(x).data)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", FEMCFormer(small_cfg()))
    save_checkpoint(tmp_path / "b", FEMCFormer(small_cfg()))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ParseError):
        read_checkpoint(bad)
    m = FEMCFormer(small_cfg())
    state = m.state_dict()
    state.pop("fc2.bias")
    with pytest.raises(ConfigError, match="missing"):
        FEMCFormer(small_cfg()).load_state_dict(state)
    state = dict(m.state_dict())
    state["fc2.bias"] = np.zeros(7)
    with pytest.raises(DimensionError):
        FEMCFormer(small_cfg()).load_state_dict(state)


# --- spectral filter on a generic CNN -----------------------------------------------------------

def test_generic_cnn_with_and_without_filter():
    x = Tensor(np.random.default_rng(0).random((2, 1, 256)))
    with_f = GenericCNN(256, 3, use_farel=True, gamma=0.0)
    without = GenericCNN(256, 3, use_farel=False)
    assert with_f(x).shape == (2, 3)
    assert np.allclose(with_f(x).data, without(x).data, atol=1e-12)
    extra = {n for n, _ in with_f.named_parameters()} - {n for n, _ in without.named_parameters()}
    assert extra == {"filter.re", "filter.im"}
