import numpy as np
import pytest

from xlst import tensor as T
from xlst.encoder import (
    EncoderConfig,
    cnn_forward,
    desk_preset,
    encode,
    encode_batch,
    init_params,
    pad_batch,
    paper_preset,
    param_schema,
    projector_hidden,
    transformer_forward,
)
from xlst.errors import ConfigError, InputTooShortError

# small enough that finite differences stay fast
TINY = EncoderConfig(
    input_dim=6, cnn_channels=(2,), transformer_blocks=1, attention_dim=8,
    attention_heads=2, ffn_dim=12, projector_hidden_dim=8,
    projector_output_dim=4, dropout=0.0)


@pytest.fixture(autouse=True)
def float64_default():
    with T.default_dtype(64):
        yield


def test_init_deterministic():
    a = init_params(desk_preset(), seed=5)
    b = init_params(desk_preset(), seed=5)
    for name in a.tensors:
        assert np.array_equal(a[name].data, b[name].data)
    c = init_params(desk_preset(), seed=6)
    assert not np.array_equal(a["enc_in.w"].data, c["enc_in.w"].data)


def test_paper_preset_dimensions():
    cfg = paper_preset()
    assert cfg.attention_dim == 512
    assert cfg.ffn_dim == 2048
    assert cfg.projector_hidden_dim == 2048
    assert cfg.projector_output_dim == 256
    assert len(cfg.cnn_channels) == 2
    assert cfg.transformer_blocks == 12
    assert cfg.downsample_factor == 2


def test_desk_preset_parameter_hand_count():
    params = init_params(desk_preset(), seed=0)
    total = sum(p.data.size for p in params.tensors.values())
    # conv block: 4*1*3*3 + 4 + 4*4*3*3 + 4
    cnn = 36 + 4 + 144 + 4
    # input projection: (4*8)x32 + 32
    enc_in = 32 * 32 + 32
    # per transformer block: 2 layer norms, 4 attn mats + biases, ffn
    block = (32 + 32) + 4 * (32 * 32) + 4 * 32 + (32 + 32) \
        + (32 * 64 + 64) + (64 * 32 + 32)
    final_ln = 64
    projector = (32 * 32 + 32) + (32 + 32) + (32 * 16 + 16)
    assert total == cnn + enc_in + 2 * block + final_ln + projector == 20044


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(attention_dim=30, attention_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(transformer_blocks=0)


def test_cnn_halves_time_axis():
    params = init_params(desk_preset(), seed=1)
    rng = np.random.default_rng(0)
    for t, expect in ((16, 8), (17, 8), (2, 1)):
        out = cnn_forward(params, rng.normal(size=(t, 8)))
        assert out.shape == (expect, 4 * 8)


def test_cnn_rejects_single_frame():
    params = init_params(desk_preset(), seed=1)
    with pytest.raises(InputTooShortError):
        cnn_forward(params, np.zeros((1, 8)))


def test_cnn_zero_input_bias_path():
    params = init_params(desk_preset(), seed=2)
    out = cnn_forward(params, np.zeros((16, 8))).data
    assert np.all(np.isfinite(out))
    # zero input is time-invariant, so away from the conv padding boundary
    # every pooled frame must carry the same bias-driven response
    interior = out[1:-1]
    assert np.allclose(interior, interior[0], atol=1e-12)


def test_transformer_output_shape():
    params = init_params(desk_preset(), seed=3)
    h = np.random.default_rng(1).normal(size=(9, 32))
    out = transformer_forward(params, h)
    assert out.shape == (9, 32)


def test_transformer_permutation_equivariant_without_positions():
    cfg = EncoderConfig(
        input_dim=8, cnn_channels=(4,), transformer_blocks=2, attention_dim=32,
        attention_heads=4, ffn_dim=64, projector_hidden_dim=32,
        projector_output_dim=16, positional_encoding=False, dropout=0.0)
    params = init_params(cfg, seed=4)
    rng = np.random.default_rng(2)
    h = rng.normal(size=(10, 32))
    perm = rng.permutation(10)
    out = transformer_forward(params, h).data
    out_perm = transformer_forward(params, h[perm]).data
    assert np.allclose(out_perm, out[perm], atol=1e-9)


def test_transformer_with_positions_not_equivariant():
    params = init_params(desk_preset(), seed=4)
    rng = np.random.default_rng(3)
    h = rng.normal(size=(10, 32))
    perm = rng.permutation(10)
    out = transformer_forward(params, h).data
    out_perm = transformer_forward(params, h[perm]).data
    assert not np.allclose(out_perm, out[perm], atol=1e-6)


def test_eval_mode_deterministic():
    params = init_params(desk_preset(), seed=5)
    x = np.random.default_rng(4).normal(size=(12, 8))
    e1 = encode(params, x).frames.data
    e2 = encode(params, x).frames.data
    assert np.array_equal(e1, e2)


def test_projector_hidden_batchnorm_statistics():
    params = init_params(desk_preset(), seed=6)
    rng = np.random.default_rng(5)
    h = T.Tensor(rng.normal(size=(2, 14, 32)))
    hidden = projector_hidden(params, h, train_mode=True, update_running=False)
    flat = hidden.data.reshape(-1, 32)
    assert np.allclose(flat.mean(axis=0), 0.0, atol=1e-4)
    assert np.allclose(flat.var(axis=0), 1.0, atol=1e-4)


def test_projector_output_dim_and_eval_purity():
    params = init_params(desk_preset(), seed=7)
    x = np.random.default_rng(6).normal(size=(20, 8))
    emb = encode(params, x)
    assert emb.frames.shape == (10, 16)
    assert emb.frame_stride == 2
    before = {k: v.copy() for k, v in params.running.items()}
    encode(params, x)
    for k in before:
        assert np.array_equal(params.running[k], before[k])


def test_train_mode_updates_running_stats():
    params = init_params(desk_preset(), seed=8)
    x = np.random.default_rng(7).normal(size=(20, 8))
    before = params.running["projector.bn.mean"].copy()
    encode(params, x, train_mode=True, rng=np.random.default_rng(0))
    assert not np.array_equal(params.running["projector.bn.mean"], before)


def test_shape_law_for_random_lengths():
    params = init_params(desk_preset(), seed=9)
    rng = np.random.default_rng(8)
    for t in (2, 3, 7, 20, 33):
        emb = encode(params, rng.normal(size=(t, 8)))
        assert emb.frames.shape == (t // 2, 16)


def test_activations_finite_under_stress_inputs():
    params = init_params(desk_preset(), seed=10)
    rng = np.random.default_rng(9)
    for _ in range(5):
        x = rng.uniform(-10, 10, size=(24, 8))
        emb = encode(params, x, train_mode=True, rng=rng, update_running=False)
        assert np.all(np.isfinite(emb.frames.data))


def test_encode_gradient_matches_finite_differences():
    params = init_params(TINY, seed=11)
    x = np.random.default_rng(10).normal(size=(8, 6))

    def fn(t):
        return T.tmean(encode(params, t, train_mode=True, update_running=False).frames)

    assert T.grad_check(fn, T.Tensor(x)) < 1e-4


def test_batched_encode_matches_single_for_equal_lengths():
    params = init_params(desk_preset(), seed=12)
    rng = np.random.default_rng(11)
    seqs = [rng.normal(size=(14, 8)) for _ in range(3)]
    feats, lengths = pad_batch(seqs, dtype=np.float64)
    batched, out_lens = encode_batch(params, feats, lengths)
    assert list(out_lens) == [7, 7, 7]
    for i, seq in enumerate(seqs):
        single = encode(params, seq).frames.data
        assert np.allclose(batched.data[i], single, atol=1e-9)


def test_transformer_masks_padding_from_attention():
    params = init_params(desk_preset(), seed=13)
    rng = np.random.default_rng(12)
    h = rng.normal(size=(2, 9, 32))
    garbage = h.copy()
    garbage[0, 5:] = 1e3  # padded rows; must not affect the valid rows
    lengths = np.array([5, 9])
    clean = transformer_forward(params, h, lengths=lengths).data
    dirty = transformer_forward(params, garbage, lengths=lengths).data
    assert np.allclose(dirty[0, :5], clean[0, :5], atol=1e-9)
    assert np.array_equal(dirty[1], clean[1])


def test_config_roundtrip():
    cfg = desk_preset()
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
