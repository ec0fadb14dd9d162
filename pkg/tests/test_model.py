import numpy as np
import pytest
import torch

from ema_ats import model as M
from ema_ats.config import ConfigError, ModelConfig
from ema_ats.gradcheck import audit_config, check_gradients


@pytest.fixture(scope="module")
def full():
    cfg = ModelConfig()
    return cfg, M.init_parameters(cfg)


def test_one_hot():
    assert M.one_hot_speaker(0, 3).tolist() == [1, 0, 0]
    assert M.one_hot_speaker(2, 3).tolist() == [0, 0, 1]
    v = M.one_hot_speaker(7, 8)
    assert v[7] == 1 and v.sum() == 1
    with pytest.raises(ValueError):
        M.one_hot_speaker(8, 8)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(d_hidden=30)
    with pytest.raises(ConfigError):
        ModelConfig(lambda_pitch=-0.1)


def test_init_shapes_and_biases(full):
    cfg, p = full
    assert tuple(p["integration.conv.weight"].shape) == (256, 26, 5)
    for name in p:
        if name.endswith(".bias"):
            assert torch.count_nonzero(p[name]) == 0, name


def test_init_deterministic():
    cfg = ModelConfig(d_hidden=32, d_style=16, d_ff=64, n_conformer_blocks=2)
    assert M.init_parameters(cfg).bit_equal(M.init_parameters(cfg))
    assert not M.init_parameters(cfg).bit_equal(M.init_parameters(cfg.replace(seed=1)))


def test_glorot_bounds(full):
    _, p = full
    w = p["generator.blocks.0.ff1.weight"]
    limit = np.sqrt(6.0 / (256 + 1024))
    assert float(w.abs().max()) <= limit
    assert float(w.abs().max()) > 0.9 * limit


def test_default_shapes_t200(full):
    cfg, p = full
    ema = np.random.default_rng(0).standard_normal((200, 18))
    with torch.no_grad():
        h = M.integration_block(ema, M.one_hot_speaker(3, 8), p, cfg)
        s = M.style_encoder(h, p, cfg)
        pitch = M.variance_predictor(s, p, cfg, "pitch")
        energy = M.variance_predictor(s, p, cfg, "energy")
        mel = M.mel_generator(h, s, p, cfg)
    assert h.shape == (200, 256) and s.shape == (200, 128)
    assert pitch.shape == (200,) and energy.shape == (200,)
    assert mel.shape == (200, 40)
    assert all(torch.isfinite(t).all() for t in (h, s, pitch, energy, mel))


def test_single_frame_shapes(tiny_cfg):
    cfg = tiny_cfg
    p = M.init_parameters(cfg)
    with torch.no_grad():
        h = M.integration_block(np.zeros((1, cfg.c_ema)), M.one_hot_speaker(0, 2), p, cfg)
        s = M.style_encoder(h, p, cfg)
        assert h.shape == (1, cfg.d_hidden) and s.shape == (1, cfg.d_style)
        assert M.variance_predictor(s, p, cfg, "energy").shape == (1,)
        assert M.mel_generator(h, s, p, cfg).shape == (1, cfg.n_mels)


def test_single_token_attention_is_value_path(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    x = torch.randn(1, tiny_cfg.d_style, dtype=torch.float32)
    got = M.multi_head_attention(x, p, "style.attn", tiny_cfg.n_attn_heads)
    want = M.linear(M.linear(x, p, "style.attn.v"), p, "style.attn.o")
    torch.testing.assert_close(got, want)


def test_integration_block_zero_params_zero_input(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    zero = M.ParameterStore((k, torch.zeros_like(v)) for k, v in p.items())
    out = M.integration_block(np.zeros((6, tiny_cfg.c_ema)), M.one_hot_speaker(1, 2), zero, tiny_cfg)
    assert torch.count_nonzero(out) == 0


def test_integration_block_rejects_bad_speaker(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    with pytest.raises(ValueError, match="one-hot"):
        M.integration_block(np.zeros((3, tiny_cfg.c_ema)), np.array([0.5, 0.5]), p, tiny_cfg)
    with pytest.raises(ValueError, match="width"):
        M.integration_block(np.zeros((3, 5)), M.one_hot_speaker(0, 2), p, tiny_cfg)


def test_speaker_changes_integration_output(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    ema = np.random.default_rng(0).standard_normal((10, tiny_cfg.c_ema))
    with torch.no_grad():
        a = M.integration_block(ema, M.one_hot_speaker(0, 2), p, tiny_cfg)
        b = M.integration_block(ema, M.one_hot_speaker(1, 2), p, tiny_cfg)
    assert float((a - b).abs().max()) > 1e-6


def test_style_encoder_permutation_equivariant():
    cfg = ModelConfig(d_hidden=16, d_style=8, conv_kernel=1, dtype="float64")
    p = M.init_parameters(cfg)
    h = torch.randn(9, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    perm = torch.tensor([0, 1, 5, 3, 4, 2, 6, 7, 8])
    out = M.style_encoder(h, p, cfg)
    out_perm = M.style_encoder(h[perm], p, cfg)
    torch.testing.assert_close(out_perm[perm], out, atol=1e-6, rtol=0)


def test_variance_predictor_stateless(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    s = torch.randn(12, tiny_cfg.d_style)
    a = M.variance_predictor(s, p, tiny_cfg, "pitch")
    b = M.variance_predictor(s.clone(), p, tiny_cfg, "pitch")
    assert torch.equal(a, b)
    assert not torch.equal(a, M.variance_predictor(s, p, tiny_cfg, "energy"))


def test_conformer_stack_preserves_shape(full):
    cfg, p = full
    x = torch.randn(200, 256)
    with torch.no_grad():
        assert M.conformer_block(x, p, "generator.blocks.0", cfg).shape == (200, 256)
        for i in range(8):
            x = M.conformer_block(x, p, f"generator.blocks.{i}", cfg)
    assert x.shape == (200, 256)


def test_conformer_gradient_matches_finite_differences():
    cfg = audit_config()
    p = M.init_parameters(cfg)
    x = torch.as_tensor(np.random.default_rng(1).standard_normal((6, cfg.d_hidden)))
    n, err = check_gradients(lambda q: M.conformer_block(x, q, "generator.blocks.0", cfg).sum(), p,
                             [k for k in p if k.startswith("generator.blocks.0.")], per_tensor=4)
    assert n > 0 and err < 1e-4


def test_mel_generator_frame_mismatch(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    with pytest.raises(ValueError, match="frame-count mismatch"):
        M.mel_generator(torch.zeros(200, tiny_cfg.d_hidden), torch.zeros(199, tiny_cfg.d_style), p, tiny_cfg)


def test_baseline_shape_determinism_and_size(full):
    cfg, p = full
    b = M.init_baseline_parameters(cfg)
    ema = np.random.default_rng(0).standard_normal((200, 18))
    with torch.no_grad():
        y1 = M.baseline_forward(ema, b, cfg)
        y2 = M.baseline_forward(ema, b, cfg)
    assert y1.shape == (200, 40) and torch.equal(y1, y2)
    assert b.num_parameters() < p.num_parameters()


def test_forwards_are_bit_deterministic(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    ema = np.random.default_rng(2).standard_normal((15, tiny_cfg.c_ema))
    a = M.forward_train(ema, 1, p, tiny_cfg)
    b = M.forward_train(ema, 1, p, tiny_cfg)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_dropout_only_in_training(tiny_cfg):
    cfg = tiny_cfg.replace(dropout=0.5)
    p = M.init_parameters(cfg)
    ema = np.random.default_rng(2).standard_normal((15, cfg.c_ema))
    ev = [M.forward_train(ema, 0, p, cfg)[0] for _ in range(2)]
    assert torch.equal(ev[0], ev[1])
    torch.manual_seed(0)
    tr = M.forward_train(ema, 0, p, cfg, training=True)[0]
    assert not torch.equal(tr, ev[0])


def test_store_tracing(tiny_cfg):
    p = M.init_parameters(tiny_cfg)
    p.trace = set()
    M.style_encoder(torch.zeros(3, tiny_cfg.d_hidden), p, tiny_cfg)
    assert p.trace and all(n.startswith("style.") for n in p.trace)
    with pytest.raises(KeyError, match="missing parameter"):
        p["nope"]
