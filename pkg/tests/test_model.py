import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordiff import numerics as nx
from affordiff.checks import GRADCHECK_CONFIG, model_gradcheck
from affordiff.encoders import TokenSequence
from affordiff.model import CheckpointMismatch, Denoiser, ModelConfig, position_offset_attention

SMALL = ModelConfig(n_layers=2, d_model=32, n_heads=2, patch_size=16)


def frames(seed=0, batch=None, size=64):
    rng = np.random.default_rng(seed)
    shape = (size, size, 3) if batch is None else (batch, size, size, 3)
    return rng.integers(0, 256, size=shape, dtype=np.uint8), rng.integers(0, 256, size=shape, dtype=np.uint8)


def run(model, seed=0, k=10, ids=(2, 4, 8)):
    cur, prev = frames(seed)
    cond = model.encode_conditions(cur, prev, np.array(ids))
    x = np.random.default_rng(seed).standard_normal((model.config.chunk_size, 2))
    return model(k, x, cond).data


def tokens(n, d=8, seed=0):
    return TokenSequence(nx.Tensor(np.random.default_rng(seed).normal(size=(n, d))), "image")


def test_poa_doubles_token_count():
    cur = tokens(16)
    assert position_offset_attention(cur, tokens(16, seed=1)).n_tokens == 32
    assert position_offset_attention(cur, tokens(16, seed=1), disable=True).n_tokens == 16


def test_poa_motion_half_zero_when_frames_match():
    cur = tokens(16)
    out = position_offset_attention(cur, cur).tokens.data
    np.testing.assert_array_equal(out[16:], 0.0)
    np.testing.assert_array_equal(out[:16], cur.tokens.data)


def test_poa_token_count_mismatch():
    with pytest.raises(nx.ShapeError):
        position_offset_attention(tokens(16), tokens(15))


def test_visual_token_count_halves_without_poa():
    full = ModelConfig()
    assert ModelConfig(disable_poa=True).visual_tokens * 2 == full.visual_tokens


def test_waypoint_embedding_length():
    m = Denoiser(SMALL, 0, np.float64)
    seq = m.embed_waypoints(np.zeros((5, 2)), 3)
    assert seq.n_tokens == 6


def test_timestep_tokens_differ():
    m = Denoiser(SMALL, 0, np.float64)
    a = m.embed_waypoints(np.zeros((5, 2)), 0).tokens.data[0]
    b = m.embed_waypoints(np.zeros((5, 2)), 999).tokens.data[0]
    assert not np.allclose(a, b)


def test_zero_points_give_zero_point_tokens():
    m = Denoiser(SMALL, 0, np.float64)
    seq = m.embed_waypoints(np.zeros((5, 2)), 7).tokens.data
    np.testing.assert_array_equal(seq[1:], 0.0)
    assert np.abs(seq[0]).sum() > 0


@settings(max_examples=15, deadline=None)
@given(T=st.integers(1, 7), text_len=st.integers(1, 6), batch=st.integers(1, 3), patch=st.sampled_from([8, 16, 32]))
def test_output_shape(T, text_len, batch, patch):
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, chunk_size=T, patch_size=patch)
    m = Denoiser(cfg, 0, np.float64)
    cur, prev = frames(batch=batch)
    ids = np.ones((batch, text_len), dtype=np.int64)
    cond = m.encode_conditions(cur, prev, ids)
    x = np.zeros((batch, T, 2))
    assert m(np.zeros(batch, dtype=np.int64), x, cond).shape == (batch, T, 2)


def test_all_zero_parameters_output_head_bias():
    m = Denoiser(SMALL, 0, np.float64)
    for p in m.parameters():
        p.data[:] = 0.0
    m.head.out.bias.data[:] = [0.25, -0.5]
    out = run(m)
    np.testing.assert_array_equal(out, np.tile([0.25, -0.5], (5, 1)))


def test_sial_parameter_audit():
    d = 128
    full = Denoiser(ModelConfig(d_model=d), 0).num_parameters()
    lin = Denoiser(ModelConfig(d_model=d, disable_sial=True), 0).num_parameters()
    assert full - lin == d * d + d


def test_forward_is_deterministic():
    m = Denoiser(SMALL, 3, np.float64)
    np.testing.assert_array_equal(run(m), run(m))
    np.testing.assert_array_equal(run(Denoiser(SMALL, 3, np.float64)), run(m))


def test_head_output_is_not_squashed():
    m = Denoiser(SMALL, 0, np.float64)
    m.head.out.bias.data[:] = [5.0, -5.0]
    out = run(m)
    assert out.max() > 1 and out.min() < 0


def test_poa_ablation_invariance_with_zero_values():
    full = Denoiser(SMALL, 0, np.float64)
    ablated = Denoiser(ModelConfig(**{**SMALL.to_dict(), "disable_poa": True}), 0, np.float64)
    ablated.load_state_dict(full.state_dict())
    for m in (full, ablated):
        for block in m.blocks:
            block.cross_attn.v.weight.data[:] = 0.0
            block.cross_attn.v.bias.data[:] = 0.0
    cur, _ = frames()
    outs = []
    for m in (full, ablated):
        cond = m.encode_conditions(cur, cur, np.array([2, 4]))
        outs.append(m(5, np.zeros((5, 2)), cond).data)
    assert full.config.visual_tokens == 2 * ablated.config.visual_tokens
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)


def test_instruction_changes_output():
    m = Denoiser(SMALL, 0, np.float64)
    assert not np.allclose(run(m, ids=(2, 4, 8)), run(m, ids=(2, 5, 8)))


def test_text_mask_hides_padding():
    m = Denoiser(SMALL, 0, np.float64)
    cur, prev = frames()
    a = m.encode_conditions(cur, prev, np.array([2, 4, 0]), np.array([True, True, False]))
    b = m.encode_conditions(cur, prev, np.array([2, 4, 7]), np.array([True, True, False]))
    x = np.zeros((5, 2))
    np.testing.assert_allclose(m(1, x, a).data, m(1, x, b).data, atol=1e-12)


def test_wrong_chunk_shape_rejected():
    m = Denoiser(SMALL, 0, np.float64)
    cur, prev = frames()
    cond = m.encode_conditions(cur, prev, np.array([1]))
    with pytest.raises(nx.ShapeError):
        m(0, np.zeros((4, 2)), cond)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(chunk_size=0)


def test_alternating_cross_attention_order():
    cfg = ModelConfig(n_layers=4)
    assert [cfg.layer_condition(i) for i in range(4)] == ["image", "text", "image", "text"]
    cfg = ModelConfig(n_layers=4, cross_attention_order="text-first")
    assert [cfg.layer_condition(i) for i in range(4)] == ["text", "image", "text", "image"]


def test_state_dict_round_trip_and_mismatch():
    a = Denoiser(SMALL, 0, np.float64)
    b = Denoiser(SMALL, 1, np.float64)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(run(a), run(b))
    wide = Denoiser(ModelConfig(**{**SMALL.to_dict(), "d_model": 64}), 0)
    with pytest.raises(CheckpointMismatch, match="image_encoder.proj.weight"):
        wide.load_state_dict(a.state_dict())


def test_freeze_encoders_excludes_encoder_parameters():
    frozen = Denoiser(ModelConfig(**{**SMALL.to_dict(), "freeze_encoders": True}), 0)
    names = {id(p) for p in frozen.trainable_parameters()}
    assert all(id(p) not in names for p in frozen.image_encoder.parameters())
    assert len(frozen.trainable_parameters()) < len(frozen.parameters())


def test_default_config_size():
    assert 0.8e6 < Denoiser(ModelConfig(), 0).num_parameters() < 1.6e6


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_full_model_gradient(dtype):
    assert GRADCHECK_CONFIG.n_layers == 2 and GRADCHECK_CONFIG.d_model == 32
    rep = model_gradcheck(dtype, max_coords=150)
    assert rep.passed, rep.max_rel_error
