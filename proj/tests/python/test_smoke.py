"""Python smoke tests for the mmdit extension module."""

import numpy as np
import pytest

import mmdit


def test_audio_scale_factor():
    assert abs(mmdit.audio_scale_factor(21, 218) - 0.09633) < 5e-5
    assert mmdit.audio_scale_factor(7, 7) == 1.0
    with pytest.raises(mmdit.MmditError):
        mmdit.audio_scale_factor(0, 5)


def test_condition_offset_indices():
    assert mmdit.condition_offset_indices([2, 3]) == [-5, -4, -3, -2, -1]
    assert mmdit.condition_offset_indices([1]) == [-1]
    assert mmdit.condition_offset_indices([]) == []


def test_rope_norm_preservation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 2, 16))
    idx = np.stack([np.arange(5), np.zeros(5, dtype=np.int64), np.zeros(5, dtype=np.int64)], axis=1).astype(np.int64)
    y = mmdit.apply_rope(x, idx)
    assert y.shape == x.shape
    pairs_in = x.reshape(5, 2, 8, 2)
    pairs_out = y.reshape(5, 2, 8, 2)
    np.testing.assert_allclose(
        np.linalg.norm(pairs_in, axis=-1), np.linalg.norm(pairs_out, axis=-1), atol=1e-12
    )
    # zero index rotates by nothing
    np.testing.assert_array_equal(mmdit.apply_rope(x, np.zeros((5, 3), dtype=np.int64)), x)


def test_task_masks():
    i2v = mmdit.build_task_mask("i2v", 3, 2, 2)
    assert i2v.shape == (3, 2, 2, 1)
    assert i2v[0].min() == 1.0 and i2v[1:].max() == 0.0
    startend = mmdit.build_task_mask("startend", 4, 2, 2)
    flags = startend.reshape(4, -1)[:, 0]
    np.testing.assert_array_equal(flags, [1, 0, 0, 1])
    # complementarity
    loss = mmdit.build_loss_mask("startend", 4, 2, 2)
    np.testing.assert_array_equal(startend + loss, np.ones_like(startend))


def test_channel_assembly():
    rng = np.random.default_rng(1)
    noisy = rng.standard_normal((2, 2, 2, 3))
    cond = rng.standard_normal((2, 2, 2, 3))
    mask = mmdit.build_task_mask("i2v", 2, 2, 2)
    black = np.full(3, 0.25)
    z = mmdit.assemble_channel_input(noisy, cond, mask, black)
    assert z.shape == (2, 2, 2, 7)  # V | I | M
    np.testing.assert_array_equal(z[..., :3], noisy)
    np.testing.assert_array_equal(z[0, ..., 3:6], cond[0])  # conditioned frame keeps content
    np.testing.assert_array_equal(z[1, ..., 3:6], np.broadcast_to(black, (2, 2, 3)))  # black fill
    np.testing.assert_array_equal(z[..., 6:], mask)


def test_flow_endpoints():
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((2, 2, 2, 2))
    eps = rng.standard_normal((2, 2, 2, 2))
    np.testing.assert_array_equal(mmdit.flow_interpolate(z0, eps, 1.0), z0)
    np.testing.assert_array_equal(mmdit.flow_interpolate(z0, eps, 0.0), eps)


def test_vsa_attention_full_k_is_dense():
    rng = np.random.default_rng(3)
    n = 27
    q = rng.standard_normal((n, 2, 8))
    k = rng.standard_normal((n, 2, 8))
    v = rng.standard_normal((n, 2, 8))
    full = mmdit.vsa_attention(q, k, v, grid=[3, 3, 3], cube=[2, 2, 2], top_k=8)
    assert full["cube_count"] == 8
    # dense reference in numpy
    scale = 1.0 / np.sqrt(8.0)
    dense = np.zeros_like(q)
    for h in range(2):
        logits = q[:, h, :] @ k[:, h, :].T * scale
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        dense[:, h, :] = p @ v[:, h, :]
    np.testing.assert_allclose(full["output"], dense, atol=1e-12)
    assert full["reduction"] < 1.0  # no sparsity: coarse stage is pure overhead

    quarter = mmdit.vsa_attention(q, k, v, grid=[3, 3, 3], cube=[2, 2, 2], top_k=2)
    assert quarter["fine_flops"] < full["fine_flops"]
    assert quarter["reduction"] > full["reduction"]


def test_vsa_reduction_target():
    rng = np.random.default_rng(4)
    n = 512
    q = rng.standard_normal((n, 2, 8))
    k = rng.standard_normal((n, 2, 8))
    v = rng.standard_normal((n, 2, 8))
    out = mmdit.vsa_attention(q, k, v, grid=[8, 8, 8], cube=[2, 2, 2], top_k=16)
    assert out["reduction"] >= 2.5


def test_upsample_and_splices():
    ramp = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
    up = mmdit.upsample_latent(ramp, 3, 1, 1)
    np.testing.assert_allclose(up.ravel(), [0.0, 1.0, 2.0], atol=1e-15)

    rng = np.random.default_rng(5)
    interp = rng.standard_normal((4, 2, 2, 2))
    key = rng.standard_normal((2, 2, 2))
    spliced = mmdit.splice_keyframes(interp, [(0, key)])
    np.testing.assert_array_equal(spliced[0], key)
    np.testing.assert_array_equal(spliced[1:], interp[1:])

    source = rng.standard_normal((4, 2, 2, 2))
    mask = np.zeros((4, 2, 2, 1))
    mask[2] = 1.0
    inpainted = mmdit.splice_inpaint(spliced, source, mask)
    np.testing.assert_array_equal(inpainted[2], source[2])
    np.testing.assert_array_equal(inpainted[0], spliced[0])


def test_embed_prompt_deterministic_unit_rows():
    a = mmdit.embed_prompt("a moving pattern", 32)
    b = mmdit.embed_prompt("a moving pattern", 32)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    c = mmdit.embed_prompt("a moving blob", 32)
    assert (a != c).any(axis=1).sum() == 1  # one token changed, one row changed


def test_model_identity_at_init_and_velocity_shapes():
    model = mmdit.Model(model_dim=32, head_count=2, m_dual=1, n_single=1, video_channels=2, audio_channels=2, seed=7)
    assert model.param_count > 0
    rng = np.random.default_rng(6)
    z_v = rng.standard_normal((2, 2, 2, 2))
    z_a = rng.standard_normal((4, 2))
    out = model.velocity(z_v, z_a, "a pattern", 0.5, task="t2v")
    assert out["video"].shape == z_v.shape
    assert out["audio"].shape == z_a.shape
    assert np.isfinite(out["video"]).all()


def test_model_overfit_and_sample():
    model = mmdit.Model(model_dim=32, head_count=2, m_dual=1, n_single=1, video_channels=2, audio_channels=2, seed=3)
    losses = model.train_overfit(40, frames=2, height=2, width=2, audio_tokens=4)
    assert len(losses) == 40
    assert losses[-1] < losses[0]
    out = model.sample("i2v", 2, 2, 2, 4, steps=2, seed=9)
    assert out["video"].shape == (2, 2, 2, 2)
    assert np.isfinite(out["video"]).all() and np.isfinite(out["audio"]).all()


def test_default_keyframe_positions():
    assert mmdit.default_keyframe_positions(9) == [0, 4, 8]
    assert mmdit.default_keyframe_positions(10) == [0, 4, 8, 9]
