import numpy as np
import pytest

from epvr import core, neural
from epvr.errors import BadMagic, ChecksumFailure, NonFiniteActivation, ShapeError, ShapeMismatch


SMALL = neural.NetConfig(model_dim=16, heads=2, layers=1, window=6, joints=22,
                         summary_hidden=24, decoder_hidden=12)


def _zeroed_encoder(cfg, input_dim):
    rng = np.random.default_rng(0)
    enc = neural._init_encoder(rng, cfg, input_dim)
    enc.embed_w[:] = 0.0
    enc.embed_b[:] = 0.0
    enc.pos[:] = 0.0
    enc.summary_w1[:] = 0.0
    enc.summary_b1[:] = 0.0
    enc.summary_w2[:] = 0.0
    enc.summary_b2[:] = 0.0
    for lw in enc.frame_layers + enc.joint_layers:
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
            getattr(lw, name)[:] = 0.0
    return enc


def test_zero_weights_pass_joint_embedding_through():
    enc = _zeroed_encoder(SMALL, SMALL.motion_dim)
    rng = np.random.default_rng(1)
    window = rng.standard_normal((SMALL.window, SMALL.motion_dim))
    out = neural.spatiotemporal_encode(window, enc, SMALL.heads)
    assert np.array_equal(out, enc.joint_embed)


def test_output_shape_is_joints_by_model_dim():
    motion, _, _ = neural.init_weights(SMALL, seed=3)
    rng = np.random.default_rng(2)
    for t in (1, 3, SMALL.window):
        out = neural.spatiotemporal_encode(
            rng.standard_normal((t, SMALL.motion_dim)), motion, SMALL.heads
        )
        assert out.shape == (SMALL.joints, SMALL.model_dim)


def test_attention_rows_sum_to_one():
    motion, visual, fusion = neural.init_weights(SMALL, seed=4)
    rng = np.random.default_rng(5)
    sink = []
    m = neural.spatiotemporal_encode(
        rng.standard_normal((SMALL.window, SMALL.motion_dim)), motion, SMALL.heads, sink
    )
    n = neural.spatiotemporal_encode(
        rng.standard_normal((SMALL.window, SMALL.keypoint_dim)), visual, SMALL.heads, sink
    )
    neural.cross_attention_fuse(m, n, fusion, SMALL.heads, sink)
    assert len(sink) == 2 * (2 * SMALL.layers) + 1
    for probs in sink:
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-6
        assert np.all(probs >= 0.0)


def test_uniform_attention_is_mean_pooling():
    """Zero query/key projections and identity values: each token's
    attention output is the mean of the value tokens."""
    s = 8
    n_tok = 5
    rng = np.random.default_rng(6)
    x = rng.standard_normal((n_tok, s))
    eye = np.eye(s)
    zero = np.zeros(s)
    out = neural.multi_head_attention(
        x, x, np.zeros((s, s)), zero, np.zeros((s, s)), zero, eye, zero, eye, zero,
        heads=1,
    )
    mean = x.mean(axis=0)
    for row in out:
        assert np.max(np.abs(row - mean)) < 1e-9


def test_final_token_summary_property():
    """With no frame layers the encoding depends only on the final frame."""
    cfg = neural.NetConfig(model_dim=16, heads=2, layers=0, window=6, joints=22,
                           summary_hidden=24, decoder_hidden=12)
    motion, _, _ = neural.init_weights(cfg, seed=7)
    rng = np.random.default_rng(8)
    window = rng.standard_normal((cfg.window, cfg.motion_dim))
    scrambled = rng.standard_normal(window.shape)
    scrambled[-1] = window[-1]
    a = neural.spatiotemporal_encode(window, motion, cfg.heads)
    b = neural.spatiotemporal_encode(scrambled, motion, cfg.heads)
    assert np.array_equal(a, b)


def test_fusion_zero_value_path_reduces_to_feed_forward():
    _, _, fusion = neural.init_weights(SMALL, seed=9)
    fusion.wv[:] = 0.0
    fusion.bv[:] = 0.0
    fusion.bo[:] = 0.0
    rng = np.random.default_rng(10)
    m = rng.standard_normal((SMALL.joints, SMALL.model_dim))
    n = np.tile(rng.standard_normal(SMALL.model_dim), (SMALL.joints, 1))
    got = neural.cross_attention_fuse(m, n, fusion, SMALL.heads)
    h = neural.layer_norm(m, fusion.ln_ff_g, fusion.ln_ff_b)
    want = m + np.maximum(h @ fusion.ff_w1 + fusion.ff_b1, 0.0) @ fusion.ff_w2 + fusion.ff_b2
    assert np.max(np.abs(got - want)) < 1e-12


def test_fusion_key_permutation_invariance():
    motion, visual, fusion = neural.init_weights(SMALL, seed=11)
    rng = np.random.default_rng(12)
    m = rng.standard_normal((SMALL.joints, SMALL.model_dim))
    n = rng.standard_normal((SMALL.joints, SMALL.model_dim))
    base = neural.cross_attention_fuse(m, n, fusion, SMALL.heads)
    for _ in range(5):
        perm = rng.permutation(SMALL.joints)
        permuted = neural.cross_attention_fuse(m, n[perm], fusion, SMALL.heads)
        assert np.max(np.abs(permuted - base)) < 1e-9


def test_fusion_shape_preserved():
    _, _, fusion = neural.init_weights(SMALL, seed=13)
    rng = np.random.default_rng(14)
    m = rng.standard_normal((SMALL.joints, SMALL.model_dim))
    n = rng.standard_normal((SMALL.joints, SMALL.model_dim))
    assert neural.cross_attention_fuse(m, n, fusion, SMALL.heads).shape == m.shape


def test_decode_constant_head_emits_identity_rotations():
    _, _, fusion = neural.init_weights(SMALL, seed=15)
    fusion.dec_root_w2[:] = 0.0
    fusion.dec_root_b2[:] = core.IDENTITY_6D
    fusion.dec_local_w2[:] = 0.0
    fusion.dec_local_b2[:] = core.IDENTITY_6D
    rng = np.random.default_rng(16)
    pose = neural.decode_pose(rng.standard_normal((22, SMALL.model_dim)), fusion)
    assert np.array_equal(pose.root_rotation, core.IDENTITY_6D)
    assert np.all(pose.local_rotations == core.IDENTITY_6D)
    decoded = core.rot6d_to_matrix(pose.stacked_rotations())
    assert np.allclose(decoded, np.eye(3), atol=1e-15)


def test_decode_per_token_locality():
    _, _, fusion = neural.init_weights(SMALL, seed=17)
    rng = np.random.default_rng(18)
    feats = rng.standard_normal((22, SMALL.model_dim))
    base = neural.decode_pose(feats, fusion)
    bumped = feats.copy()
    bumped[5] += 1.0
    got = neural.decode_pose(bumped, fusion)
    assert not np.array_equal(got.local_rotations[4], base.local_rotations[4])
    assert np.array_equal(got.root_rotation, base.root_rotation)
    mask = np.ones(21, dtype=bool)
    mask[4] = False
    assert np.array_equal(got.local_rotations[mask], base.local_rotations[mask])


def test_decode_matches_matrix_multiply_oracle():
    _, _, fusion = neural.init_weights(SMALL, seed=19)
    rng = np.random.default_rng(20)
    feats = rng.standard_normal((22, SMALL.model_dim))
    pose = neural.decode_pose(feats, fusion)
    root = np.maximum(feats[0] @ fusion.dec_root_w1 + fusion.dec_root_b1, 0.0)
    root = root @ fusion.dec_root_w2 + fusion.dec_root_b2
    assert np.max(np.abs(pose.root_rotation - root)) < 1e-9
    for i in range(21):
        h = np.maximum(feats[i + 1] @ fusion.dec_local_w1 + fusion.dec_local_b1, 0.0)
        want = h @ fusion.dec_local_w2 + fusion.dec_local_b2
        assert np.max(np.abs(pose.local_rotations[i] - want)) < 1e-9


def test_determinism():
    motion, visual, fusion = neural.init_weights(SMALL, seed=21)
    rng = np.random.default_rng(22)
    window = rng.standard_normal((SMALL.window, SMALL.motion_dim))
    a = neural.spatiotemporal_encode(window, motion, SMALL.heads)
    b = neural.spatiotemporal_encode(window, motion, SMALL.heads)
    assert np.array_equal(a, b)


def test_shape_errors():
    motion, _, fusion = neural.init_weights(SMALL, seed=23)
    with pytest.raises(ShapeError):
        neural.spatiotemporal_encode(np.zeros((3, SMALL.motion_dim + 1)), motion, SMALL.heads)
    with pytest.raises(ShapeError):
        neural.spatiotemporal_encode(
            np.zeros((SMALL.window + 1, SMALL.motion_dim)), motion, SMALL.heads
        )
    with pytest.raises(ShapeError):
        neural.decode_pose(np.zeros((21, SMALL.model_dim)), fusion)


def test_non_finite_inputs_rejected():
    motion, _, _ = neural.init_weights(SMALL, seed=24)
    window = np.zeros((SMALL.window, SMALL.motion_dim))
    window[0, 0] = np.inf
    with pytest.raises(NonFiniteActivation):
        neural.spatiotemporal_encode(window, motion, SMALL.heads)


def test_weights_round_trip_bit_exact(tmp_path):
    motion, visual, fusion = neural.init_weights(SMALL, seed=25)
    path = tmp_path / "weights.epvr"
    neural.save_weights(path, motion, visual, fusion, SMALL)
    m2, v2, f2, cfg2 = neural.load_weights(path)
    assert cfg2 == SMALL
    assert np.array_equal(m2.embed_w, motion.embed_w)
    assert np.array_equal(m2.pos, motion.pos)
    assert np.array_equal(v2.joint_embed, visual.joint_embed)
    assert np.array_equal(f2.dec_local_w2, fusion.dec_local_w2)
    for a, b in zip(m2.frame_layers, motion.frame_layers):
        assert np.array_equal(a.wq, b.wq)
        assert np.array_equal(a.ff_w2, b.ff_w2)
    # and the loaded weights produce identical forward passes
    rng = np.random.default_rng(26)
    window = rng.standard_normal((SMALL.window, SMALL.motion_dim))
    assert np.array_equal(
        neural.spatiotemporal_encode(window, motion, SMALL.heads),
        neural.spatiotemporal_encode(window, m2, SMALL.heads),
    )


def test_truncated_file_fails_checksum(tmp_path):
    motion, visual, fusion = neural.init_weights(SMALL, seed=27)
    path = tmp_path / "weights.epvr"
    neural.save_weights(path, motion, visual, fusion, SMALL)
    blob = path.read_bytes()
    truncated = tmp_path / "truncated.epvr"
    truncated.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ChecksumFailure):
        neural.load_weights(truncated)


def test_corrupted_payload_fails_checksum(tmp_path):
    motion, visual, fusion = neural.init_weights(SMALL, seed=28)
    path = tmp_path / "weights.epvr"
    neural.save_weights(path, motion, visual, fusion, SMALL)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad = tmp_path / "bad.epvr"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ChecksumFailure):
        neural.load_weights(bad)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "not_weights.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagic):
        neural.load_weights(path)


def test_indivisible_heads_rejected(tmp_path):
    """A file whose config declares model_dim not divisible by heads."""
    motion, visual, fusion = neural.init_weights(SMALL, seed=29)
    path = tmp_path / "weights.epvr"
    save_cfg = SMALL
    neural.save_weights(path, motion, visual, fusion, save_cfg)
    blob = bytearray(path.read_bytes())
    # patch the config tensor's heads entry (field index 3) from 2 to 3
    # and fix up the trailing CRC
    import struct
    import zlib

    entries, payload = neural._read_directory(bytes(blob[:-4]))
    name_to_off = {name: off for name, _, _, off in entries}
    dir_end = len(blob) - 4 - len(payload)
    cfg_off = dir_end + name_to_off["config"]
    struct.pack_into("<f", blob, cfg_off + 3 * 4, 3.0)
    body = bytes(blob[:-4])
    blob[-4:] = struct.pack("<I", zlib.crc32(body))
    bad = tmp_path / "bad_heads.epvr"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ShapeMismatch):
        neural.load_weights(bad)


def test_missing_tensor_rejected(tmp_path):
    motion, visual, fusion = neural.init_weights(SMALL, seed=30)
    tensors = neural._flatten(motion, visual, fusion, SMALL)
    # re-save without one tensor by monkey-building the file
    path = tmp_path / "weights.epvr"
    neural.save_weights(path, motion, visual, fusion, SMALL)
    import struct
    import zlib

    # declare a config with an extra layer the file does not contain
    blob = bytearray(path.read_bytes())
    entries, payload = neural._read_directory(bytes(blob[:-4]))
    dir_end = len(blob) - 4 - len(payload)
    name_to_off = {name: off for name, _, _, off in entries}
    cfg_off = dir_end + name_to_off["config"]
    struct.pack_into("<f", blob, cfg_off + 4 * 4, 2.0)  # layers: 1 -> 2
    blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
    bad = tmp_path / "missing.epvr"
    bad.write_bytes(bytes(blob))
    with pytest.raises(ShapeMismatch):
        neural.load_weights(bad)
    assert "motion.frame.0.wq" in tensors
