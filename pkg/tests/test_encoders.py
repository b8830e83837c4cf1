import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcd import tensor as T
from mmcd.config import EncoderConfig
from mmcd.encoders import (FeatureMessage, KeypointMessage, encode_grid, encode_points, glorot_init,
                           keypoint_message_floats, message_bytes, patchify, point_encoder_shapes,
                           rgb_encoder_shapes, select_keypoints, self_attention)
from mmcd.sensors import PointSet
from mmcd.selfcheck import encoder_case
from mmcd.tensor import Tensor

SMALL = EncoderConfig(grid_size=16, patch=8, d_model=8, embed_dim=12, point_hidden=6, keypoints=5, feat_dim=4)


def attn_params(rng, d=4):
    return {f"rgb_enc.{k}": rng.normal(size=(d, d)) for k in ("wq", "wk", "wv", "wo")}


def random_grid(rng, g=16):
    return np.eye(3)[rng.integers(0, 3, size=(g, g))]


def test_single_token_attention_is_projected_value():
    rng = np.random.default_rng(0)
    p = attn_params(rng)
    tok = rng.normal(size=(1, 4))
    out = self_attention(Tensor(tok), p).data
    np.testing.assert_allclose(out, tok @ p["rgb_enc.wv"] @ p["rgb_enc.wo"], atol=1e-12)


def test_identical_tokens_give_identical_rows():
    rng = np.random.default_rng(1)
    tok = np.repeat(rng.normal(size=(1, 4)), 2, axis=0)
    out = self_attention(Tensor(tok), attn_params(rng)).data
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_self_attention_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p, tok = attn_params(rng), rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    a = self_attention(Tensor(tok), p).data
    b = self_attention(Tensor(tok[perm]), p).data
    np.testing.assert_allclose(a[perm], b, atol=1e-9)


def test_patchify_row_major_blocks():
    cells = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
    rows = patchify(cells, 2)
    np.testing.assert_array_equal(rows[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(rows[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(rows[3], [10, 11, 14, 15])


def test_zero_params_give_zero_embedding():
    params = {k: np.zeros(s) for k, s in rgb_encoder_shapes(SMALL).items()}
    out = encode_grid(params, random_grid(np.random.default_rng(0)), SMALL)
    assert out.shape == (12,) and not out.data.any()


def test_encode_grid_is_deterministic_and_finite():
    rng = np.random.default_rng(2)
    params = glorot_init(rgb_encoder_shapes(SMALL), rng)
    grid = random_grid(rng)
    a, b = encode_grid(params, grid, SMALL).data, encode_grid(params, grid, SMALL).data
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()


def test_encode_grid_rejects_wrong_shape():
    params = glorot_init(rgb_encoder_shapes(SMALL), np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        encode_grid(params, np.zeros((8, 8, 3)), SMALL)


@pytest.mark.parametrize("seed", range(3))
def test_encode_grid_gradient_matches_finite_differences(seed):
    graph, params = encoder_case(np.random.default_rng(seed))
    assert T.finite_diff_check(graph, params) < 1e-4


def test_default_embedding_is_256():
    cfg = EncoderConfig()
    params = glorot_init(rgb_encoder_shapes(cfg), np.random.default_rng(0))
    assert encode_grid(params, random_grid(np.random.default_rng(1), 32), cfg).shape == (256,)


def pointset(points, m=10):
    pts = np.zeros((m, 2))
    mask = np.zeros(m, dtype=bool)
    pts[:len(points)] = np.reshape(points, (-1, 2))
    mask[:len(points)] = True
    return PointSet(pts, mask)


def test_select_keypoints_pads_by_repeating():
    pts = np.array([[1.0, 0.0], [2.0, 0.0]])
    sel, ok = select_keypoints(pts, [True, True], 5)
    assert ok and sel.shape == (5, 2)
    assert set(map(tuple, sel)) == {(1.0, 0.0), (2.0, 0.0)}


def test_empty_pointset_gives_zero_keypoints_and_affine_of_zero():
    params = glorot_init(point_encoder_shapes(SMALL), np.random.default_rng(0))
    params["pt_enc.out_b"] = np.arange(12.0)
    msg, emb = encode_points(params, pointset([]), SMALL)
    assert not msg.positions.any() and not msg.features.any()
    assert msg.features.shape == (SMALL.keypoints, SMALL.feat_dim)
    np.testing.assert_array_equal(emb.data, params["pt_enc.out_b"])


def test_duplicated_points_leave_embedding_unchanged():
    rng = np.random.default_rng(3)
    params = glorot_init(point_encoder_shapes(SMALL), rng)
    pts = rng.uniform(-30, 30, size=(4, 2))
    _, a = encode_points(params, pointset(pts), SMALL, full_pool=True)
    _, b = encode_points(params, pointset(np.concatenate([pts, pts])), SMALL, full_pool=True)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_keypoint_message_positions_have_zero_z():
    rng = np.random.default_rng(4)
    params = glorot_init(point_encoder_shapes(SMALL), rng)
    msg, _ = encode_points(params, pointset(rng.normal(size=(7, 2))), SMALL)
    assert msg.positions.shape == (5, 3) and not msg.positions[:, 2].any()
    assert np.isfinite(msg.features).all()


def test_full_scale_message_sizes():
    full = EncoderConfig.full_scale()
    assert keypoint_message_floats(full) == 128 * 131
    kp = KeypointMessage(np.zeros((128, 3)), np.zeros((128, 128)))
    assert message_bytes(FeatureMessage(1, "lidar", kp)) == 67072
    assert FeatureMessage(1, "rgb", np.zeros(256)).byte_size == 1024
