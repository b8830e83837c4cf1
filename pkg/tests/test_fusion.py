import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcd import fusion
from mmcd import tensor as T
from mmcd.config import FusionConfig
from mmcd.encoders import KeypointMessage
from mmcd.selfcheck import attention_decide_case
from mmcd.tensor import Tensor


def proj(rng, e=5, d=3):
    return {k: rng.normal(size=(e, d)) for k in ("fusion.wq", "fusion.wk", "fusion.wv")}


def test_hand_checked_two_dimensional_case():
    eye = {k: np.eye(2) for k in ("fusion.wq", "fusion.wk", "fusion.wv")}
    agg, a = fusion.cross_attention_aggregate([1.0, 0.0], np.eye(2), eye)
    e = math.exp(1 / math.sqrt(2))
    want = [e / (e + 1), 1 / (e + 1)]
    np.testing.assert_allclose(a.data.reshape(-1), want, atol=1e-12, rtol=0)
    np.testing.assert_allclose(agg.data, want, atol=1e-12, rtol=0)
    assert a.data.reshape(-1)[0] == pytest.approx(0.6698, abs=1e-4)


def test_single_collaborator_gets_all_weight():
    rng = np.random.default_rng(0)
    p = proj(rng)
    row = rng.normal(size=(1, 5))
    agg, a = fusion.cross_attention_aggregate(rng.normal(size=5), row, p)
    assert a.data.reshape(-1).tolist() == [1.0]
    np.testing.assert_allclose(agg.data, (row @ p["fusion.wv"])[0], atol=1e-12)


def test_identical_rows_split_evenly():
    rng = np.random.default_rng(1)
    rows = np.repeat(rng.normal(size=(1, 5)), 2, axis=0)
    _, a = fusion.cross_attention_aggregate(rng.normal(size=5), rows, proj(rng))
    np.testing.assert_allclose(a.data.reshape(-1), [0.5, 0.5], atol=1e-12)


def test_zero_collaborators_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        fusion.cross_attention_aggregate(rng.normal(size=5), np.zeros((0, 5)), proj(rng))


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_attention_simplex_and_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    p, f_ego, rows = proj(rng), rng.normal(size=5) * 3, rng.normal(size=(n, 5)) * 3
    agg, a = fusion.cross_attention_aggregate(f_ego, rows, p)
    assert (a.data >= 0).all() and abs(a.data.sum() - 1) <= 1e-9
    agg2, _ = fusion.cross_attention_aggregate(f_ego, rows[rng.permutation(n)], p)
    np.testing.assert_allclose(agg.data, agg2.data, atol=1e-9, rtol=0)


def test_masked_batch_matches_unbatched():
    rng = np.random.default_rng(3)
    p = proj(rng)
    f_ego, rows = rng.normal(size=(2, 5)), rng.normal(size=(2, 3, 5))
    mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=bool)
    agg, a = fusion.cross_attention_aggregate(f_ego, rows, p, mask)
    for b in range(2):
        ref, _ = fusion.cross_attention_aggregate(f_ego[b], rows[b][mask[b]], p)
        np.testing.assert_allclose(agg.data[b], ref.data, atol=1e-12)
    assert a.data[1, 0, 1:].max() == 0.0


def test_fuse_rgb_without_collaborators_is_ego_term():
    rng = np.random.default_rng(4)
    p = {"fusion.w_ego": rng.normal(size=(5, 5)), "fusion.w_agg": rng.normal(size=(3, 5))}
    f = rng.normal(size=5)
    np.testing.assert_array_equal(fusion.fuse_rgb(f, None, p).data, (f[None] @ p["fusion.w_ego"])[0])


def test_fuse_rgb_identity_case():
    rng = np.random.default_rng(5)
    p = {"fusion.w_ego": np.eye(5), "fusion.w_agg": np.zeros((3, 5))}
    f = rng.normal(size=5)
    np.testing.assert_allclose(fusion.fuse_rgb(f, rng.normal(size=3), p).data, f, atol=1e-15)


def test_fused_rgb_is_order_independent():
    rng = np.random.default_rng(6)
    p = proj(rng) | {"fusion.w_ego": rng.normal(size=(5, 5)), "fusion.w_agg": rng.normal(size=(3, 5))}
    f, rows = rng.normal(size=5), rng.normal(size=(4, 5))
    a = fusion.fuse_rgb(f, fusion.cross_attention_aggregate(f, rows, p)[0], p).data
    b = fusion.fuse_rgb(f, fusion.cross_attention_aggregate(f, rows[::-1], p)[0], p).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def lidar_params(rng, f=4, e=6):
    return {"fusion.lidar_w": rng.normal(size=(f, e)), "fusion.lidar_b": rng.normal(size=e)}


def kp(rng, k=3, f=4):
    return KeypointMessage(np.zeros((k, 3)), np.abs(rng.normal(size=(k, f))))


def test_merge_lidar_ego_only_and_order_invariance():
    rng = np.random.default_rng(7)
    p, ego, m1, m2 = lidar_params(rng), kp(rng), kp(rng), kp(rng)
    alone = fusion.merge_lidar(ego, [], p).data
    want = ego.features.max(axis=0) @ p["fusion.lidar_w"] + p["fusion.lidar_b"]
    np.testing.assert_allclose(alone, want, atol=1e-12)
    np.testing.assert_allclose(fusion.merge_lidar(ego, [m1, m2], p).data,
                               fusion.merge_lidar(ego, [m2, m1], p).data, atol=0)
    np.testing.assert_allclose(fusion.merge_lidar(ego, [ego], p).data, alone, atol=0)


def decision_params(rng, e=6, h=(5, 4), zero=False):
    p = {}
    for key, width in (("rgb", e), ("lidar", e), ("both", 2 * e)):
        p[f"dec.in_{key}_w"], p[f"dec.in_{key}_b"] = rng.normal(size=(width, h[0])), rng.normal(size=h[0])
    p.update({"dec.h_w": rng.normal(size=h), "dec.h_b": rng.normal(size=h[1]),
              "dec.out_w": rng.normal(size=(h[1], 2)), "dec.out_b": rng.normal(size=2)})
    return {k: v * 0 for k, v in p.items()} if zero else p


def test_zero_decision_head_is_indifferent():
    rng = np.random.default_rng(8)
    logits, pb = fusion.decide(rng.normal(size=6), rng.normal(size=6), decision_params(rng, zero=True))
    np.testing.assert_array_equal(logits.data, [0.0, 0.0])
    assert float(pb.data) == 0.5


def test_decide_routes_by_arity_and_rejects_nothing():
    rng = np.random.default_rng(9)
    p = decision_params(rng)
    for args in ((rng.normal(size=6), None), (None, rng.normal(size=6)), (rng.normal(size=(3, 6)), None)):
        logits, pb = fusion.decide(*args, p)
        assert logits.shape[-1] == 2 and np.all((pb.data > 0) & (pb.data < 1))
    with pytest.raises(ValueError):
        fusion.decide(None, None, p)


def test_shift_of_logits_leaves_p_brake():
    z = np.array([[0.3, -1.2], [2.0, 0.5]])
    p1 = T.softmax(Tensor(z)).data[:, 1]
    p2 = T.softmax(Tensor(z + 7.5)).data[:, 1]
    np.testing.assert_allclose(p1, p2, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_attention_and_head_gradients(seed):
    graph, inputs = attention_decide_case(np.random.default_rng(seed))
    assert T.finite_diff_check(graph, inputs) < 1e-4


@pytest.mark.parametrize("p,y,want", [(0.5, 1, 0.693147), (0.9, 1, 0.105361), (0.9, 0, 2.302585)])
def test_bce_values(p, y, want):
    assert float(fusion.bce_loss(np.array([p]), [y]).data) == pytest.approx(want, abs=1e-6)


def test_bce_boundaries_are_clamped():
    val = float(fusion.bce_loss(np.array([0.0, 1.0]), [1, 0]).data)
    assert np.isfinite(val) and val == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_fusion_shapes_follow_config():
    s = fusion.fusion_shapes(FusionConfig(), ("rgb", "lidar"), 16)
    assert s["fusion.w_ego"] == (256, 256) and s["fusion.w_agg"] == (256, 256)
    assert s["dec.in_both_w"] == (512, 64) and s["dec.out_w"] == (32, 2)
    s = fusion.fusion_shapes(FusionConfig(d=32), ("rgb",), 16)
    assert s["fusion.wq"] == (256, 32) and s["fusion.w_agg"] == (32, 256)
