"""Collaborator aggregation, modality fusion and the brake-decision head.

RGB side: the ego embedding queries the collaborators' embeddings,

    Q = f_ego W_Q,  K = F W_K,  V = F W_V,  A = softmax(Q K^T / sqrt(d)),
    f_agg = A V,    f_rgb = f_ego W_ego + f_agg W_agg.

W_ego is 256x256 and W_agg is d x 256 so the sum is well typed for any d.
LiDAR side: keypoint rows from every vehicle are pooled by element-wise max.
"""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import FusionConfig
from .encoders import KeypointMessage, _p
from .tensor import Tensor

MASKED = -1e9


def attention_scale(d: int) -> float:
    """Multiplier applied to attention logits."""
    return 1.0 / math.sqrt(d)


def fusion_shapes(cfg: FusionConfig, modalities: Sequence[str], feat_dim: int) -> dict[str, tuple[int, ...]]:
    e, d = cfg.embed_dim, cfg.d
    shapes: dict[str, tuple[int, ...]] = {}
    if "rgb" in modalities:
        if cfg.aggregator == "cross_attention":
            shapes.update({"fusion.wq": (e, d), "fusion.wk": (e, d), "fusion.wv": (e, d),
                           "fusion.w_ego": (e, e), "fusion.w_agg": (d, e)})
        else:
            shapes["fusion.w_cat"] = (2 * e, e)
    if "lidar" in modalities:
        shapes.update({"fusion.lidar_w": (feat_dim, e), "fusion.lidar_b": (e,)})
    h1, h2 = cfg.hidden
    key = "both" if len(modalities) == 2 else modalities[0]
    shapes.update({
        f"dec.in_{key}_w": (e * len(modalities), h1), f"dec.in_{key}_b": (h1,),
        "dec.h_w": (h1, h2), "dec.h_b": (h2,),
        "dec.out_w": (h2, 2), "dec.out_b": (2,),
    })
    return shapes


def cross_attention_aggregate(f_ego, f_collab, params, mask: np.ndarray | None = None,
                              scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Ego-query attention over collaborator rows.

    Unbatched: ``f_ego`` (256,), ``f_collab`` (N, 256) -> f_agg (d,), A (1, N).
    Batched: (B, 256) and (B, N, 256) -> (B, d), (B, 1, N); ``mask`` (B, N)
    marks real collaborators, padded rows receive zero weight.
    """
    f_ego, f_collab = T.as_tensor(f_ego), T.as_tensor(f_collab)
    batched = f_ego.data.ndim == 2
    if f_collab.shape[-2] == 0:
        raise ValueError("cross-attention needs at least one collaborator; use the ego-only path")
    wq, wk, wv = _p(params, "fusion.wq"), _p(params, "fusion.wk"), _p(params, "fusion.wv")
    d = wq.shape[1]
    if scale is None:
        scale = attention_scale(d)
    if batched:
        q = T.reshape(T.matmul(f_ego, wq), (f_ego.shape[0], 1, d))
    else:
        q = T.reshape(T.matmul(T.reshape(f_ego, (1, f_ego.shape[0])), wq), (1, d))
    k = T.matmul(f_collab, wk)
    v = T.matmul(f_collab, wv)
    logits = T.scale(T.matmul(q, T.transpose(k)), scale)
    if mask is not None:
        bias = np.where(np.asarray(mask, dtype=bool), 0.0, MASKED).reshape(logits.shape)
        logits = T.add(logits, Tensor(bias))
    a = T.softmax(logits)
    agg = T.matmul(a, v)
    agg = T.reshape(agg, (agg.shape[0], d) if batched else (d,))
    return agg, a


def fuse_rgb(f_ego, f_agg, params) -> Tensor:
    """f_ego W_ego (+ f_agg W_agg when collaborators are present)."""
    f_ego = T.as_tensor(f_ego)
    single = f_ego.data.ndim == 1
    if single:
        f_ego = T.reshape(f_ego, (1, f_ego.shape[0]))
    out = T.matmul(f_ego, _p(params, "fusion.w_ego"))
    if f_agg is not None:
        f_agg = T.as_tensor(f_agg)
        if single:
            f_agg = T.reshape(f_agg, (1, f_agg.shape[0]))
        out = T.add(out, T.matmul(f_agg, _p(params, "fusion.w_agg")))
    return T.reshape(out, (out.shape[1],)) if single else out


def fuse_concat(f_ego, f_collab, params, mask: np.ndarray | None = None) -> Tensor:
    """Ablation: [f_ego || mean of collaborator rows] W_cat (batched)."""
    f_ego, f_collab = T.as_tensor(f_ego), T.as_tensor(f_collab)
    b, n = f_collab.shape[0], f_collab.shape[1]
    m = np.ones((b, n)) if mask is None else np.asarray(mask, dtype=np.float64)
    counts = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    weights = Tensor((m / counts).reshape(b, 1, n))
    mean = T.reshape(T.matmul(weights, f_collab), (b, f_collab.shape[2]))
    return T.matmul(T.concat([f_ego, mean]), _p(params, "fusion.w_cat"))


def merge_lidar(ego_msg, collab_msgs: Sequence, params) -> Tensor:
    """Union of keypoint feature rows, element-wise max, affine to 256.

    Accepts :class:`KeypointMessage` objects or feature Tensors of shape
    (K, F). Batched callers pass a single (B, R, F) Tensor as ``ego_msg``
    holding every vehicle's rows.
    """
    def feats(m):
        return Tensor(m.features) if isinstance(m, KeypointMessage) else T.as_tensor(m)

    rows = feats(ego_msg)
    if rows.data.ndim == 3:
        pooled = T.max_(rows, axis=1)
        return T.affine(pooled, _p(params, "fusion.lidar_w"), _p(params, "fusion.lidar_b"))
    parts = [rows] + [feats(m) for m in collab_msgs]
    stacked = T.transpose(T.concat([T.transpose(p) for p in parts]))
    pooled = T.reshape(T.max_(stacked, axis=0), (1, rows.shape[1]))
    out = T.affine(pooled, _p(params, "fusion.lidar_w"), _p(params, "fusion.lidar_b"))
    return T.reshape(out, (out.shape[1],))


def decide(f_rgb, f_lidar, params) -> tuple[Tensor, Tensor]:
    """Three-layer MLP -> (logits (..., 2), p_brake (...,)).

    The input layer is chosen by which embeddings are present; the two deeper
    layers are shared.
    """
    if f_rgb is None and f_lidar is None:
        raise ValueError("decide needs at least one embedding")
    parts = [T.as_tensor(f) for f in (f_rgb, f_lidar) if f is not None]
    key = "both" if len(parts) == 2 else ("rgb" if f_rgb is not None else "lidar")
    x = parts[0] if len(parts) == 1 else T.concat(parts)
    single = x.data.ndim == 1
    if single:
        x = T.reshape(x, (1, x.shape[0]))
    h = T.relu(T.affine(x, _p(params, f"dec.in_{key}_w"), _p(params, f"dec.in_{key}_b")))
    h = T.relu(T.affine(h, _p(params, "dec.h_w"), _p(params, "dec.h_b")))
    logits = T.affine(h, _p(params, "dec.out_w"), _p(params, "dec.out_b"))
    p = T.softmax(logits)
    p_brake = T.slice_(p, (slice(None), 1))
    if single:
        return T.reshape(logits, (2,)), T.reshape(p_brake, ())
    return logits, p_brake


def bce_loss(p_brake, y) -> Tensor:
    """Mean binary cross-entropy, with p clamped to [1e-7, 1 - 1e-7]."""
    p = T.clip(T.as_tensor(p_brake), 1e-7, 1.0 - 1e-7)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    yt, ny = Tensor(y), Tensor(1.0 - y)
    ll = T.add(T.mul(yt, T.log(p)), T.mul(ny, T.log(T.add_scalar(T.scale(p, -1.0), 1.0))))
    return T.scale(T.mean(ll), -1.0)


def init_identity(params: Mapping[str, np.ndarray]) -> None:
    """Helper for hand-checkable configurations: identity projections."""
    for name in ("fusion.wq", "fusion.wk", "fusion.wv", "fusion.w_ego", "fusion.w_agg"):
        if name in params:
            w = params[name]
            w[...] = np.eye(*w.shape)
