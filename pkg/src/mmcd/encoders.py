"""Per-vehicle encoders and shareable feature messages.

The grid encoder splits the occupancy grid into patch tokens, runs one head
of self-attention over them, two affine+ReLU token stages, mean-pools, and
projects to the embedding size. The point encoder is a per-point MLP whose
keypoint features are max-pooled and projected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import EncoderConfig
from .sensors import Grid, PointSet, stride_select
from .tensor import Tensor

FLOAT_BYTES = 4


@dataclass
class KeypointMessage:
    positions: np.ndarray  # (K_p, 3); third coordinate is 0 in the 2-D world
    features: np.ndarray  # (K_p, F_d)

    @property
    def n_floats(self) -> int:
        return self.positions.size + self.features.size


@dataclass
class FeatureMessage:
    sender: int
    modality: str  # "rgb" or "lidar"
    payload: np.ndarray | KeypointMessage

    @property
    def byte_size(self) -> int:
        return message_bytes(self)


def message_bytes(msg: FeatureMessage) -> int:
    """Bytes on the wire: 4 per float32 entry."""
    if isinstance(msg.payload, KeypointMessage):
        return FLOAT_BYTES * msg.payload.n_floats
    return FLOAT_BYTES * int(np.asarray(msg.payload).size)


def keypoint_message_floats(cfg: EncoderConfig) -> int:
    return cfg.keypoints * (cfg.feat_dim + 3)


# --- parameters -----------------------------------------------------------

def rgb_encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    n_tok = (cfg.grid_size // cfg.patch) ** 2
    d_in = cfg.patch * cfg.patch * cfg.grid_channels
    dm = cfg.d_model
    shapes = {
        "rgb_enc.patch_w": (d_in, dm), "rgb_enc.patch_b": (dm,), "rgb_enc.pos": (n_tok, dm),
    }
    if cfg.self_attention:
        shapes.update({"rgb_enc.wq": (dm, dm), "rgb_enc.wk": (dm, dm),
                       "rgb_enc.wv": (dm, dm), "rgb_enc.wo": (dm, dm)})
    shapes.update({
        "rgb_enc.mlp1_w": (dm, dm), "rgb_enc.mlp1_b": (dm,),
        "rgb_enc.mlp2_w": (dm, dm), "rgb_enc.mlp2_b": (dm,),
        "rgb_enc.out_w": (dm, cfg.embed_dim), "rgb_enc.out_b": (cfg.embed_dim,),
    })
    return shapes


def point_encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {
        "pt_enc.w1": (2, cfg.point_hidden), "pt_enc.b1": (cfg.point_hidden,),
        "pt_enc.w2": (cfg.point_hidden, cfg.feat_dim), "pt_enc.b2": (cfg.feat_dim,),
        "pt_enc.out_w": (cfg.feat_dim, cfg.embed_dim), "pt_enc.out_b": (cfg.embed_dim,),
    }


def glorot_init(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)) for matrices; zero
    vectors; small uniform for positional tables."""
    out = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            if name.endswith(".pos"):
                a = 0.1
            out[name] = rng.uniform(-a, a, size=shape)
    return out


def _p(params: Mapping[str, Tensor | np.ndarray], name: str) -> Tensor:
    v = params[name]
    return v if isinstance(v, Tensor) else Tensor(v)


# --- grid encoder ---------------------------------------------------------

def patchify(cells: np.ndarray, patch: int) -> np.ndarray:
    """(..., G, G, C) grid -> (..., T, P*P*C) patch rows, row-major patches."""
    *lead, g, _, c = cells.shape
    n = g // patch
    x = cells.reshape(*lead, n, patch, n, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., n, n, P, P, C)
    return x.reshape(*lead, n * n, patch * patch * c)


def self_attention(tokens: Tensor, params, prefix: str = "rgb_enc.") -> Tensor:
    """Single-head scaled dot-product self-attention with output projection.

    ``tokens`` is (..., T, d_model); the result has the same shape.
    """
    q = T.matmul(tokens, _p(params, prefix + "wq"))
    k = T.matmul(tokens, _p(params, prefix + "wk"))
    v = T.matmul(tokens, _p(params, prefix + "wv"))
    d_k = q.shape[-1]
    weights = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k)))
    return T.matmul(T.matmul(weights, v), _p(params, prefix + "wo"))


def encode_patches(params, patches: Tensor | np.ndarray, cfg: EncoderConfig) -> Tensor:
    """Batched grid encoder: (V, T, P*P*C) patch rows -> (V, embed_dim)."""
    x = T.as_tensor(patches)
    if x.data.ndim != 3:
        raise T.ShapeError(-1, f"expected (V, T, D) patches, got {x.shape}")
    h = T.affine(x, _p(params, "rgb_enc.patch_w"), _p(params, "rgb_enc.patch_b"))
    h = T.add(h, T.broadcast_to(_p(params, "rgb_enc.pos"), h.shape))
    if cfg.self_attention:
        h = T.add(h, self_attention(h, params))
    h = T.relu(T.affine(h, _p(params, "rgb_enc.mlp1_w"), _p(params, "rgb_enc.mlp1_b")))
    h = T.relu(T.affine(h, _p(params, "rgb_enc.mlp2_w"), _p(params, "rgb_enc.mlp2_b")))
    pooled = T.mean(h, axis=1)
    return T.affine(pooled, _p(params, "rgb_enc.out_w"), _p(params, "rgb_enc.out_b"))


def encode_grid(params, grid: Grid | np.ndarray, cfg: EncoderConfig = EncoderConfig()) -> Tensor:
    """One grid -> (embed_dim,) embedding."""
    cells = grid.cells if isinstance(grid, Grid) else np.asarray(grid)
    want = (cfg.grid_size, cfg.grid_size, cfg.grid_channels)
    if cells.shape != want:
        raise T.ShapeError(-1, f"grid shape {cells.shape} does not match config {want}")
    out = encode_patches(params, patchify(cells, cfg.patch)[None], cfg)
    return T.reshape(out, (cfg.embed_dim,))


# --- point encoder --------------------------------------------------------

def select_keypoints(points: np.ndarray, mask: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """Stride-uniform selection of ``k`` valid points (repeat-padded).

    Returns ``(positions (k, 2), valid)``; an empty set yields zeros and False.
    """
    valid = np.asarray(points)[np.asarray(mask, dtype=bool)]
    if len(valid) == 0:
        return np.zeros((k, 2)), False
    return valid[stride_select(len(valid), k)], True


def point_features(params, positions: Tensor | np.ndarray, cfg: EncoderConfig) -> Tensor:
    """Per-point MLP 2 -> h -> F_d with ReLU after both layers (features >= 0,
    so all-zero rows are neutral under max-pooling)."""
    x = T.scale(T.as_tensor(positions), cfg.point_scale)
    h = T.relu(T.affine(x, _p(params, "pt_enc.w1"), _p(params, "pt_enc.b1")))
    return T.relu(T.affine(h, _p(params, "pt_enc.w2"), _p(params, "pt_enc.b2")))


def pool_project(features: Tensor, params, w: str = "pt_enc.out_w", b: str = "pt_enc.out_b") -> Tensor:
    """Max over the row axis (-2) then affine to the embedding size."""
    pooled = T.max_(features, axis=features.data.ndim - 2)
    if pooled.data.ndim == 1:
        pooled = T.reshape(pooled, (1, pooled.shape[0]))
        return T.reshape(T.affine(pooled, _p(params, w), _p(params, b)), (params[w].shape[1],))
    return T.affine(pooled, _p(params, w), _p(params, b))


def encode_points(params, points: PointSet, cfg: EncoderConfig = EncoderConfig(),
                  full_pool: bool = False) -> tuple[KeypointMessage, Tensor]:
    """PointSet -> (keypoint message, embedding).

    ``full_pool`` bypasses keypoint selection and pools over every valid
    point (the message then still carries the selected keypoints).
    """
    positions, ok = select_keypoints(points.points, points.mask, cfg.keypoints)
    if ok:
        feats = point_features(params, positions, cfg)
        kp_feats = feats.data
    else:
        kp_feats = np.zeros((cfg.keypoints, cfg.feat_dim))
        feats = Tensor(kp_feats)
    if full_pool and ok:
        feats = point_features(params, points.valid, cfg)
    msg = KeypointMessage(np.concatenate([positions, np.zeros((cfg.keypoints, 1))], axis=1), np.array(kp_feats))
    return msg, pool_project(feats, params)
