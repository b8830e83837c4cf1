"""Complete decision model (encoders + fusion + head) over padded batches."""
from __future__ import annotations

import hashlib
from dataclasses import asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import EncoderConfig, FusionConfig
from .encoders import encode_patches, glorot_init, point_encoder_shapes, point_features, rgb_encoder_shapes
from .fusion import cross_attention_aggregate, decide, fuse_concat, fuse_rgb, fusion_shapes, merge_lidar
from .tensor import ParamStore, Tensor

MODALITY_ORDER = ("rgb", "lidar")


def normalize_modalities(modalities: Sequence[str]) -> tuple[str, ...]:
    mods = tuple(m for m in MODALITY_ORDER if m in set(modalities))
    if not mods or len(mods) != len(set(modalities)):
        raise ValueError(f"modalities must be a non-empty subset of {MODALITY_ORDER}, got {modalities}")
    return mods


class Model:
    """Parameters plus a batched forward pass for one modality signature."""

    def __init__(self, modalities: Sequence[str], encoder: EncoderConfig = EncoderConfig(),
                 fusion: FusionConfig = FusionConfig(), seed: int = 0):
        self.modalities = normalize_modalities(modalities)
        self.encoder = encoder
        self.fusion = fusion
        shapes: dict[str, tuple[int, ...]] = {}
        if "rgb" in self.modalities:
            shapes.update(rgb_encoder_shapes(encoder))
        if "lidar" in self.modalities:
            shapes.update({k: v for k, v in point_encoder_shapes(encoder).items() if ".out_" not in k})
        shapes.update(fusion_shapes(fusion, self.modalities, encoder.feat_dim))
        self.store = ParamStore(shapes)
        init = glorot_init(shapes, np.random.default_rng(seed))
        for name, value in init.items():
            self.store[name][...] = value

    def forward(self, params: Mapping[str, Tensor | np.ndarray], batch: Mapping) -> Tensor:
        """Logits (B, 2). ``batch`` must carry every modality of the model."""
        f_rgb = self._rgb(params, batch["rgb"]) if "rgb" in self.modalities else None
        f_lidar = self._lidar(params, batch["lidar"]) if "lidar" in self.modalities else None
        logits, _ = decide(f_rgb, f_lidar, params)
        return logits

    def _rgb(self, params, rgb) -> Tensor:
        emb = encode_patches(params, rgb["patches"], self.encoder)
        b = rgb["n_ego"]
        f_ego = T.take(emb, np.arange(b))
        index, mask = rgb["index"], rgb["mask"]
        n = index.shape[1]
        if self.fusion.aggregator == "concat":
            if n == 0:
                zeros = Tensor(np.zeros((b, 1, self.fusion.embed_dim)))
                return fuse_concat(f_ego, zeros, params, np.zeros((b, 1)))
            f_collab = T.reshape(T.take(emb, index.reshape(-1)), (b, n, self.fusion.embed_dim))
            return fuse_concat(f_ego, f_collab, params, mask)
        if n == 0:
            return fuse_rgb(f_ego, None, params)
        f_collab = T.reshape(T.take(emb, index.reshape(-1)), (b, n, self.fusion.embed_dim))
        f_agg, _ = cross_attention_aggregate(f_ego, f_collab, params, mask)
        has = np.repeat(mask.any(axis=1, keepdims=True).astype(np.float64), f_agg.shape[1], axis=1)
        return fuse_rgb(f_ego, T.mul(f_agg, Tensor(has)), params)

    def _lidar(self, params, lidar) -> Tensor:
        kp, valid = lidar["keypoints"], lidar["valid"]
        b, v, k, _ = kp.shape
        feats = point_features(params, kp.reshape(b, v * k, 2), self.encoder)
        keep = np.repeat(valid, k, axis=1)[..., None].repeat(self.encoder.feat_dim, axis=2)
        return merge_lidar(T.mul(feats, Tensor(keep.astype(np.float64))), [], params)

    # --- persistence ---------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.store.arrays)

    def digest(self) -> str:
        return hashlib.sha256(self.store.flat.astype("<f4").tobytes()).hexdigest()

    def meta(self) -> dict:
        return {"modalities": list(self.modalities), "encoder": asdict(self.encoder),
                "fusion": asdict(self.fusion)}

    def save(self, path: str | Path, extra: Mapping | None = None) -> None:
        T.save_checkpoint(path, self.store.arrays, {**self.meta(), **dict(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        params, meta = T.load_checkpoint(path)
        fus = dict(meta["fusion"])
        fus["hidden"] = tuple(fus["hidden"])
        model = cls(meta["modalities"], EncoderConfig(**meta["encoder"]), FusionConfig(**fus))
        missing = set(model.store.names()) ^ set(params)
        if missing:
            raise ValueError(f"checkpoint {path} tensors do not match the model: {sorted(missing)}")
        for name, value in params.items():
            model.store[name][...] = value
        return model
