"""Dataclass configs. Defaults follow the reference experiment setup
(t=3.0, alpha=0.5, lr=1e-3, batch 32, 200 epochs, tau=150 m, four
collaborators, 256-d embeddings)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

SCENARIOS = ("overtake", "left_turn", "red_light")


@dataclass
class SimConfig:
    dt: float = 0.1
    n_frames: int = 80
    hazard_prob: float = 1.0
    # chance that a present hazard is timed onto a collision course; left_turn
    # always conflicts
    conflict_prob: float = 0.4
    horizon: float = 3.0
    d_safe: float = 4.0
    n_background: int = 0
    aerial_collaborator: bool = False
    min_occluded_fraction: float = 0.5
    sensor_range: float = 80.0


@dataclass
class CommConfig:
    tau: float = 150.0
    max_collaborators: int = 4

    def __post_init__(self):
        if self.tau <= 0 or self.max_collaborators < 0:
            raise ValueError(f"invalid CommConfig {self}")


@dataclass
class GridConfig:
    size: int = 32
    cell_m: float = 2.0
    n_bearings: int = 180
    range_m: float = 60.0


@dataclass
class LidarConfig:
    n_bearings: int = 360
    max_points: int = 64
    range_m: float = 80.0


@dataclass
class EncoderConfig:
    grid_size: int = 32
    grid_channels: int = 3
    patch: int = 8
    d_model: int = 32
    embed_dim: int = 256
    self_attention: bool = True
    point_hidden: int = 32
    keypoints: int = 16
    feat_dim: int = 16
    point_scale: float = 1.0 / 80.0

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls(keypoints=128, feat_dim=128)


@dataclass
class FusionConfig:
    embed_dim: int = 256
    d: int = 256
    hidden: tuple[int, int] = (64, 32)
    aggregator: str = "cross_attention"  # or "concat"

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("attention dim d must be positive")
        if self.aggregator not in ("cross_attention", "concat"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")


@dataclass
class DistillConfig:
    temperature: float = 3.0
    alpha: float = 0.5
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    cache_teacher: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    comm: CommConfig = field(default_factory=CommConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: DistillConfig = field(default_factory=DistillConfig)
    scenarios: tuple[str, ...] = SCENARIOS
    episodes: int = 24
    train_count: int = 12
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    data_seed: int = 7
    frame_stride: int = 1
    # "pooled": one model per (case, seed) over every scenario's train split;
    # "per_scenario": one model per (case, scenario, seed)
    train_scope: str = "per_scenario"

    def __post_init__(self):
        if self.train_scope not in ("pooled", "per_scenario"):
            raise ValueError(f"unknown train_scope {self.train_scope!r}")
        unknown = set(self.scenarios) - set(SCENARIOS)
        if unknown:
            raise ValueError(f"unknown scenarios {sorted(unknown)}")
        if not 0 <= self.train_count <= self.episodes:
            raise ValueError("train_count must lie in [0, episodes]")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        return _build(cls, d)

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides (values parsed as JSON)."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, d: dict[str, Any]):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for name, value in d.items():
        if name not in hints:
            raise ValueError(f"unknown config key {name!r} for {cls.__name__}")
        default = hints[name].default_factory() if hints[name].default_factory is not dataclasses.MISSING \
            else hints[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
