"""Frame samples, cached sensor renders, and padded training batches.

Renders are cached per (episode, frame, vehicle) in a :class:`SensorCache`
that collaborative and non-collaborative views share. Every batch request
counts the observations it touches, per modality, in ``reads``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .config import CommConfig, EncoderConfig, GridConfig, LidarConfig
from .encoders import patchify, select_keypoints
from .sensors import render_pseudo_lidar, render_pseudo_rgb
from .sim import Episode, comm_neighbors
from .world import to_local, to_world


@dataclass
class SensorCache:
    grid: GridConfig = field(default_factory=GridConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    keypoints: int = 16
    _grids: dict = field(default_factory=dict)
    _points: dict = field(default_factory=dict)

    def grid_labels(self, key, world, vid) -> np.ndarray:
        """(G, G) uint8 channel index of the one-hot grid."""
        k = (key, vid)
        if k not in self._grids:
            cells = render_pseudo_rgb(world, vid, self.grid).cells
            self._grids[k] = np.argmax(cells, axis=-1).astype(np.uint8)
        return self._grids[k]

    def keypoints_local(self, key, world, vid) -> tuple[np.ndarray, bool]:
        """Sender-side keypoint selection, in the sender's own frame."""
        k = (key, vid)
        if k not in self._points:
            ps = render_pseudo_lidar(world, vid, self.lidar)
            self._points[k] = select_keypoints(ps.points, ps.mask, self.keypoints)
        return self._points[k]


class ObservationStore:
    """Per-frame samples of a list of episodes.

    ``collaborative=False`` forces every sample to N=0 collaborators without
    consulting the communication model.
    """

    def __init__(self, episodes: list[Episode], comm: CommConfig = CommConfig(),
                 encoder: EncoderConfig = EncoderConfig(), cache: SensorCache | None = None,
                 collaborative: bool = True, frame_stride: int = 1):
        self.episodes = episodes
        self.encoder = encoder
        self.cache = cache or SensorCache(keypoints=encoder.keypoints)
        self.collaborative = collaborative
        self.reads: Counter = Counter()
        self.samples: list[tuple[int, int]] = []
        self.collabs: list[list[int]] = []
        labels = []
        for ei, ep in enumerate(episodes):
            for fi in range(0, len(ep.frames), frame_stride):
                frame = ep.frames[fi]
                self.samples.append((ei, fi))
                self.collabs.append(comm_neighbors(frame.world, comm) if collaborative else [])
                labels.append(1.0 if frame.label == "brake" else 0.0)
        self.labels = np.array(labels)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx) -> "ObservationStore":
        """View over the chosen samples; shares the render cache, fresh read counts."""
        view = object.__new__(ObservationStore)
        view.__dict__.update(self.__dict__)
        idx = [int(i) for i in idx]
        view.samples = [self.samples[i] for i in idx]
        view.collabs = [self.collabs[i] for i in idx]
        view.labels = self.labels[idx]
        view.reads = Counter()
        return view

    def _frame(self, i):
        ei, fi = self.samples[i]
        ep = self.episodes[ei]
        return (ep.episode_id, fi), ep.frames[fi].world

    def _one_hot(self, labels: np.ndarray) -> np.ndarray:
        return np.eye(3)[labels]

    def rgb_batch(self, idx) -> dict:
        """Ego patches (B, T, D), collaborator patches (Nc, T, D) and a
        (B, Nmax) index/mask into the concatenation [ego; collaborators]."""
        idx = list(idx)
        p = self.encoder.patch
        ego, collab = [], []
        nmax = max((len(self.collabs[i]) for i in idx), default=0)
        index = np.zeros((len(idx), nmax), dtype=np.int64)
        mask = np.zeros((len(idx), nmax), dtype=bool)
        for b, i in enumerate(idx):
            key, world = self._frame(i)
            ego.append(self.cache.grid_labels(key, world, world.ego.id))
            for j, vid in enumerate(self.collabs[i]):
                collab.append(self.cache.grid_labels(key, world, vid))
                index[b, j] = len(idx) + len(collab) - 1
                mask[b, j] = True
        self.reads["rgb"] += len(ego) + len(collab)
        grids = np.stack(ego + collab)
        return {"patches": patchify(self._one_hot(grids), p), "n_ego": len(idx),
                "index": index, "mask": mask}

    def lidar_batch(self, idx) -> dict:
        """Keypoints of ego and collaborators in the ego frame,
        (B, 1 + Nmax, K, 2), with a (B, 1 + Nmax) validity mask."""
        idx = list(idx)
        k = self.encoder.keypoints
        nmax = max((len(self.collabs[i]) for i in idx), default=0)
        kp = np.zeros((len(idx), 1 + nmax, k, 2))
        valid = np.zeros((len(idx), 1 + nmax), dtype=bool)
        n = 0
        for b, i in enumerate(idx):
            key, world = self._frame(i)
            ego = world.ego
            for j, vid in enumerate([ego.id] + self.collabs[i]):
                pts, ok = self.cache.keypoints_local(key, world, vid)
                n += 1
                if not ok:
                    continue
                if vid != ego.id:
                    sender = world.get(vid)
                    pts = to_local(to_world(pts, sender.pose), ego.pose)
                kp[b, j] = pts
                valid[b, j] = True
        self.reads["lidar"] += n
        return {"keypoints": kp, "valid": valid}

    def batch(self, idx, modalities) -> dict:
        idx = list(idx)
        out = {"labels": self.labels[idx]}
        if "rgb" in modalities:
            out["rgb"] = self.rgb_batch(idx)
        if "lidar" in modalities:
            out["lidar"] = self.lidar_batch(idx)
        return out
