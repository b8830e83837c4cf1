"""Synthetic observations by 2-D ray casting.

* ``render_pseudo_rgb``: an ego-centric semantic occupancy grid over the
  front semicircle with channels (vehicle, free, unknown).
* ``render_pseudo_lidar``: first-hit boundary points over the full circle.

Occlusion is applied consistently: a vehicle outside the observer's
``visible_set`` still blocks rays but never produces vehicle cells or points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import GridConfig, LidarConfig
from .world import VehicleState, WorldState, ray_hits, segment_hits_rect, to_local

VEHICLE, FREE, UNKNOWN = 0, 1, 2
SENTINEL = 0.0


@dataclass
class Grid:
    cells: np.ndarray  # (G, G, 3): rows forward, columns left-to-right
    cell_m: float

    def to_json(self) -> list:
        return np.round(self.cells, 6).tolist()


@dataclass
class PointSet:
    points: np.ndarray  # (M, 2) observer frame; masked rows hold SENTINEL
    mask: np.ndarray  # (M,) bool

    @property
    def valid(self) -> np.ndarray:
        return self.points[self.mask]

    def to_json(self) -> dict:
        return {"points": np.round(self.points, 6).tolist(), "mask": self.mask.astype(int).tolist()}


def visible_set(observer: VehicleState, world: WorldState, max_range: float | None = None) -> set[int]:
    """Ids of vehicles the observer can see.

    A target is visible when the segment between the two centres touches no
    other ground vehicle. Aerial observers (and aerial targets) are never
    occluded. ``max_range`` limits the centre distance when given.
    """
    origin = observer.position
    ground = [v for v in world.vehicles if not v.aerial and v.id != observer.id]
    seen = set()
    for target in world.vehicles:
        if target.id == observer.id:
            continue
        if max_range is not None and np.hypot(*(target.position - origin)) > max_range:
            continue
        if observer.aerial or target.aerial:
            seen.add(target.id)
            continue
        if not any(segment_hits_rect(origin, target.position, b) for b in ground if b.id != target.id):
            seen.add(target.id)
    return seen


def _blockers(world: WorldState, observer: VehicleState) -> list[VehicleState]:
    return [v for v in world.vehicles if v.id != observer.id and not v.aerial]


def _contains(r: VehicleState, p) -> bool:
    q = to_local(np.asarray(p, dtype=float).reshape(1, 2), r.pose)[0]
    return abs(q[0]) <= r.half_extent[0] and abs(q[1]) <= r.half_extent[1]


def cell_centers(cfg: GridConfig) -> np.ndarray:
    """Observer-frame centres of every grid cell, shape (G, G, 2)."""
    g = cfg.size
    x = (np.arange(g) + 0.5) * cfg.cell_m
    y = (g / 2 - np.arange(g) - 0.5) * cfg.cell_m
    return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)


def _cell_index(p: np.ndarray, cfg: GridConfig) -> tuple[int, int] | None:
    i = math.floor(p[0] / cfg.cell_m)
    j = math.floor(cfg.size / 2 - p[1] / cfg.cell_m)
    if 0 <= i < cfg.size and 0 <= j < cfg.size:
        return i, j
    return None


def render_pseudo_rgb(world: WorldState, vehicle_id: int, cfg: GridConfig = GridConfig()) -> Grid:
    obs = world.get(vehicle_id)
    centers = cell_centers(cfg)
    r = np.hypot(centers[..., 0], centers[..., 1])
    cells = np.zeros((cfg.size, cfg.size, 3))
    labels = np.full((cfg.size, cfg.size), UNKNOWN)
    visible = visible_set(obs, world, cfg.range_m)

    if obs.aerial:
        labels[r <= cfg.range_m] = FREE
        for v in world.vehicles:
            if v.id == obs.id or v.id not in visible:
                continue
            local = to_local(v.position, obs.pose)
            hit = _cell_index(local, cfg)
            labels[_cells_in_rect(centers, obs.pose, v)] = VEHICLE
            if hit is not None:
                labels[hit] = VEHICLE
    else:
        nb = cfg.n_bearings
        phis = -math.pi / 2 + (np.arange(nb) + 0.5) * math.pi / nb
        heading = obs.pose[2]
        dirs = np.stack([np.cos(phis + heading), np.sin(phis + heading)], axis=-1)
        rects = _blockers(world, obs)
        dist, which = ray_hits(obs.position, dirs, rects)
        phi_cell = np.arctan2(centers[..., 1], centers[..., 0])
        b = np.clip(np.floor((phi_cell + math.pi / 2) / (math.pi / nb)).astype(int), 0, nb - 1)
        free = (r <= cfg.range_m) & (r < dist[b])
        labels[free] = FREE
        for k in range(nb):
            if which[k] < 0 or dist[k] > cfg.range_m or rects[which[k]].id not in visible:
                continue
            p = dist[k] * np.array([math.cos(phis[k]), math.sin(phis[k])])
            idx = _cell_index(p, cfg)
            if idx is not None:
                labels[idx] = VEHICLE
    cells[labels == VEHICLE, VEHICLE] = 1.0
    cells[labels == FREE, FREE] = 1.0
    cells[labels == UNKNOWN, UNKNOWN] = 1.0
    return Grid(cells, cfg.cell_m)


def _cells_in_rect(centers: np.ndarray, pose, v: VehicleState) -> np.ndarray:
    x, y, h = pose
    c, s = math.cos(h), math.sin(h)
    wx = c * centers[..., 0] - s * centers[..., 1] + x
    wy = s * centers[..., 0] + c * centers[..., 1] + y
    q = to_local(np.stack([wx, wy], axis=-1), v.pose)
    return (np.abs(q[..., 0]) <= v.half_extent[0]) & (np.abs(q[..., 1]) <= v.half_extent[1])


def lidar_bearings(n: int) -> np.ndarray:
    return np.arange(n) * (2 * math.pi / n)


def stride_select(n: int, k: int) -> np.ndarray:
    """``k`` stride-uniform indices into ``range(n)``; repeats when ``n < k``."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return (np.arange(k) * n) // k


def render_pseudo_lidar(world: WorldState, vehicle_id: int, cfg: LidarConfig = LidarConfig()) -> PointSet:
    obs = world.get(vehicle_id)
    phis = lidar_bearings(cfg.n_bearings)
    heading = obs.pose[2]
    dirs = np.stack([np.cos(phis + heading), np.sin(phis + heading)], axis=-1)
    local_dirs = np.stack([np.cos(phis), np.sin(phis)], axis=-1)
    visible = visible_set(obs, world, cfg.range_m)
    rects = [v for v in _blockers(world, obs) if v.id in visible] if obs.aerial else _blockers(world, obs)
    # a body overlapping the mount point (a collision) has no surface to return
    rects = [v for v in rects if not _contains(v, obs.position)]

    hits: list[np.ndarray] = []
    if obs.aerial:
        # elevated observer: every rectangle returns its own near face
        per_rect = [ray_hits(obs.position, dirs, [v])[0] for v in rects]
        for k in range(cfg.n_bearings):
            for d in sorted(d[k] for d in per_rect if d[k] <= cfg.range_m):
                hits.append(d * local_dirs[k])
    else:
        dist, which = ray_hits(obs.position, dirs, rects)
        for k in range(cfg.n_bearings):
            if which[k] >= 0 and dist[k] <= cfg.range_m and rects[which[k]].id in visible:
                hits.append(dist[k] * local_dirs[k])

    m = cfg.max_points
    points = np.full((m, 2), SENTINEL)
    mask = np.zeros(m, dtype=bool)
    if hits:
        arr = np.array(hits)
        if len(arr) > m:
            arr = arr[stride_select(len(arr), m)]
        points[:len(arr)] = arr
        mask[:len(arr)] = True
    return PointSet(points, mask)
