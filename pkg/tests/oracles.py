"""Independent geometric oracles shared by the unit and acceptance tests."""
import math

import numpy as np

from mmcd.config import GridConfig, LidarConfig
from mmcd.sensors import VEHICLE, cell_centers, render_pseudo_lidar, render_pseudo_rgb, visible_set
from mmcd.world import to_local, to_world


def _local(points, r):
    q = to_local(np.asarray(points, dtype=float).reshape(-1, 2), r.pose)
    return np.abs(q[:, 0]), np.abs(q[:, 1])


def rect_distance(points, r) -> np.ndarray:
    """Euclidean distance of each point to the (filled) rectangle ``r``."""
    qx, qy = _local(points, r)
    return np.hypot(np.maximum(qx - r.half_extent[0], 0.0), np.maximum(qy - r.half_extent[1], 0.0))


def on_boundary(points, r, tol=1e-6) -> np.ndarray:
    qx, qy = _local(points, r)
    hl, hw = r.half_extent
    inside = (qx <= hl + tol) & (qy <= hw + tol)
    deep = (qx < hl - tol) & (qy < hw - tol)
    return inside & ~deep


def leaks(world, vid, grid=GridConfig(), lidar=LidarConfig()) -> list[str]:
    """Vehicle cells or LiDAR points that only a hidden vehicle could explain."""
    obs = world.get(vid)
    others = [v for v in world.vehicles if v.id != vid]
    out = []
    seen = visible_set(obs, world, lidar.range_m)
    pts = to_world(render_pseudo_lidar(world, vid, lidar).valid, obs.pose)
    if len(pts):
        explained = np.zeros(len(pts), dtype=bool)
        for v in others:
            if v.id in seen:
                explained |= on_boundary(pts, v)
        for p in pts[~explained]:
            owners = [v.id for v in others if on_boundary(p, v)[0]]
            out.append(f"lidar point {p.round(3).tolist()} owned by {owners}")
    seen = visible_set(obs, world, grid.range_m)
    cells = render_pseudo_rgb(world, vid, grid).cells
    hit = np.nonzero(cells[..., VEHICLE] > 0)
    if len(hit[0]):
        centers = to_world(cell_centers(grid), obs.pose)[hit]
        reach = grid.cell_m / math.sqrt(2) + 1e-9
        explained = np.zeros(len(centers), dtype=bool)
        for v in others:
            if v.id in seen:
                explained |= rect_distance(centers, v) <= reach
        for i, j in zip(hit[0][~explained], hit[1][~explained]):
            out.append(f"vehicle cell {(int(i), int(j))}")
    return out


def exhaustive_leak_check(episodes, grid=GridConfig(), lidar=LidarConfig()):
    """(checked renders, violations) over every frame and every vehicle."""
    checked, bad = 0, []
    for ep in episodes:
        for k, f in enumerate(ep.frames):
            for v in f.world.vehicles:
                for msg in leaks(f.world, v.id, grid, lidar):
                    bad.append(f"{ep.episode_id} frame {k} observer {v.id}: {msg}")
                checked += 1
    return checked, bad
