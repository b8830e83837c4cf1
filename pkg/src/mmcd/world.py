"""World-state value types shared by the simulator and the sensors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ROLES = ("ego", "collaborator_ground", "collaborator_aerial", "hazard", "occluder", "background")
COLLABORATOR_ROLES = ("collaborator_ground", "collaborator_aerial")

CAR = (2.3, 1.0)
TRUCK = (5.5, 1.4)


@dataclass(frozen=True)
class VehicleState:
    id: int
    pose: tuple[float, float, float]
    velocity: tuple[float, float]
    half_extent: tuple[float, float]
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if min(self.half_extent) <= 0:
            raise ValueError("half extents must be positive")
        if math.hypot(*self.velocity) > 30.0 + 1e-9:
            raise ValueError(f"vehicle {self.id} exceeds 30 m/s")

    @property
    def position(self) -> np.ndarray:
        return np.array(self.pose[:2])

    @property
    def aerial(self) -> bool:
        return self.role == "collaborator_aerial"

    def to_json(self) -> dict:
        return {"id": self.id, "role": self.role,
                "pose": [round(v, 9) for v in self.pose],
                "vel": [round(v, 9) for v in self.velocity],
                "half_extent": list(self.half_extent)}

    @classmethod
    def from_json(cls, d: dict) -> "VehicleState":
        return cls(d["id"], tuple(d["pose"]), tuple(d["vel"]), tuple(d["half_extent"]), d["role"])


@dataclass(frozen=True)
class WorldState:
    timestamp: float
    vehicles: tuple[VehicleState, ...]
    scenario: str

    def __post_init__(self):
        egos = [v for v in self.vehicles if v.role == "ego"]
        if len(egos) != 1:
            raise ValueError(f"world needs exactly one ego, found {len(egos)}")
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")

    @property
    def ego(self) -> VehicleState:
        return next(v for v in self.vehicles if v.role == "ego")

    def get(self, vehicle_id: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise KeyError(f"vehicle {vehicle_id} not in world")

    def with_role(self, role: str) -> list[VehicleState]:
        return [v for v in self.vehicles if v.role == role]


def to_local(points: np.ndarray, pose) -> np.ndarray:
    """World points (..., 2) into the frame of ``pose`` (x forward, y left)."""
    x, y, h = pose
    c, s = math.cos(h), math.sin(h)
    d = np.asarray(points, dtype=np.float64) - (x, y)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_world(points: np.ndarray, pose) -> np.ndarray:
    x, y, h = pose
    c, s = math.cos(h), math.sin(h)
    p = np.asarray(points, dtype=np.float64)
    return np.stack([c * p[..., 0] - s * p[..., 1] + x, s * p[..., 0] + c * p[..., 1] + y], axis=-1)


def ray_hits(origin, directions: np.ndarray, rects: list[VehicleState]) -> tuple[np.ndarray, np.ndarray]:
    """First intersection distance of each unit ray with a set of rectangles.

    Returns ``(dist, which)``: ``dist[b]`` is ``inf`` when ray ``b`` hits
    nothing, otherwise the distance to the nearest rectangle, whose index in
    ``rects`` is ``which[b]`` (``-1`` for misses). Rays starting inside a
    rectangle hit it at distance 0.
    """
    directions = np.asarray(directions, dtype=np.float64)
    nb = directions.shape[0]
    dist = np.full(nb, np.inf)
    which = np.full(nb, -1, dtype=np.int64)
    o = np.asarray(origin, dtype=np.float64)
    for k, r in enumerate(rects):
        t = _slab(o, directions, r)
        closer = t < dist
        dist[closer] = t[closer]
        which[closer] = k
    return dist, which


def _slab(origin: np.ndarray, directions: np.ndarray, r: VehicleState) -> np.ndarray:
    x, y, h = r.pose
    c, s = math.cos(h), math.sin(h)
    dx, dy = origin[0] - x, origin[1] - y
    ox, oy = c * dx + s * dy, -s * dx + c * dy
    ux = c * directions[:, 0] + s * directions[:, 1]
    uy = -s * directions[:, 0] + c * directions[:, 1]
    hl, hw = r.half_extent
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tx1, tx2 = (-hl - ox) / ux, (hl - ox) / ux
        ty1, ty2 = (-hw - oy) / uy, (hw - oy) / uy
    # zero direction component: inside the slab means unbounded, else a miss
    in_x = abs(ox) <= hl
    in_y = abs(oy) <= hw
    zx = ux == 0
    zy = uy == 0
    lo_x = np.where(zx, -np.inf if in_x else np.inf, np.minimum(tx1, tx2))
    hi_x = np.where(zx, np.inf if in_x else -np.inf, np.maximum(tx1, tx2))
    lo_y = np.where(zy, -np.inf if in_y else np.inf, np.minimum(ty1, ty2))
    hi_y = np.where(zy, np.inf if in_y else -np.inf, np.maximum(ty1, ty2))
    t_in = np.maximum(lo_x, lo_y)
    t_out = np.minimum(hi_x, hi_y)
    hit = (t_out >= np.maximum(t_in, 0.0))
    return np.where(hit, np.maximum(t_in, 0.0), np.inf)


def segment_hits_rect(a, b, r: VehicleState) -> bool:
    """Whether the closed segment a->b touches rectangle ``r``.

    Scalar slab test (same rule as ``_slab``); numpy overhead dominates for a
    single segment.
    """
    x, y, h = r.pose
    c, s = math.cos(h), math.sin(h)
    dx, dy = float(a[0]) - x, float(a[1]) - y
    ox, oy = c * dx + s * dy, -s * dx + c * dy
    ex, ey = float(b[0]) - float(a[0]), float(b[1]) - float(a[1])
    ux, uy = c * ex + s * ey, -s * ex + c * ey
    lo, hi = 0.0, 1.0  # segment parameter range
    for o, u, half in ((ox, ux, r.half_extent[0]), (oy, uy, r.half_extent[1])):
        if u == 0.0:
            if abs(o) > half:
                return False
            continue
        t1, t2 = (-half - o) / u, (half - o) / u
        if t1 > t2:
            t1, t2 = t2, t1
        lo, hi = max(lo, t1), min(hi, t2)
        if lo > hi:
            return False
    return True


def point_in_rect(p, r: VehicleState, pad: float = 0.0) -> bool:
    q = to_local(np.asarray(p, dtype=np.float64), r.pose)
    return bool(abs(q[0]) <= r.half_extent[0] + pad and abs(q[1]) <= r.half_extent[1] + pad)


def rect_corners(r: VehicleState) -> np.ndarray:
    hl, hw = r.half_extent
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return to_world(local, r.pose)
