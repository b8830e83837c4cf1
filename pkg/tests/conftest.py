import numpy as np
import pytest

from mmcd.config import CommConfig, EncoderConfig, FusionConfig, GridConfig, LidarConfig, SimConfig
from mmcd.sim import generate_dataset
from mmcd.world import CAR, VehicleState, WorldState


def car(vid, x, y, heading=0.0, vx=0.0, vy=0.0, role="background", half=CAR):
    return VehicleState(vid, (x, y, heading), (vx, vy), half, role)


def world_of(*vehicles, t=0.0, scenario="overtake"):
    return WorldState(t, tuple(vehicles), scenario)


@pytest.fixture
def ego():
    return car(0, 0.0, 0.0, role="ego")


@pytest.fixture(scope="session")
def tiny_encoder():
    return EncoderConfig(grid_size=32, patch=8, d_model=8, embed_dim=16, point_hidden=8, keypoints=8, feat_dim=8)


@pytest.fixture(scope="session")
def tiny_fusion():
    return FusionConfig(embed_dim=16, d=8, hidden=(8, 4))


@pytest.fixture(scope="session")
def small_episodes():
    """Four short episodes per scenario, shared across tests."""
    cfg = SimConfig(n_frames=30)
    return {sc: generate_dataset(sc, 4, 3, cfg) for sc in ("overtake", "left_turn", "red_light")}
