import os

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from deskrecon.config.settings import RunConfig
from deskrecon.core.geometry import Intrinsics, Pose


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    rotation = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    return Pose(rotation, rng.normal(scale=scale, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics():
    return Intrinsics.default()


@pytest.fixture
def config(monkeypatch):
    """A small run configuration, isolated from DESKRECON_* variables in the environment"""
    for key in list(os.environ):
        if key.startswith("DESKRECON_"):
            monkeypatch.delenv(key)
    return RunConfig(
        _env_file=None,
        n_frames=24,
        n_planes=16,
        n_sources=2,
        voxel_size=0.1,
        mesh_samples=5000,
        queue_size=2,
    )


@pytest.fixture
def make_pose():
    return random_pose
