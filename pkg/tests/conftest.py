import numpy as np
import pytest

from gsdiff.pose_interp import Pose
from gsdiff.rasterizer import Camera
from gsdiff.scene import DeltaTable, GaussianCloud, TimeStamp
from gsdiff import quat


def make_cloud(
    positions,
    scales=None,
    rotations=None,
    opacities=None,
    colors=None,
    instance_ids=None,
    encodings=None,
    deltas=None,
):
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = positions.shape[0]
    if scales is None:
        scales = np.full((n, 3), 0.1)
    if rotations is None:
        rotations = np.tile(quat.identity(), (n, 1))
    if opacities is None:
        opacities = np.full(n, 0.8)
    if colors is None:
        colors = np.full((n, 3), 0.5)
    return GaussianCloud.from_columns(
        positions=positions,
        scales=np.asarray(scales, dtype=np.float64),
        rotations=np.asarray(rotations, dtype=np.float64),
        opacities=np.asarray(opacities, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.float64),
        instance_ids=instance_ids,
        encodings=encodings,
        deltas=deltas,
    )


def random_cloud(rng, n, spread=1.0, encodings_std=1.0):
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return make_cloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        scales=rng.uniform(0.05, 0.3, (n, 3)),
        rotations=rotations,
        opacities=rng.uniform(0.3, 0.95, n),
        colors=rng.uniform(0, 1, (n, 3)),
        instance_ids=rng.integers(0, 4, n).astype(np.uint32),
        encodings=rng.normal(0, encodings_std, (n, 16)),
    )


def front_camera(width=32, height=32, focal=40.0, near=0.1):
    """Camera at the origin looking along +z."""
    pose = Pose(rotation=quat.identity(), translation=np.zeros(3))
    return Camera(
        pose=pose,
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        near=near,
        far=100.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
