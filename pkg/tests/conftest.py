import numpy as np
import pytest

from qreg.core import PointCloud, RigidTransform, random_rotation, rotation_about_axis
from qreg.spatial import SpatialIndex
from qreg.synth import SurfaceSpec, sample_surface


def rot_z(deg: float) -> np.ndarray:
    return rotation_about_axis([0, 0, 1], np.radians(deg))


def random_rigid(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-scale, scale, 3))


def ellipsoid_cloud(
    semi_axes=(2.0, 1.0, 0.5),
    n: int = 4000,
    seed: int = 0,
    rotation=None,
    center=(0.0, 0.0, 0.0),
) -> tuple[PointCloud, SpatialIndex]:
    rot = np.eye(3) if rotation is None else np.asarray(rotation)
    spec = SurfaceSpec("ellipsoid", tuple(center), tuple(semi_axes), tuple(map(tuple, rot.tolist())))
    cloud = PointCloud(sample_surface(spec, n, np.random.default_rng(seed)))
    return cloud, SpatialIndex(cloud)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
