import numpy as np
import pytest

from softsphere.camera import camera_from_vector
from softsphere.scene import add_sphere_arrays, new_scene


def make_random_scene(rng, m, d=3, depth=(25.0, 35.0), lateral=5.0,
                      radius=(0.3, 2.0), opacity=(0.1, 1.0), background=None):
    """Random scene in front of an identity camera (Listing-style layout)."""
    if background is None:
        background = rng.uniform(0, 1, d)
    scene = new_scene(d, background)
    if m == 0:
        return scene
    pos = np.column_stack(
        [
            rng.uniform(-lateral, lateral, m),
            rng.uniform(-lateral, lateral, m),
            rng.uniform(depth[0], depth[1], m),
        ]
    )
    add_sphere_arrays(
        scene,
        pos,
        rng.uniform(radius[0], radius[1], m),
        rng.uniform(opacity[0], opacity[1], m),
        rng.uniform(0, 1, (m, d)),
    )
    return scene


def make_camera(width=64, height=64, vec=None, near=0.1, far=45.0, mode="pinhole"):
    if vec is None:
        vec = [0, 0, 0, 0, 0, 0, 5.0, 2.0]
    return camera_from_vector(vec, width, height, near=near, far=far, mode=mode)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
