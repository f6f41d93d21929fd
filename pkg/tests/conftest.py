import numpy as np
import pytest

from mixsplat import RiggedMesh, init_scene, simple_camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quad_mesh():
    verts = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0],
                      [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return RiggedMesh(verts, tris)


@pytest.fixture
def quad_scene(quad_mesh):
    return init_scene(quad_mesh, sh_degree=1)


@pytest.fixture
def front_cam():
    return simple_camera(32, 32, eye=(0.0, 0.0, -3.0), target=(0.0, 0.0, 0.0),
                         focal=40.0, near=0.1, far=50.0)
