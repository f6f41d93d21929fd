"""Differentiable mixed 2D-3D Gaussian splatting on a rigged triangle mesh.

Flat Gaussian surfels bound to mesh triangles carry the geometry; 3D
Gaussian children attached to error-selected surfels compensate color.
The package provides the CPU tile rasterizer (forward and analytic
backward), error-based selection, the two-stage trainer, and TSDF mesh
extraction.
"""

from .camera import Camera, look_at, simple_camera
from .mesh import RiggedMesh, load_obj, load_rigged_mesh, save_obj
from .scene import (Child3D, GaussianTree, MixedScene, Surfel2D, init_scene,
                    spawn_children)
from .rigging import (FrameCache, GlobalGaussian, PerturbationField,
                      TriangleFrame, child_to_global, surfel_to_global,
                      triangle_frame, triangle_frames_all)
from .rasterizer import (GradBuffer, RenderOutput, SplatBuffer, backward,
                         build_splat_buffer, evaluate_child, evaluate_surfel,
                         project_all, render)
from .serialization import load_scene, save_scene

__version__ = "0.1.0"
