from .projection import (CUTOFF, LOWPASS_SIGMA, DILATION, ProjectedSplat,
                         ProjectedSplats, evaluate_child, evaluate_surfel,
                         project_all, project_scene)
from .buffer import SplatBuffer, build_splat_buffer, depth_to_sortable, sortable_to_depth
from .forward import RenderOutput, TileTrace, blend_tile, render
from .backward import GradBuffer, backward

__all__ = [
    "CUTOFF", "LOWPASS_SIGMA", "DILATION",
    "ProjectedSplat", "ProjectedSplats", "evaluate_surfel", "evaluate_child",
    "project_all", "project_scene",
    "SplatBuffer", "build_splat_buffer", "depth_to_sortable", "sortable_to_depth",
    "RenderOutput", "TileTrace", "blend_tile", "render",
    "GradBuffer", "backward",
]
