"""Mixed alpha blending: full-image composition over depth-sorted tiles.

Per pixel, surfels blend front to back; when a surfel has a projected
child, the child's contribution is spliced in immediately after its
parent (regardless of the child's own depth), then blending continues.
Traversal stops once transmittance drops below t_min; contributions with
alpha*G below the 1/255 cutoff are skipped. Median depth is the
intersection depth of the first contributing surfel at which the
accumulated alpha has reached 0.5.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import MissingCacheError, RenderError
from ..rigging import transform_children, transform_surfels, triangle_frames_all
from .buffer import SplatBuffer, build_splat_buffer
from .projection import (CUTOFF, T_MIN, ProjectedSplats, eval_children,
                         eval_surfels, project_scene)


@dataclass
class TileTrace:
    """Per-contributor blending record of one tile (for trace-mode losses)."""

    tile_id: int
    rect: tuple                 # (x0, y0, x1, y1)
    rows: np.ndarray            # (E,) projection rows, children offset by n_surfels
    is_child: np.ndarray        # (E,)
    w: np.ndarray               # (E, P) alpha*G after cutoff/termination
    T: np.ndarray               # (E, P) transmittance before each entry
    z: np.ndarray               # (E, P) contribution depths


@dataclass
class RenderOutput:
    color: np.ndarray           # (H, W, 3)
    alpha: np.ndarray           # (H, W)
    median_depth: np.ndarray    # (H, W), 0 where alpha never crossed 0.5
    normal: np.ndarray          # (H, W, 3) accumulated camera-space surfel normals
    transmittance: np.ndarray   # (H, W) terminal transmittance
    n_contrib: np.ndarray       # (H, W) contributors blended per pixel
    median_row: np.ndarray      # (H, W) tile-local augmented row of the median surfel
    mode: str
    background: np.ndarray
    tile_size: int
    t_min: float
    cutoff: float
    t: int
    cam: object = None
    projected: Optional[ProjectedSplats] = None
    buffer: Optional[SplatBuffer] = None
    contrib: Optional[np.ndarray] = None   # aligned with buffer.point_list
    traces: Optional[list] = None
    surf_g: dict = field(default_factory=dict, repr=False)
    chil_g: Optional[dict] = field(default=None, repr=False)
    frames: tuple = field(default=None, repr=False)
    p2d: Optional[np.ndarray] = None
    p3d: Optional[np.ndarray] = None

    def require_cache(self):
        if self.projected is None or self.buffer is None:
            raise MissingCacheError("render was run with keep_cache=False")


def _tile_pixels(x0, y0, x1, y1):
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)
    return np.stack([px.ravel(), py.ravel(), np.ones(px.size)])


def _augmented_run(projected, run, mode):
    """Order surfel entries of a tile run and splice projected children.

    Returns (rows, is_child, buffer_positions_of_surfel_entries) where
    rows live in the global projection row space (children offset by
    n_surfels)."""
    ns = projected.n_surfels
    s_mask = run < ns
    s_entries = run[s_mask].astype(np.int64)
    if mode == "mixed" and projected.n_children:
        child_rows = projected.child_of_surfel[projected.s_idx[s_entries]]
    else:
        child_rows = np.full(len(s_entries), -1, dtype=np.int64)
    has_child = child_rows >= 0
    E = len(s_entries) + int(has_child.sum())
    rows = np.empty(E, dtype=np.int64)
    is_child = np.zeros(E, dtype=bool)
    pos = np.cumsum(1 + has_child) - (1 + has_child)
    rows[pos] = s_entries
    cpos = pos[has_child] + 1
    rows[cpos] = ns + child_rows[has_child]
    is_child[cpos] = True
    return rows, is_child, np.nonzero(s_mask)[0]


def _blend_tile(projected, buffer, tile_id, width, height, bg, mode,
                t_min, want_trace, cutoff=CUTOFF):
    x0, y0, x1, y1 = buffer.tile_rect(tile_id, width, height)
    P = (x1 - x0) * (y1 - y0)
    run = buffer.tile_run(tile_id)
    rows, is_child, s_run_local = _augmented_run(projected, run, mode)
    E = len(rows)
    out = {
        "rect": (x0, y0, x1, y1),
        "color": np.tile(bg, (P, 1)),
        "alpha": np.zeros(P),
        "median": np.zeros(P),
        "normal": np.zeros((P, 3)),
        "T": np.ones(P),
        "ncontrib": np.zeros(P, dtype=np.int32),
        "median_row": np.full(P, -1, dtype=np.int32),
        "contrib_local": s_run_local,
        "contrib_flags": np.zeros(len(s_run_local), dtype=bool),
        "trace": None,
    }
    if E == 0:
        if want_trace:
            out["trace"] = TileTrace(tile_id, (x0, y0, x1, y1), rows, is_child,
                                     np.zeros((0, P)), np.zeros((0, P)), np.zeros((0, P)))
        return out

    ns = projected.n_surfels
    s_pos = np.nonzero(~is_child)[0]
    c_pos = np.nonzero(is_child)[0]
    s_rows = rows[s_pos]
    c_rows = rows[c_pos] - ns
    xh = _tile_pixels(x0, y0, x1, y1)

    w = np.zeros((E, P))
    z = np.zeros((E, P))
    rgb = np.zeros((E, 3))
    G_s, z_s, *_ = eval_surfels(projected.s_A[s_rows], projected.s_center[s_rows],
                                xh, projected.cam.near, projected.cam.far)
    w[s_pos] = projected.s_opacity[s_rows][:, None] * G_s
    z[s_pos] = z_s
    rgb[s_pos] = projected.s_rgb[s_rows]
    if len(c_pos):
        G_c, _, _ = eval_children(projected.c_conic[c_rows],
                                  projected.c_center[c_rows], xh)
        w[c_pos] = projected.c_opacity[c_rows][:, None] * G_c
        z[c_pos] = projected.c_depth[c_rows][:, None]
        rgb[c_pos] = projected.c_rgb[c_rows]

    if np.isnan(w).any():
        bad = np.nonzero(np.isnan(w).any(axis=1))[0][0]
        r = rows[bad]
        kind = "child" if is_child[bad] else "surfel"
        idx = projected.c_idx[r - ns] if is_child[bad] else projected.s_idx[r]
        raise RenderError(f"NaN contribution from {kind} {int(idx)} in tile {tile_id}")

    if cutoff > 0.0:
        w[w < cutoff] = 0.0
    if t_min > 0.0 and E:
        Tb = np.cumprod(1.0 - w, axis=0)
        dead = np.empty_like(w, dtype=bool)
        dead[0] = False
        dead[1:] = Tb[:-1] < t_min    # termination is suffix-closed: T is nonincreasing
        w[dead] = 0.0
    Tprod = np.cumprod(1.0 - w, axis=0)
    T_final = Tprod[-1]
    Tb = np.empty_like(Tprod)
    Tb[0] = 1.0
    Tb[1:] = Tprod[:-1]
    omega = w * Tb

    out["color"] = omega.T @ rgb + bg[None, :] * T_final[:, None]
    out["alpha"] = 1.0 - T_final
    out["T"] = T_final
    out["ncontrib"] = (w > 0).sum(axis=0).astype(np.int32)
    out["normal"] = omega[s_pos].T @ projected.s_normal[s_rows]

    A_after = 1.0 - Tprod
    cand = (~is_child)[:, None] & (w > 0) & (A_after >= 0.5)
    has = cand.any(axis=0)
    first = np.argmax(cand, axis=0)
    out["median"] = np.where(has, z[first, np.arange(P)], 0.0)
    out["median_row"] = np.where(has, first, -1).astype(np.int32)
    out["contrib_flags"] = (w[s_pos] > 0).any(axis=1)
    if want_trace:
        out["trace"] = TileTrace(tile_id, (x0, y0, x1, y1), rows, is_child, w, Tb, z)
    return out


def blend_tile(projected: ProjectedSplats, buffer: SplatBuffer, tile_id,
               background=(0.0, 0.0, 0.0), mode="mixed", t_min=T_MIN):
    """Blend one tile; returns per-pixel color/alpha/median-depth arrays
    shaped to the tile rect."""
    cam = projected.cam
    bg = np.asarray(background, dtype=np.float64)
    r = _blend_tile(projected, buffer, tile_id, cam.width, cam.height,
                    bg, mode, t_min, False)
    x0, y0, x1, y1 = r["rect"]
    shape = (y1 - y0, x1 - x0)
    return {
        "color": r["color"].reshape(shape + (3,)),
        "alpha": r["alpha"].reshape(shape),
        "median_depth": r["median"].reshape(shape),
        "transmittance": r["T"].reshape(shape),
    }


def render(scene, perturb=None, t=0, cam=None, mode="mixed", tile_size=16,
           background=(0.0, 0.0, 0.0), t_min=T_MIN, cutoff=CUTOFF,
           want_trace=False, workers=1, frames=None, keep_cache=True,
           full_extent=False) -> RenderOutput:
    """Render a scene at animation frame t.

    mode "stage1" ignores children entirely; "mixed" splices each
    projected child after its parent surfel. Output is deterministic and
    independent of the worker count (tiles are disjoint and merged in
    fixed order).
    """
    if mode not in ("stage1", "mixed"):
        raise RenderError(f"unknown render mode {mode!r}")
    bg = np.asarray(background, dtype=np.float64)
    if frames is None:
        frames = triangle_frames_all(scene.mesh, t)
    p2d = perturb.offsets_2d(t) if perturb is not None else np.zeros((scene.n_surfels, 3))
    surf_g = transform_surfels(scene, frames, p2d)
    chil_g = None
    p3d = None
    if mode == "mixed" and scene.n_children:
        p3d = perturb.offsets_3d(t) if perturb is not None else np.zeros((scene.n_children, 3))
        chil_g = transform_children(scene, frames, surf_g["mu_g"], p3d)
    projected = project_scene(scene, surf_g, chil_g, cam, mode=mode,
                              full_extent=full_extent)
    buffer = build_splat_buffer(projected, tile_size)

    H, W = cam.height, cam.width
    out = RenderOutput(
        color=np.empty((H, W, 3)), alpha=np.empty((H, W)),
        median_depth=np.empty((H, W)), normal=np.empty((H, W, 3)),
        transmittance=np.empty((H, W)), n_contrib=np.empty((H, W), dtype=np.int32),
        median_row=np.empty((H, W), dtype=np.int32),
        mode=mode, background=bg, tile_size=tile_size, t_min=t_min,
        cutoff=cutoff, t=int(t),
        cam=cam, surf_g=surf_g, chil_g=chil_g, frames=frames, p2d=p2d, p3d=p3d,
    )
    contrib = np.zeros(len(buffer.point_list), dtype=bool)
    traces = [] if want_trace else None

    def work(tile_id):
        return _blend_tile(projected, buffer, tile_id, W, H, bg, mode,
                           t_min, want_trace, cutoff)

    tile_ids = range(buffer.n_tiles)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, tile_ids))
    else:
        results = [work(i) for i in tile_ids]

    for tile_id, r in zip(tile_ids, results):
        x0, y0, x1, y1 = r["rect"]
        shape = (y1 - y0, x1 - x0)
        out.color[y0:y1, x0:x1] = r["color"].reshape(shape + (3,))
        out.alpha[y0:y1, x0:x1] = r["alpha"].reshape(shape)
        out.median_depth[y0:y1, x0:x1] = r["median"].reshape(shape)
        out.normal[y0:y1, x0:x1] = r["normal"].reshape(shape + (3,))
        out.transmittance[y0:y1, x0:x1] = r["T"].reshape(shape)
        out.n_contrib[y0:y1, x0:x1] = r["ncontrib"].reshape(shape)
        out.median_row[y0:y1, x0:x1] = r["median_row"].reshape(shape)
        start = buffer.tile_ranges[tile_id][0]
        contrib[start + r["contrib_local"]] = r["contrib_flags"]
        if want_trace:
            traces.append(r["trace"])

    out.contrib = contrib
    out.traces = traces
    if keep_cache:
        out.projected = projected
        out.buffer = buffer
    return out
