"""Error-based surfel selection.

After stage-1 training, renders are compared to ground truth per
rasterizer tile; the surfels that contributed color to the top-k worst
tiles are decoded from the sorted point list, closed over their triangle
siblings, and unioned across n sampled (frame, camera, truth) triples.
The result seeds the 3D children.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import RenderError, SceneError
from .rasterizer.forward import render


@dataclass
class TileErrorMap:
    values: np.ndarray      # (grid_h, grid_w) per-tile MSE
    tile_size: int

    def flat(self):
        return self.values.ravel()


@dataclass
class SelectionSet:
    S: set = field(default_factory=set)         # direct contributors
    S_prime: set = field(default_factory=set)   # closed under siblings
    U: set = field(default_factory=set)         # union across iterations
    k: int = 0
    n: int = 0


def tile_mse(rendered, truth, tile_size: int) -> TileErrorMap:
    """Per-tile mean of squared differences over pixels and channels.

    Partial border tiles divide by their actual element count so ranking
    is not biased by tile area."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {truth.shape}")
    h, w = rendered.shape[:2]
    gh = -(-h // tile_size)
    gw = -(-w // tile_size)
    sq = (rendered - truth) ** 2
    out = np.empty((gh, gw))
    for ty in range(gh):
        for tx in range(gw):
            out[ty, tx] = sq[ty * tile_size:(ty + 1) * tile_size,
                             tx * tile_size:(tx + 1) * tile_size].mean()
    return TileErrorMap(out, tile_size)


def top_k_tiles(emap: TileErrorMap, k: int):
    """Indices of the k largest tiles, ties broken by lower tile id."""
    flat = emap.flat()
    if k > flat.size:
        warnings.warn(f"k={k} exceeds tile count {flat.size}; clamping")
        k = flat.size
    order = np.lexsort((np.arange(flat.size), -flat))
    return order[:k].tolist()


def contributing_surfels(buffer, tile_id, contrib, projected):
    """Scene surfel indices in the tile's run that actually blended.

    contrib is the render's point-list-aligned flag array; entries listed
    but skipped by the cutoff or occluded past termination are excluded,
    as are child bookkeeping entries."""
    if tile_id < 0 or tile_id >= buffer.n_tiles:
        raise RenderError(f"tile id {tile_id} out of range")
    s, e = buffer.tile_ranges[tile_id]
    rows = buffer.point_list[s:e].astype(np.int64)
    flags = contrib[s:e]
    surf = (rows < projected.n_surfels) & flags
    return set(projected.s_idx[rows[surf]].tolist())


def sibling_closure(scene, surfels):
    """Close a surfel set over triangle siblings (idempotent)."""
    if not surfels:
        return set()
    tris = np.unique(scene.s_parent_tri[np.fromiter(surfels, dtype=np.int64)])
    return set(np.nonzero(np.isin(scene.s_parent_tri, tris))[0].tolist())


def select_iteration(scene, perturb, t, cam, truth, k, tile_size=16,
                     background=(0.0, 0.0, 0.0), workers=1) -> SelectionSet:
    """One scoring pass: render 2D-only, rank tiles by MSE, decode the
    top-k tiles' contributors and close over siblings."""
    if scene.n_children:
        raise SceneError("selection runs on the stage-1 scene, before children")
    out = render(scene, perturb, t, cam, mode="stage1", tile_size=tile_size,
                 background=background, workers=workers)
    emap = tile_mse(out.color, truth, tile_size)
    sel = SelectionSet(k=k, n=1)
    for tile_id in top_k_tiles(emap, k):
        sel.S |= contributing_surfels(out.buffer, tile_id, out.contrib,
                                      out.projected)
    sel.S_prime = sibling_closure(scene, sel.S)
    sel.U = set(sel.S_prime)
    return sel


def run_selection(scene, perturb, sampler, n, k, rng=None, tile_size=16,
                  background=(0.0, 0.0, 0.0), workers=1) -> set:
    """Union the per-iteration selections over n sampled views.

    sampler(rng) must yield (frame-id, camera, truth image) triples drawn
    from the training set."""
    if n < 1:
        raise ValueError("selection needs n >= 1 iterations")
    rng = rng or np.random.default_rng(0)
    U = set()
    for _ in range(n):
        t, cam, truth = sampler(rng)
        sel = select_iteration(scene, perturb, t, cam, truth, k,
                               tile_size=tile_size, background=background,
                               workers=workers)
        U |= sel.S_prime
    return U


def save_selection(path, U):
    """Sorted index list, one per line (audit format, feeds spawn_children)."""
    with open(path, "w") as f:
        for i in sorted(U):
            f.write(f"{i}\n")


def load_selection(path):
    with open(path) as f:
        return {int(line) for line in f if line.strip()}
