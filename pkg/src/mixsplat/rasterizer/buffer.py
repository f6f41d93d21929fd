"""Per-view sorted tile/depth key buffer.

Each (projection, overlapped tile) pair gets one u64 key: the high 32
bits hold the tile id, the low 32 bits the f32 depth bits made
order-preserving by the sign-flip trick, so one ascending u64 sort
yields per-tile front-to-back runs. point_list holds the projection row
for each key, index-aligned. Child projections are present for
bookkeeping but are never blended at their own position; blending pulls
them in right after their parent surfel.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import RenderError
from .projection import ProjectedSplats


def depth_to_sortable(depth):
    """f32 depth -> u32 whose unsigned order matches the float order."""
    bits = np.asarray(depth, dtype="<f4").view(np.uint32)
    neg = bits >> 31 == 1
    return np.where(neg, ~bits, bits | np.uint32(0x80000000)).astype(np.uint32)


def sortable_to_depth(bits):
    bits = np.asarray(bits, dtype=np.uint32)
    neg = bits >> 31 == 0
    raw = np.where(neg, ~bits, bits & np.uint32(0x7FFFFFFF)).astype(np.uint32)
    return raw.view("<f4").astype(np.float64)


@dataclass
class SplatBuffer:
    keys: np.ndarray          # (L,) u64, sorted ascending
    point_list: np.ndarray    # (L,) u32 projection rows, key-aligned
    tile_ranges: np.ndarray   # (n_tiles, 2) [start, end) into the arrays
    tile_size: int
    grid_w: int
    grid_h: int

    @property
    def n_tiles(self):
        return self.grid_w * self.grid_h

    def tile_run(self, tile_id):
        if tile_id < 0 or tile_id >= self.n_tiles:
            raise RenderError(f"tile id {tile_id} out of range (grid has {self.n_tiles})")
        s, e = self.tile_ranges[tile_id]
        return self.point_list[s:e]

    def tile_rect(self, tile_id, width, height):
        ty, tx = divmod(tile_id, self.grid_w)
        x0, y0 = tx * self.tile_size, ty * self.tile_size
        return x0, y0, min(x0 + self.tile_size, width), min(y0 + self.tile_size, height)


def build_splat_buffer(projected: ProjectedSplats, tile_size: int,
                       width=None, height=None) -> SplatBuffer:
    """Duplicate every projection into each tile its bbox overlaps, key it
    with (tile << 32 | depth bits) and sort. Ties (same tile, same f32
    depth) keep projection-row order via the stable sort."""
    cam = projected.cam
    width = cam.width if width is None else width
    height = cam.height if height is None else height
    tile_size = int(tile_size)
    grid_w = -(-width // tile_size)
    grid_h = -(-height // tile_size)
    if grid_w * grid_h > 0xFFFFFFFF:
        raise RenderError("tile id exceeds 32 bits")
    if len(projected) > 0xFFFFFFFF:
        raise RenderError("projection index exceeds 32 bits")

    boxes = np.concatenate([projected.s_bbox, projected.c_bbox]) \
        if len(projected) else np.zeros((0, 4), dtype=np.int64)
    depths = np.concatenate([projected.s_depth, projected.c_depth]) \
        if len(projected) else np.zeros(0)

    tx0 = boxes[:, 0] // tile_size
    ty0 = boxes[:, 1] // tile_size
    tx1 = (boxes[:, 2] - 1) // tile_size + 1   # bbox is half-open, nonempty
    ty1 = (boxes[:, 3] - 1) // tile_size + 1
    counts = (tx1 - tx0) * (ty1 - ty0)
    total = int(counts.sum())
    dbits = depth_to_sortable(depths)

    splat = np.repeat(np.arange(len(boxes)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    w_tiles = (tx1 - tx0)[splat]
    tiles = (ty0[splat] + local // w_tiles) * grid_w + tx0[splat] + local % w_tiles
    keys = (tiles.astype(np.uint64) << np.uint64(32)) | dbits[splat].astype(np.uint64)
    rows = splat.astype(np.uint32)

    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    rows = rows[order]
    tile_ids = (keys >> np.uint64(32)).astype(np.int64)
    starts = np.searchsorted(tile_ids, np.arange(grid_w * grid_h))
    ends = np.searchsorted(tile_ids, np.arange(grid_w * grid_h) + 1)
    return SplatBuffer(keys, rows, np.stack([starts, ends], axis=1),
                       tile_size, grid_w, grid_h)
