import numpy as np
import pytest

from mixsplat import GlobalGaussian, build_splat_buffer, project_all, simple_camera
from mixsplat.rasterizer.buffer import depth_to_sortable, sortable_to_depth


def _cam(w=64, h=64):
    return simple_camera(w, h, eye=(0, 0, -3.0), target=(0, 0, 0), focal=60.0,
                         near=0.1, far=50.0)


def _surfel(mu, s=(0.2, 0.2)):
    return GlobalGaussian(np.asarray(mu, float), np.array([1.0, 0, 0, 0]),
                          np.asarray(s, float), 0.9, np.zeros((4, 3)), "surfel", 0)


class TestDepthKeyEncoding:
    def test_roundtrip(self, rng):
        d = rng.uniform(0.01, 100.0, 1000).astype(np.float32).astype(np.float64)
        assert np.allclose(sortable_to_depth(depth_to_sortable(d)), d)

    def test_key_sort_equals_tuple_sort(self, rng):
        n = 10_000
        tiles = rng.integers(0, 50, n).astype(np.uint64)
        depths = rng.uniform(0.01, 90.0, n)
        keys = (tiles << np.uint64(32)) | depth_to_sortable(depths).astype(np.uint64)
        by_key = np.lexsort((np.arange(n), keys))
        by_tuple = sorted(range(n), key=lambda i: (tiles[i], np.float32(depths[i]), i))
        assert np.array_equal(by_key, np.array(by_tuple))

    def test_negative_depths_still_order(self):
        d = np.array([-3.0, -0.5, 0.0, 0.25, 7.0])
        bits = depth_to_sortable(d)
        assert np.all(np.diff(bits.astype(np.int64)) > 0)


class TestBuildBuffer:
    def test_same_tile_orders_by_depth(self):
        cam = _cam()
        # both tiny surfels project near the image center -> same tile
        p = project_all([_surfel([0.02, 0.02, 1.0], s=(0.02, 0.02)),
                         _surfel([0.0, 0.0, -1.0], s=(0.02, 0.02))], cam)
        assert p.n_surfels == 2
        buf = build_splat_buffer(p, 64)
        run = buf.tile_run(0)
        # surfel at z=-1 sits at camera depth 2, the other at depth 4
        assert p.s_depth[run[0]] < p.s_depth[run[1]]
        assert np.allclose(sorted(p.s_depth), [2.0, 4.0])

    def test_empty_scene_all_ranges_empty(self):
        cam = _cam()
        p = project_all([], cam)
        buf = build_splat_buffer(p, 16)
        assert buf.n_tiles == 16
        assert np.all(buf.tile_ranges[:, 0] == buf.tile_ranges[:, 1])
        assert len(buf.keys) == 0

    def test_multi_tile_surfel_duplicates_with_same_depth_bits(self):
        cam = _cam()
        p = project_all([_surfel([0, 0, 0], s=(0.35, 0.35))], cam)
        buf = build_splat_buffer(p, 32)     # 2x2 grid, splat centered
        assert len(buf.keys) == 4
        lows = buf.keys & np.uint64(0xFFFFFFFF)
        assert len(set(lows.tolist())) == 1
        assert np.all(buf.point_list == 0)

    def test_keys_sorted_and_ranges_consistent(self, rng):
        cam = _cam()
        gs = [_surfel(rng.uniform([-0.8, -0.8, -0.5], [0.8, 0.8, 0.5]),
                      s=rng.uniform(0.05, 0.3, 2)) for _ in range(30)]
        p = project_all(gs, cam)
        buf = build_splat_buffer(p, 16)
        assert np.all(np.diff(buf.keys.astype(object)) >= 0)
        for t in range(buf.n_tiles):
            s, e = buf.tile_ranges[t]
            assert np.all((buf.keys[s:e] >> np.uint64(32)) == t)
            run_depth = np.concatenate([p.s_depth, p.c_depth])[buf.tile_run(t)]
            assert np.all(np.diff(run_depth.astype(np.float32)) >= 0)

    def test_children_present_for_bookkeeping(self):
        cam = _cam()
        child = GlobalGaussian(np.array([0.0, 0, 0]), np.array([1.0, 0, 0, 0]),
                               np.array([0.1, 0.1, 0.1]), 0.9, np.zeros((4, 3)),
                               "child", 0)
        p = project_all([_surfel([0, 0, 0.2]), child], cam)
        buf = build_splat_buffer(p, 64)
        rows = set(buf.tile_run(0).tolist())
        assert rows == {0, 1}   # surfel row 0, child row ns+0
