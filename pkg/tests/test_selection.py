import numpy as np
import pytest

from mixsplat.errors import RenderError, SceneError
from mixsplat.gradcheck import random_scene
from mixsplat.rasterizer.buffer import SplatBuffer, depth_to_sortable
from mixsplat.rasterizer.forward import render
from mixsplat.selection import (SelectionSet, contributing_surfels,
                                load_selection, run_selection, save_selection,
                                select_iteration, sibling_closure, tile_mse,
                                top_k_tiles)

from _reference import naive_tile_mse


class TestTileMse:
    def test_identical_images_zero(self, rng):
        img = rng.random((32, 32, 3))
        emap = tile_mse(img, img.copy(), 16)
        assert emap.values.shape == (2, 2)
        assert np.all(emap.values == 0.0)

    def test_single_offset_tile(self):
        a = np.zeros((32, 32, 3))
        b = np.zeros((32, 32, 3))
        b[0:16, 16:32] = 0.5
        emap = tile_mse(a, b, 16)
        assert np.isclose(emap.values[0, 1], 0.25)
        assert emap.values[0, 0] == emap.values[1, 0] == emap.values[1, 1] == 0

    def test_matches_naive_reference(self, rng):
        a = rng.random((24, 40, 3))
        b = rng.random((24, 40, 3))
        emap = tile_mse(a, b, 16)   # partial tiles at both borders
        np.testing.assert_array_equal(emap.values, naive_tile_mse(a, b, 16))

    def test_dim_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            tile_mse(rng.random((8, 8, 3)), rng.random((8, 9, 3)), 4)


class TestTopK:
    def test_exact_against_full_sort(self, rng):
        from mixsplat.selection import TileErrorMap
        vals = rng.random((6, 7))
        emap = TileErrorMap(vals, 8)
        flat = vals.ravel()
        order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
        for k in (1, 5, 20):
            assert top_k_tiles(emap, k) == order[:k]

    def test_ties_break_toward_lower_tile_id(self):
        from mixsplat.selection import TileErrorMap
        vals = np.array([[0.5, 0.9], [0.9, 0.1]])
        assert top_k_tiles(TileErrorMap(vals, 8), 2) == [1, 2]

    def test_k_exceeding_tile_count_clamps_with_warning(self):
        from mixsplat.selection import TileErrorMap
        emap = TileErrorMap(np.ones((2, 2)), 8)
        with pytest.warns(UserWarning):
            assert len(top_k_tiles(emap, 99)) == 4


class TestContributingSurfels:
    def test_point_list_decode_example(self):
        # two worst tiles with runs [235, 234] and [234, 127] decode to the
        # union {235, 234, 127}
        from types import SimpleNamespace
        ns = 300
        rows = np.array([235, 234, 234, 127], dtype=np.uint32)
        depths = np.array([1.0, 2.0, 1.5, 2.5])
        keys = (np.array([1, 1, 2, 2], dtype=np.uint64) << np.uint64(32)) \
            | depth_to_sortable(depths).astype(np.uint64)
        buf = SplatBuffer(keys, rows, np.array([[0, 0], [0, 2], [2, 4], [4, 4]]),
                          16, 2, 2)
        projected = SimpleNamespace(n_surfels=ns, s_idx=np.arange(ns))
        contrib = np.ones(4, dtype=bool)
        got = (contributing_surfels(buf, 1, contrib, projected)
               | contributing_surfels(buf, 2, contrib, projected))
        assert got == {235, 234, 127}

    def test_empty_tile_empty_set(self):
        from mixsplat import Camera, RiggedMesh, init_scene
        K = np.array([[24.0, 0, 8.0], [0, 24.0, 8.0], [0, 0, 1.0]])
        cam = Camera(K, np.eye(4), 16, 16, 0.1, 50.0)
        verts = 0.05 * np.array([[-1.0, -1, 0], [1.0, -1, 0], [0.0, 1, 0]])
        verts[:, 2] = 2.0
        scene = init_scene(RiggedMesh(verts, np.array([[0, 1, 2]])), 0)
        out = render(scene, None, 0, cam, mode="stage1", tile_size=4)
        empties = [t for t in range(out.buffer.n_tiles)
                   if out.buffer.tile_ranges[t][0] == out.buffer.tile_ranges[t][1]]
        assert empties
        assert contributing_surfels(out.buffer, empties[0], out.contrib,
                                    out.projected) == set()

    def test_occluded_far_surfel_excluded(self):
        # an opaque near wall hides the far surfel: listed but no contribution
        from mixsplat import Camera, RiggedMesh, init_scene
        from mixsplat.scene import inverse_sigmoid
        K = np.array([[24.0, 0, 8.0], [0, 24.0, 8.0], [0, 0, 1.0]])
        cam = Camera(K, np.eye(4), 16, 16, 0.1, 50.0)
        verts = np.array([[-3.0, -3, 2], [3.0, -3, 2], [0.0, 4, 2],
                          [-3.0, -3, 6], [3.0, -3, 6], [0.0, 4, 6]])
        scene = init_scene(RiggedMesh(verts, np.array([[0, 1, 2], [3, 4, 5]])), 0)
        scene.s_opacity[:] = inverse_sigmoid(0.99999)
        scene.s_scale[:] = np.log(20.0)   # wall-like: opaque across the frame
        out = render(scene, None, 0, cam, mode="stage1", tile_size=16)
        run = set(out.buffer.tile_run(0).tolist())
        assert run == {0, 1}
        got = contributing_surfels(out.buffer, 0, out.contrib, out.projected)
        near_scene_idx = int(out.projected.s_idx[np.argmin(out.projected.s_depth)])
        assert got == {near_scene_idx}

    def test_tile_out_of_range(self, rng):
        scene, perturb, cam = random_scene(rng, size=8)
        out = render(scene, perturb, 0, cam, tile_size=8)
        with pytest.raises(RenderError):
            contributing_surfels(out.buffer, 99, out.contrib, out.projected)

    def test_subset_of_raw_run(self, rng):
        scene, perturb, cam = random_scene(rng, n_tris=4, extra_surfels=3,
                                           size=24)
        out = render(scene, perturb, 0, cam, mode="stage1", tile_size=8)
        for t in range(out.buffer.n_tiles):
            got = contributing_surfels(out.buffer, t, out.contrib, out.projected)
            run_scene = {int(out.projected.s_idx[r])
                         for r in out.buffer.tile_run(t)
                         if r < out.projected.n_surfels}
            assert got <= run_scene


class TestSiblingClosure:
    def test_closure_is_idempotent(self, rng):
        scene, _, _ = random_scene(rng, n_tris=4, extra_surfels=5,
                                   n_children=0)
        S = {0, 3}
        once = sibling_closure(scene, S)
        assert sibling_closure(scene, once) == once
        assert S <= once

    def test_two_surfels_one_triangle(self, rng):
        scene, _, _ = random_scene(rng, n_tris=2, extra_surfels=1, n_children=0)
        extra = scene.n_surfels - 1
        tri = scene.s_parent_tri[extra]
        mates = set(np.nonzero(scene.s_parent_tri == tri)[0].tolist())
        assert sibling_closure(scene, {extra}) == mates
        assert len(mates) >= 2


class TestSelectionLoop:
    def _sampler(self, scene, perturb, cam, truth):
        def sample(rng):
            return 0, cam, truth
        return sample

    def test_k_zero_empty_delta(self, rng):
        scene, perturb, cam = random_scene(rng, n_children=0, size=16)
        truth = np.zeros((16, 16, 3))
        sel = select_iteration(scene, perturb, 0, cam, truth, k=0, tile_size=8)
        assert sel.S == set() and sel.U == set()

    def test_children_precondition(self, rng):
        scene, perturb, cam = random_scene(rng, n_children=2, size=8)
        with pytest.raises(SceneError):
            select_iteration(scene, perturb, 0, cam, np.zeros((8, 8, 3)), 1)

    def test_single_iteration_union_is_s_prime(self, rng):
        scene, perturb, cam = random_scene(rng, n_children=0, size=16)
        truth = np.clip(
            render(scene, perturb, 0, cam, mode="stage1").color + 0.2, 0, 1)
        sel = select_iteration(scene, perturb, 0, cam, truth, k=2, tile_size=8)
        U = run_selection(scene, perturb, self._sampler(scene, perturb, cam, truth),
                          n=1, k=2, tile_size=8)
        assert U == sel.S_prime

    def test_idempotent_union_on_fixed_sample(self, rng):
        scene, perturb, cam = random_scene(rng, n_children=0, size=16)
        truth = np.clip(
            render(scene, perturb, 0, cam, mode="stage1").color + 0.2, 0, 1)
        sampler = self._sampler(scene, perturb, cam, truth)
        u1 = run_selection(scene, perturb, sampler, n=1, k=3, tile_size=8)
        u5 = run_selection(scene, perturb, sampler, n=5, k=3, tile_size=8)
        assert u1 == u5

    def test_union_monotone_in_n(self, rng):
        scene, perturb, cam0 = random_scene(rng, n_tris=4, extra_surfels=2,
                                            n_children=0, size=16)
        cams = [random_scene(np.random.default_rng(s), size=16)[2]
                for s in range(4)]
        truths = {}

        def sampler(r):
            i = int(r.integers(len(cams)))
            if i not in truths:
                truths[i] = np.clip(render(scene, perturb, 0, cams[i],
                                           mode="stage1").color
                                    + 0.3 * (i % 2), 0, 1)
            return 0, cams[i], truths[i]

        prev = set()
        for n in (1, 2, 4):
            U = run_selection(scene, perturb, sampler, n=n, k=2,
                              rng=np.random.default_rng(0), tile_size=8)
            assert prev <= U
            prev = U

    def test_selection_export_roundtrip(self, tmp_path, rng):
        U = {5, 1, 9}
        path = tmp_path / "U.txt"
        save_selection(path, U)
        assert path.read_text() == "1\n5\n9\n"
        assert load_selection(path) == U
