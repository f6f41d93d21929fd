import numpy as np
import pytest

from mixsplat.gradcheck import draw_checkable_scene, random_scene
from mixsplat.losses import (LossWeights, combine_stage1, combine_stage2,
                             depth_distortion, dis_loss, normal_consistency,
                             pos_loss, rgb_loss, sca_loss, ssim, total_stage1,
                             total_stage2)
from mixsplat.rasterizer.backward import backward
from mixsplat.rasterizer.forward import TileTrace, render

from _reference import naive_tile_mse  # noqa: F401  (shared helper import check)

SSIM_C1, SSIM_C2 = 0.01 ** 2, 0.03 ** 2


class TestSsimAndRgb:
    def test_identical_images_zero_loss(self, rng):
        img = rng.random((16, 16, 3))
        value, grad, parts = rgb_loss(img, img.copy())
        assert value == 0.0
        assert parts["l1"] == 0.0 and parts["dssim"] < 1e-12
        assert np.allclose(grad, 0.0)

    def test_constant_offset_closed_form(self):
        a = np.full((24, 24, 3), 0.4)
        b = np.full((24, 24, 3), 0.5)
        value, _, parts = rgb_loss(a, b, lambda_dssim=0.2)
        assert np.isclose(parts["l1"], 0.1, atol=1e-12)
        s_lum = (2 * 0.4 * 0.5 + SSIM_C1) / (0.4 ** 2 + 0.5 ** 2 + SSIM_C1)
        assert np.isclose(ssim(a, b), s_lum, atol=1e-12)
        expect = 0.8 * 0.1 + 0.2 * (1 - s_lum) / 2
        assert np.isclose(value, expect, atol=1e-12)

    def test_l1_term_symmetric(self, rng):
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        assert np.isclose(rgb_loss(a, b)[2]["l1"], rgb_loss(b, a)[2]["l1"])

    def test_ssim_gradient_matches_fd(self, rng):
        a = 0.3 + 0.4 * rng.random((10, 10, 3))
        b = 0.3 + 0.4 * rng.random((10, 10, 3))
        _, g = ssim(a, b, want_grad=True)
        h = 1e-6
        for idx in [(0, 0, 0), (5, 4, 1), (9, 9, 2), (2, 7, 0)]:
            ap = a.copy(); ap[idx] += h
            am = a.copy(); am[idx] -= h
            fd = (ssim(ap, b) - ssim(am, b)) / (2 * h)
            assert np.isclose(g[idx], fd, rtol=1e-5, atol=1e-9)

    def test_rgb_gradient_matches_fd(self, rng):
        a = 0.2 + 0.6 * rng.random((9, 9, 3))
        b = 0.2 + 0.6 * rng.random((9, 9, 3))
        _, g, _ = rgb_loss(a, b)
        h = 1e-6
        for idx in [(0, 0, 0), (4, 4, 1), (8, 3, 2)]:
            ap = a.copy(); ap[idx] += h
            am = a.copy(); am[idx] -= h
            fd = (rgb_loss(ap, b)[0] - rgb_loss(am, b)[0]) / (2 * h)
            assert np.isclose(g[idx], fd, rtol=1e-4, atol=1e-9)


class TestClampLosses:
    def test_pos_all_zero_gives_sqrt3_flat(self, quad_scene):
        value, grad = pos_loss(quad_scene, eps_pos=1.0)
        assert np.isclose(value, np.sqrt(3.0))
        assert not np.any(grad)

    def test_pos_one_raised_component(self, quad_scene):
        quad_scene.s_mu[0] = [2.0, 0.0, 0.0]
        value, grad = pos_loss(quad_scene, 1.0)
        expect = (np.sqrt(6.0) + np.sqrt(3.0)) / 2.0   # mean over 2 surfels
        assert np.isclose(value, expect)
        assert grad[0, 0] > 0 and grad[0, 1] == 0 and not np.any(grad[1])

    def test_pos_gradient_fd(self, quad_scene, rng):
        quad_scene.s_mu = rng.uniform(-2, 2, quad_scene.s_mu.shape)
        quad_scene.s_mu[np.abs(quad_scene.s_mu - 1.0) < 0.05] = 1.2
        _, grad = pos_loss(quad_scene, 1.0)
        h = 1e-6
        for idx in [(0, 0), (0, 2), (1, 1)]:
            keep = quad_scene.s_mu[idx]
            quad_scene.s_mu[idx] = keep + h
            fp = pos_loss(quad_scene, 1.0)[0]
            quad_scene.s_mu[idx] = keep - h
            fm = pos_loss(quad_scene, 1.0)[0]
            quad_scene.s_mu[idx] = keep
            assert np.isclose(grad[idx], (fp - fm) / (2 * h), rtol=1e-5, atol=1e-10)

    def test_sca_below_threshold_flat(self, quad_scene):
        quad_scene.s_scale[:] = np.log(0.5)
        value, grad = sca_loss(quad_scene, eps_sca=0.6)
        assert np.isclose(value, np.sqrt(2 * 0.36))
        assert not np.any(grad)

    def test_sca_above_threshold(self, quad_scene):
        quad_scene.s_scale[0] = np.log([2.0, 0.5])
        quad_scene.s_scale[1] = np.log([0.5, 0.5])
        value, grad = sca_loss(quad_scene, 0.6)
        expect = (np.sqrt(4.0 + 0.36) + np.sqrt(0.72)) / 2.0
        assert np.isclose(value, expect)
        assert grad[0, 0] > 0 and grad[0, 1] == 0

    def test_dis_clamped_and_raised(self, rng):
        scene, perturb, _ = random_scene(rng, n_children=3)
        scene.c_mu[:] = 0.0
        p3d = np.zeros((scene.n_children, 3))
        value, grad = dis_loss(scene, p3d, eps_dis=1.0)
        assert np.isclose(value, np.sqrt(3.0))
        assert not np.any(grad)
        scene.c_mu[0] = [3.0, 0.0, 0.0]
        value, grad = dis_loss(scene, p3d, 1.0)
        expect = (np.sqrt(11.0) + (scene.n_children - 1) * np.sqrt(3.0)) / scene.n_children
        assert np.isclose(value, expect)
        # gradient splits equally between mu and the perturbation
        h = 1e-6
        p3d[0, 0] += h
        fp = dis_loss(scene, p3d, 1.0)[0]
        p3d[0, 0] -= 2 * h
        fm = dis_loss(scene, p3d, 1.0)[0]
        p3d[0, 0] += h
        assert np.isclose(grad[0, 0], (fp - fm) / (2 * h), rtol=1e-5)


def _trace(ws, Ts, zs, n_px=1):
    ws = np.asarray(ws, dtype=np.float64).reshape(-1, n_px)
    Ts = np.asarray(Ts, dtype=np.float64).reshape(-1, n_px)
    zs = np.asarray(zs, dtype=np.float64).reshape(-1, n_px)
    E = ws.shape[0]
    return TileTrace(0, (0, 0, n_px, 1), np.arange(E),
                     np.zeros(E, dtype=bool), ws, Ts, zs)


class TestDepthDistortion:
    def test_single_contributor_is_zero(self):
        tr = _trace([0.7], [1.0], [2.0])
        assert depth_distortion([tr], (1, 1)) == 0.0

    def test_two_contributors_expand_double_sum(self):
        # omega = (0.5, 0.5), z = (1, 2) -> 2 * 0.25 * |1-2| = 0.5
        tr = _trace([0.5, 1.0], [1.0, 0.5], [1.0, 2.0])
        assert np.isclose(depth_distortion([tr], (1, 1)), 0.5, atol=1e-15)

    def test_equal_depths_zero(self):
        tr = _trace([0.5, 1.0], [1.0, 0.5], [3.0, 3.0])
        assert depth_distortion([tr], (1, 1)) == 0.0

    def test_contributor_permutation_invariance(self, rng):
        w = rng.uniform(0.05, 0.5, 6)
        T = np.concatenate([[1.0], np.cumprod(1 - w)[:-1]])
        z = rng.uniform(1, 5, 6)
        base = depth_distortion([_trace(w, T, z)], (1, 1))
        perm = rng.permutation(6)
        omega = w * T
        # permute contributors but keep their omegas (w' with T'=1)
        shuffled = depth_distortion([_trace(omega[perm], np.ones(6), z[perm])],
                                    (1, 1))
        assert np.isclose(base, shuffled, atol=1e-12)

    def test_matches_brute_force_double_sum(self, rng):
        for _ in range(5):
            E, P = 5, 7
            w = rng.uniform(0, 0.6, (E, P))
            T = np.vstack([np.ones((1, P)), np.cumprod(1 - w, axis=0)[:-1]])
            z = rng.uniform(0.5, 6.0, (E, P))
            tr = TileTrace(0, (0, 0, P, 1), np.arange(E),
                           np.zeros(E, dtype=bool), w, T, z)
            omega = w * T
            expect = 0.0
            for p in range(P):
                for i in range(E):
                    for j in range(E):
                        expect += omega[i, p] * omega[j, p] * abs(z[i, p] - z[j, p])
            got = depth_distortion([tr], (P, 1))
            assert np.isclose(got, expect / P, rtol=1e-12)

    def test_gradients_match_fd(self, rng):
        E, P = 4, 3
        w = rng.uniform(0.05, 0.6, (E, P))
        T = np.vstack([np.ones((1, P)), np.cumprod(1 - w, axis=0)[:-1]])
        z = rng.uniform(0.5, 6.0, (E, P))

        def value(zz):
            return depth_distortion(
                [TileTrace(0, None, np.arange(E), np.zeros(E, dtype=bool),
                           w, T, zz)], (P, 1))

        _, gw, gz = depth_distortion(
            [TileTrace(0, None, np.arange(E), np.zeros(E, dtype=bool), w, T, z)],
            (P, 1), want_grads=True)
        h = 1e-6
        for idx in [(0, 0), (2, 1), (3, 2)]:
            zp = z.copy(); zp[idx] += h
            zm = z.copy(); zm[idx] -= h
            fd = (value(zp) - value(zm)) / (2 * h)
            assert np.isclose(gz[0][idx], fd, rtol=1e-6, atol=1e-12)


class TestNormalConsistency:
    def test_fronto_parallel_plane_near_zero(self, quad_scene, front_cam):
        quad_scene.s_opacity[:] = 4.0
        out = render(quad_scene, None, 0, front_cam, mode="stage1")
        loss = normal_consistency(out)
        assert -1e-12 < loss < 1e-3

    def test_orthogonal_normals_cost_one(self, quad_scene, front_cam):
        quad_scene.s_opacity[:] = 8.0
        out = render(quad_scene, None, 0, front_cam, mode="stage1")
        base = normal_consistency(out)
        out.normal = np.zeros_like(out.normal)
        out.normal[:, :, 0] = out.alpha    # unit weight, orthogonal to N
        loss = normal_consistency(out)
        interior = (out.median_depth > 0)[1:-1, 1:-1].mean()
        assert loss > 0.5 * interior       # roughly alpha * 1 per valid pixel
        assert loss > base

    def test_flipping_splat_normals_raises_loss(self, quad_scene, front_cam):
        quad_scene.s_opacity[:] = 4.0
        out = render(quad_scene, None, 0, front_cam, mode="stage1")
        base = normal_consistency(out)
        out.normal = -out.normal
        assert normal_consistency(out) > base


class TestTotals:
    def test_stage1_weight_wiring(self):
        w = LossWeights()
        assert combine_stage1(0, 0, 0, 0.001, 0, w) == pytest.approx(1.0)
        assert combine_stage1(0.5, 0, 0, 0, 0, w) == 0.5
        assert combine_stage1(0, 1.0, 0, 0, 0, w) == pytest.approx(0.01)
        assert combine_stage1(0, 0, 1.0, 0, 0, w) == 1.0
        assert combine_stage1(0, 0, 0, 0, 1.0, w) == pytest.approx(0.05)

    def test_stage2_weight_wiring(self):
        w = LossWeights()
        assert combine_stage2(0, 1.0, w) == pytest.approx(0.01)
        assert combine_stage2(0.3, 0, w) == 0.3
        w0 = LossWeights(lambda5=0.0)
        assert combine_stage2(0.3, 5.0, w0) == 0.3

    def test_weight_zero_config_reduces_to_rgb(self, rng):
        scene, perturb, cam = random_scene(rng, n_children=0, size=10)
        truth = rng.random((10, 10, 3))
        w = LossWeights(lambda1=0, lambda2=0, lambda3=0, lambda4=0)
        out = render(scene, perturb, 0, cam, mode="stage1", want_trace=True)
        res = total_stage1(out, truth, scene, w)
        assert np.isclose(res.total, res.parts["rgb"])
        assert res.upstream.d_alpha is None and res.upstream.d_trace_w is None


def _loss_margins(out):
    """Distances to the stage-1 loss kinks (median switch, depth ties)."""
    med, zgap = np.inf, np.inf
    for tr in out.traces:
        srows = ~tr.is_child
        if not srows.any():
            continue
        w, T, z = tr.w[srows], tr.T[srows], tr.z[srows]
        A_after = 1.0 - T * (1.0 - w)
        act = w > 0
        if act.any():
            med = min(med, float(np.min(np.abs(A_after[act] - 0.5))))
        omega = w * T
        E = w.shape[0]
        for i in range(E):
            for j in range(i + 1, E):
                both = (omega[i] > 1e-4) & (omega[j] > 1e-4)
                if both.any():
                    zgap = min(zgap, float(np.min(np.abs(z[i] - z[j])[both])))
    return med, zgap


class TestFullLossGradients:
    """End-to-end FD of the stage totals through every gradient path."""

    def _stage1_setup(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(40):
            scene, perturb, cam = draw_checkable_scene(
                rng, mode="stage1", n_tris=2, extra_surfels=1, n_children=0,
                size=10)
            kw = dict(mode="stage1", t_min=0.0, cutoff=0.0, full_extent=True,
                      tile_size=8, want_trace=True)
            out = render(scene, perturb, 0, cam, **kw)
            med, zgap = _loss_margins(out)
            if med > 1e-3 and zgap > 1e-3:
                truth = np.clip(out.color + 0.15 * rng.standard_normal(
                    out.color.shape), 0.05, 0.95)
                return scene, perturb, cam, truth, kw, rng
        raise RuntimeError("no margin-clean stage-1 scene found")

    def test_stage1_total_gradients_fd(self):
        scene, perturb, cam, truth, kw, rng = self._stage1_setup(21)
        weights = LossWeights(lambda3=10.0)   # keep distortion comparable

        def total():
            out = render(scene, perturb, 0, cam, keep_cache=False, **kw)
            return total_stage1(out, truth, scene, weights).total

        out = render(scene, perturb, 0, cam, **kw)
        res = total_stage1(out, truth, scene, weights)
        grads = backward(scene, out, res.upstream, stage="stage1")
        grads.s_mu += res.direct["s_mu"]
        grads.s_scale += res.direct["s_scale"]
        gtable = grads.param_arrays()
        h = 1e-5
        checked = 0
        for name in ("s_mu", "s_rot", "s_scale", "s_opacity", "s_sh", "p2d"):
            arr = {"p2d": perturb.p2d_base}.get(name, getattr(scene, name, None))
            if arr is None:
                arr = getattr(scene, name)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                keep = arr[idx]
                arr[idx] = keep + h
                fp = total()
                arr[idx] = keep - h
                fm = total()
                arr[idx] = keep
                fd = (fp - fm) / (2 * h)
                a = gtable[name][idx]
                if max(abs(a), abs(fd)) < 1e-6:
                    continue
                assert abs(a - fd) / max(abs(a), abs(fd)) < 1e-3, \
                    (name, idx, a, fd)
                checked += 1
        assert checked > 30

    def test_stage2_total_gradients_fd(self):
        rng = np.random.default_rng(31)
        scene, perturb, cam = draw_checkable_scene(
            rng, mode="mixed", n_tris=2, extra_surfels=0, n_children=2, size=10)
        kw = dict(mode="mixed", t_min=0.0, cutoff=0.0, full_extent=True,
                  tile_size=16)
        out0 = render(scene, perturb, 0, cam, **kw)
        truth = np.clip(out0.color + 0.15 * rng.standard_normal(out0.color.shape),
                        0.05, 0.95)
        weights = LossWeights()

        def total():
            out = render(scene, perturb, 0, cam, keep_cache=False, **kw)
            return total_stage2(out, truth, scene, perturb.offsets_3d(0),
                                weights).total

        out = render(scene, perturb, 0, cam, **kw)
        res = total_stage2(out, truth, scene, perturb.offsets_3d(0), weights)
        grads = backward(scene, out, res.upstream, stage="stage2")
        grads.c_mu += res.direct["c_mu"]
        grads.p3d += res.direct["p3d"]
        gtable = grads.param_arrays()
        h = 1e-5
        checked = 0
        params = {"c_mu": scene.c_mu, "c_rot": scene.c_rot,
                  "c_scale": scene.c_scale, "c_opacity": scene.c_opacity,
                  "c_sh": scene.c_sh, "s_sh": scene.s_sh,
                  "p2d": perturb.p2d_base, "p3d": perturb.p3d_base}
        for name, arr in params.items():
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                keep = arr[idx]
                arr[idx] = keep + h
                fp = total()
                arr[idx] = keep - h
                fm = total()
                arr[idx] = keep
                fd = (fp - fm) / (2 * h)
                a = gtable[name][idx]
                if max(abs(a), abs(fd)) < 1e-6:
                    continue
                assert abs(a - fd) / max(abs(a), abs(fd)) < 1e-3, \
                    (name, idx, a, fd)
                checked += 1
        assert checked > 30
