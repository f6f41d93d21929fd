import numpy as np
import pytest

from mixsplat import (PerturbationField, RiggedMesh, child_to_global,
                      surfel_to_global, triangle_frame, triangle_frames_all)
from mixsplat.errors import DegenerateTriangleError
from mixsplat.gradcheck import _random_mesh, random_scene
from mixsplat.rigging import transform_children, transform_surfels
from mixsplat.rotations import quat_to_mat
from mixsplat.scene import Child3D, Surfel2D, init_scene


def _right_triangle():
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    return RiggedMesh(verts, np.array([[0, 1, 2]]))


def _rigid(rng):
    from mixsplat.rotations import quat_to_mat, random_unit_quat
    return quat_to_mat(random_unit_quat(rng)), rng.standard_normal(3)


class TestTriangleFrame:
    def test_canonical_right_triangle(self):
        f = triangle_frame(_right_triangle(), 0, 0)
        # columns: edge x-hat, normal x edge = y-hat, normal z-hat
        assert np.allclose(f.R, np.eye(3), atol=1e-12)
        assert np.isclose(f.lam, 1.0)           # edge length 1, height 1
        assert np.allclose(f.T, [1 / 3, 1 / 3, 0])

    def test_rigid_equivariance(self, rng):
        mesh = _random_mesh(rng, 5)
        Q, d = _rigid(rng)
        moved = RiggedMesh(mesh.vertices_canonical @ Q.T + d, mesh.triangles)
        for tri in range(5):
            f0 = triangle_frame(mesh, tri, 0)
            f1 = triangle_frame(moved, tri, 0)
            assert np.allclose(f1.R, Q @ f0.R, atol=1e-12)
            assert np.isclose(f1.lam, f0.lam)
            assert np.allclose(f1.T, Q @ f0.T + d, atol=1e-12)

    def test_uniform_scale_doubles_lambda(self, rng):
        mesh = _random_mesh(rng, 3)
        scaled = RiggedMesh(2.0 * mesh.vertices_canonical, mesh.triangles)
        for tri in range(3):
            f0 = triangle_frame(mesh, tri, 0)
            f1 = triangle_frame(scaled, tri, 0)
            assert np.isclose(f1.lam, 2.0 * f0.lam)
            assert np.allclose(f1.R, f0.R, atol=1e-12)

    def test_orthonormality_across_animation(self, rng):
        mesh = _random_mesh(rng, 6)
        mesh.frames[1] = mesh.vertices_canonical + 0.2 * rng.standard_normal(
            mesh.vertices_canonical.shape)
        for t in (0, 1):
            R, lam, _ = triangle_frames_all(mesh, t)
            eye = np.einsum("nij,nik->njk", R, R)
            assert np.max(np.abs(eye - np.eye(3))) < 1e-6
            assert np.max(np.abs(np.linalg.det(R) - 1.0)) < 1e-6
            assert np.all(lam > 0)

    def test_degenerate_frame_carries_tri_and_t(self):
        mesh = _right_triangle()
        mesh.frames[3] = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        with pytest.raises(DegenerateTriangleError) as e:
            triangle_frame(mesh, 0, 3)
        assert e.value.tri == 0 and e.value.frame == 3


class TestLocalToGlobal:
    def test_zero_local_position_lands_on_centroid(self):
        mesh = _right_triangle()
        f = triangle_frame(mesh, 0, 0)
        s = Surfel2D(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(2), 0.0,
                     np.zeros((4, 3)), 0)
        g = surfel_to_global(s, f)
        assert np.allclose(g.mu_g, f.T)
        assert g.kind == "surfel"

    def test_doubling_lambda_scales_offset_and_extent(self, rng):
        mesh = _random_mesh(rng, 1)
        f = triangle_frame(mesh, 0, 0)
        s = Surfel2D(rng.standard_normal(3), np.array([1.0, 0, 0, 0]),
                     rng.standard_normal(2), 0.3, np.zeros((4, 3)), 0)
        p = rng.standard_normal(3)
        g1 = surfel_to_global(s, f, p)
        f2 = type(f)(f.R, 2.0 * f.lam, f.T)
        g2 = surfel_to_global(s, f2, p)
        assert np.allclose(g2.mu_g - f.T - p, 2.0 * (g1.mu_g - f.T - p))
        assert np.allclose(g2.s_g, 2.0 * g1.s_g)

    def test_identity_local_rotation_gives_frame_rotation(self, rng):
        mesh = _random_mesh(rng, 1)
        f = triangle_frame(mesh, 0, 0)
        s = Surfel2D(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(2), 0.0,
                     np.zeros((4, 3)), 0)
        g = surfel_to_global(s, f)
        assert np.allclose(quat_to_mat(g.rot_g), f.R, atol=1e-12)

    def test_child_at_origin_sits_on_parent(self, rng):
        mesh = _random_mesh(rng, 1)
        f = triangle_frame(mesh, 0, 0)
        parent_mu = rng.standard_normal(3)
        c = Child3D(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0,
                    np.zeros((4, 3)), 0)
        g = child_to_global(c, parent_mu, f)
        assert np.allclose(g.mu_g, parent_mu)

    def test_child_translates_with_parent(self, rng):
        mesh = _random_mesh(rng, 1)
        f = triangle_frame(mesh, 0, 0)
        c = Child3D(rng.standard_normal(3), np.array([1.0, 0, 0, 0]),
                    np.zeros(3), 0.0, np.zeros((4, 3)), 0)
        parent = rng.standard_normal(3)
        d = rng.standard_normal(3)
        g1 = child_to_global(c, parent, f)
        g2 = child_to_global(c, parent + d, f)
        assert np.allclose(g2.mu_g - g1.mu_g, d)

    def test_child_perturbation_plugs_into_position(self):
        mesh = _right_triangle()
        f = triangle_frame(mesh, 0, 0)
        f2 = type(f)(np.eye(3), 2.0, f.T)
        c = Child3D(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0,
                    np.zeros((4, 3)), 0)
        parent = np.array([0.5, 0.25, -0.1])
        g = child_to_global(c, parent, f2, p3d=np.array([0.1, 0.0, 0.0]))
        assert np.allclose(g.mu_g, parent + [0.1, 0.0, 0.0])


class TestBatchedTransformProperties:
    def test_rigid_equivariance_of_global_gaussians(self, rng):
        scene, perturb, _ = random_scene(rng, n_children=3)
        mesh = scene.mesh
        Q, d = _rigid(rng)
        frames0 = triangle_frames_all(mesh, 0)
        moved = RiggedMesh(mesh.vertices_canonical @ Q.T + d, mesh.triangles)
        frames1 = triangle_frames_all(moved, 0)
        # perturbations are world-space; rotate them along for equivariance
        p2d0, p3d0 = perturb.p2d_base, perturb.p3d_base
        s0 = transform_surfels(scene, frames0, p2d0)
        s1 = transform_surfels(scene, frames1, p2d0 @ Q.T)
        assert np.max(np.abs(s1["mu_g"] - (s0["mu_g"] @ Q.T + d))) < 1e-5
        assert np.max(np.abs(s1["R_g"] - np.einsum("ij,njk->nik", Q, s0["R_g"]))) < 1e-5
        c0 = transform_children(scene, frames0, s0["mu_g"], p3d0)
        c1 = transform_children(scene, frames1, s1["mu_g"], p3d0 @ Q.T)
        assert np.max(np.abs(c1["mu_g"] - (c0["mu_g"] @ Q.T + d))) < 1e-5

    def test_scale_linearity(self, rng):
        scene, _, _ = random_scene(rng, n_children=2)
        mesh = scene.mesh
        k = 1.7
        frames0 = triangle_frames_all(mesh, 0)
        scaled = RiggedMesh(k * mesh.vertices_canonical, mesh.triangles)
        frames1 = triangle_frames_all(scaled, 0)
        assert np.max(np.abs(frames1[1] - k * frames0[1])) < 1e-6 * k
        p = np.zeros((scene.n_surfels, 3))
        s0 = transform_surfels(scene, frames0, p)
        s1 = transform_surfels(scene, frames1, p)
        assert np.max(np.abs(s1["mu_g"] - k * s0["mu_g"])) < 1e-6 * k
        assert np.max(np.abs(s1["s_g"] - k * s0["s_g"])) < 1e-6 * k

    def test_zero_perturbation_matches_unperturbed(self, rng):
        scene, _, _ = random_scene(rng, n_children=2)
        frames = triangle_frames_all(scene.mesh, 0)
        field = PerturbationField.zeros_for(scene)
        a = transform_surfels(scene, frames, field.offsets_2d(0))
        b = transform_surfels(scene, frames, np.zeros((scene.n_surfels, 3)))
        assert np.array_equal(a["mu_g"], b["mu_g"])


class TestPerturbationField:
    def test_defaults_to_zeros_and_frame_residuals(self):
        f = PerturbationField(4, 2, per_frame=True)
        assert np.all(f.offsets_2d(0) == 0.0)
        f.p2d_base[:] = 1.0
        f.p2d_res[3] = np.full((4, 3), 0.25)
        assert np.all(f.offsets_2d(3) == 1.25)
        assert np.all(f.offsets_2d(0) == 1.0)

    def test_static_field_ignores_frame_id(self):
        f = PerturbationField(2, 0, per_frame=False)
        f.p2d_base[:] = 2.0
        assert np.all(f.offsets_2d(7) == 2.0)
        assert not f.p2d_res
