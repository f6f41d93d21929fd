"""Local-to-global transformation of mesh-bound Gaussians.

Every triangle carries an orthonormal frame R, a scalar size lambda and
its centroid T for a given animation frame. Surfels map into world space
as mu_g = lambda * R * mu_l + T + p2d(t); children substitute the parent
surfel's global position for T. Rotations compose as R * r_l and scales
multiply by lambda.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTriangleError, SceneError
from .mesh import RiggedMesh
from .rotations import mat_to_quat, normalize_quat, quat_mul, quat_to_mat
from .scene import MixedScene, sigmoid

MIN_FRAME_AREA = 1e-12


@dataclass
class TriangleFrame:
    R: np.ndarray        # (3, 3) columns: edge dir, normal x edge, normal
    lam: float           # mean of first-edge length and its perpendicular height
    T: np.ndarray        # (3,) vertex centroid


@dataclass
class GlobalGaussian:
    mu_g: np.ndarray
    rot_g: np.ndarray    # unit quaternion
    s_g: np.ndarray      # (2,) surfel / (3,) child, scene units
    opacity: float
    sh: np.ndarray
    kind: str            # "surfel" | "child"
    source: int


class PerturbationField:
    """Learnable world-space offsets: a frame-independent base table per
    primitive, plus optional per-frame residual tables."""

    def __init__(self, n_surfels, n_children, per_frame=False):
        self.p2d_base = np.zeros((n_surfels, 3))
        self.p3d_base = np.zeros((n_children, 3))
        self.per_frame = bool(per_frame)
        self.p2d_res = {}
        self.p3d_res = {}

    @classmethod
    def zeros_for(cls, scene: MixedScene, per_frame=False):
        return cls(scene.n_surfels, scene.n_children, per_frame)

    def _residual(self, table, t, n):
        if not self.per_frame:
            return None
        t = int(t)
        if t not in table:
            table[t] = np.zeros((n, 3))
        return table[t]

    def offsets_2d(self, t):
        out = self.p2d_base
        res = self._residual(self.p2d_res, t, len(self.p2d_base))
        return out if res is None else out + res

    def offsets_3d(self, t):
        out = self.p3d_base
        res = self._residual(self.p3d_res, t, len(self.p3d_base))
        return out if res is None else out + res

    def grow_surfels(self, parent_rows):
        """Append rows for new surfels cloned/split from parent_rows."""
        self.p2d_base = np.concatenate([self.p2d_base, self.p2d_base[parent_rows]])
        for t in self.p2d_res:
            self.p2d_res[t] = np.concatenate([self.p2d_res[t], self.p2d_res[t][parent_rows]])

    def prune_surfels(self, keep_mask):
        self.p2d_base = self.p2d_base[keep_mask]
        for t in self.p2d_res:
            self.p2d_res[t] = self.p2d_res[t][keep_mask]

    def grow_children(self, n_new):
        self.p3d_base = np.concatenate([self.p3d_base, np.zeros((n_new, 3))])
        for t in self.p3d_res:
            self.p3d_res[t] = np.concatenate([self.p3d_res[t], np.zeros((n_new, 3))])


# ----------------------------------------------------------------------
def triangle_frames_all(mesh: RiggedMesh, t) -> tuple:
    """Frames for every triangle at animation frame t.

    Returns (R (F,3,3), lam (F,), T (F,3)). The frame's first column is
    the normalized v1->v2 edge, the third the unit normal, the second
    their cross product (normal x edge), so det(R) = +1.
    """
    V = mesh.vertices_at(t)
    tri = V[mesh.triangles]                      # (F, 3, 3)
    e = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    cr = np.cross(e, e2)
    cr_norm = np.linalg.norm(cr, axis=-1)
    areas = 0.5 * cr_norm
    bad = np.nonzero(areas <= MIN_FRAME_AREA)[0]
    if bad.size:
        raise DegenerateTriangleError(int(bad[0]), frame=int(t), area=float(areas[bad[0]]))
    e_len = np.linalg.norm(e, axis=-1)
    ehat = e / e_len[:, None]
    n = cr / cr_norm[:, None]
    R = np.stack([ehat, np.cross(n, ehat), n], axis=-1)
    height = 2.0 * areas / e_len                 # perpendicular from v3 onto the edge
    lam = 0.5 * (e_len + height)
    T = tri.mean(axis=1)
    return R, lam, T


def triangle_frame(mesh: RiggedMesh, tri: int, t) -> TriangleFrame:
    if tri < 0 or tri >= mesh.n_triangles:
        raise SceneError(f"triangle index {tri} out of range")
    R, lam, T = triangle_frames_all(mesh, t)
    return TriangleFrame(R[tri], float(lam[tri]), T[tri])


class FrameCache:
    """Memoizes triangle frames per animation frame id."""

    def __init__(self, mesh: RiggedMesh):
        self.mesh = mesh
        self._cache = {}

    def get(self, t):
        t = int(t)
        if t not in self._cache:
            self._cache[t] = triangle_frames_all(self.mesh, t)
        return self._cache[t]


# ----------------------------------------------------------------------
def transform_surfels(scene: MixedScene, frames, p2d):
    """Batched surfel local-to-global map.

    frames: (R, lam, T) arrays over triangles; p2d: (N, 3) world offsets.
    Returns dict with mu_g (N,3), R_g (N,3,3), rot_g (N,4), s_g (N,2),
    opacity (N,), plus the per-surfel frame quantities used by gradients.
    """
    Rf, lam, Tf = frames
    tri = scene.s_parent_tri
    R = Rf[tri]
    lam_s = lam[tri]
    T = Tf[tri]
    mu_g = lam_s[:, None] * np.einsum("nij,nj->ni", R, scene.s_mu) + T + p2d
    q_hat = normalize_quat(scene.s_rot)
    R_l = quat_to_mat(q_hat)
    R_g = R @ R_l
    s_g = lam_s[:, None] * np.exp(scene.s_scale)
    return {
        "mu_g": mu_g, "R_g": R_g, "s_g": s_g,
        "opacity": sigmoid(scene.s_opacity),
        "q_hat": q_hat, "frame_R": R, "frame_lam": lam_s,
    }


def transform_children(scene: MixedScene, frames, parent_mu_g, p3d):
    """Batched child local-to-global map; parent_mu_g is the (N,3) surfel
    global-position table from transform_surfels."""
    Rf, lam, _ = frames
    tri = scene.s_parent_tri[scene.c_parent]
    R = Rf[tri]
    lam_c = lam[tri]
    mu_g = (lam_c[:, None] * np.einsum("nij,nj->ni", R, scene.c_mu)
            + parent_mu_g[scene.c_parent] + p3d)
    q_hat = normalize_quat(scene.c_rot)
    R_l = quat_to_mat(q_hat)
    R_g = R @ R_l
    s_g = lam_c[:, None] * np.exp(scene.c_scale)
    return {
        "mu_g": mu_g, "R_g": R_g, "s_g": s_g,
        "opacity": sigmoid(scene.c_opacity),
        "q_hat": q_hat, "frame_R": R, "frame_lam": lam_c,
    }


def surfel_to_global(surfel, frame: TriangleFrame, p2d=None) -> GlobalGaussian:
    """Single-surfel transform (see transform_surfels for the batched path)."""
    p = np.zeros(3) if p2d is None else np.asarray(p2d, dtype=np.float64)
    mu_g = frame.lam * frame.R @ surfel.mu_l + frame.T + p
    q_hat = normalize_quat(np.asarray(surfel.rot_l, dtype=np.float64))
    rot_g = quat_mul(mat_to_quat(frame.R), q_hat)
    s_g = frame.lam * np.exp(surfel.s_l)
    return GlobalGaussian(mu_g, rot_g, s_g, float(sigmoid(surfel.opacity_raw)),
                          surfel.sh, "surfel", -1)


def child_to_global(child, parent_global_mu, frame: TriangleFrame, p3d=None) -> GlobalGaussian:
    """Single-child transform: the parent's global position replaces T."""
    p = np.zeros(3) if p3d is None else np.asarray(p3d, dtype=np.float64)
    mu_g = frame.lam * frame.R @ child.mu_l + np.asarray(parent_global_mu) + p
    q_hat = normalize_quat(np.asarray(child.rot_l, dtype=np.float64))
    rot_g = quat_mul(mat_to_quat(frame.R), q_hat)
    s_g = frame.lam * np.exp(child.s_l)
    return GlobalGaussian(mu_g, rot_g, s_g, float(sigmoid(child.opacity_raw)),
                          child.sh, "child", -1)
