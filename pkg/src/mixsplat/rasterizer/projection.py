"""Projection of global Gaussians to a camera.

Surfels keep their exact geometry: per splat we build the 3x3 homography
B = K [s_u t_u, s_v t_v, mu] mapping splat-plane coordinates (u, v, 1) to
homogeneous pixels, and store its inverse A. For a pixel x, q = A (x, 1)
gives the ray-splat intersection u = q0/q2, v = q1/q2 at camera depth
z = 1/q2, so the splat weight is exp(-(u^2+v^2)/2) combined with a fixed
screen-space low-pass Gaussian via max().

Children are volumetric: their 3D covariance is pushed through the
first-order pinhole expansion J at the mean ("EWA"), dropping the third
row/column and dilating the screen covariance for stability.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import sh as shlib
from ..camera import Camera
from ..rotations import normalize_quat, quat_to_mat

LOWPASS_SIGMA = math.sqrt(0.5)   # ~0.7071 px anti-aliasing filter
DILATION = 0.3                   # px^2 added to child screen covariance
CUTOFF = 1.0 / 255.0             # contributions below this are skipped
T_MIN = 1e-4                     # early-termination transmittance
R_CUT2 = 2.0 * math.log(255.0)   # uv radius^2 where a unit Gaussian hits CUTOFF
_EXTENT_EPS = 1e-6               # negligible screen extent (px or px^2)


@dataclass
class ProjectedSplat:
    """Single-projection view handed to evaluate_surfel / evaluate_child."""

    kind: str
    source: int                   # scene index of the primitive
    depth: float                  # camera z of the mean
    opacity: float
    rgb: np.ndarray
    A: Optional[np.ndarray] = None        # surfel: inverse homography (3,3)
    center: Optional[np.ndarray] = None   # projected mean (px)
    conic: Optional[np.ndarray] = None    # child: inverse screen covariance (2,2)
    near: float = 0.0
    far: float = np.inf


class ProjectedSplats:
    """Struct-of-arrays result of projecting a scene to one camera.

    Rows 0..n_surfels-1 are surfels, the rest children; `bbox` rows are
    conservative pixel rects [x0, x1) x [y0, y1) covering every pixel
    where the primitive can exceed the contribution cutoff.
    """

    def __init__(self, cam: Camera):
        self.cam = cam
        # surfels
        self.s_idx = np.zeros(0, dtype=np.int64)
        self.s_A = np.zeros((0, 3, 3))
        self.s_center = np.zeros((0, 2))
        self.s_depth = np.zeros(0)
        self.s_normal = np.zeros((0, 3))
        self.s_flip = np.zeros(0)
        self.s_opacity = np.zeros(0)
        self.s_rgb = np.zeros((0, 3))
        self.s_rgb_raw = np.zeros((0, 3))
        self.s_bbox = np.zeros((0, 4), dtype=np.int64)
        self.s_mu_c = np.zeros((0, 3))
        self.s_R_c = np.zeros((0, 3, 3))
        self.s_s_g = np.zeros((0, 2))
        self.s_dir = np.zeros((0, 3))
        self.s_radius = np.zeros(0)
        # children
        self.c_idx = np.zeros(0, dtype=np.int64)
        self.c_conic = np.zeros((0, 2, 2))
        self.c_center = np.zeros((0, 2))
        self.c_depth = np.zeros(0)
        self.c_opacity = np.zeros(0)
        self.c_rgb = np.zeros((0, 3))
        self.c_rgb_raw = np.zeros((0, 3))
        self.c_bbox = np.zeros((0, 4), dtype=np.int64)
        self.c_mu_c = np.zeros((0, 3))
        self.c_R_cg = np.zeros((0, 3, 3))
        self.c_s_g = np.zeros((0, 3))
        self.c_Sigma_c = np.zeros((0, 3, 3))
        self.c_Sigma2 = np.zeros((0, 2, 2))
        self.c_dir = np.zeros((0, 3))
        # scene surfel index -> projected child row (-1 if none/culled)
        self.child_of_surfel = np.zeros(0, dtype=np.int64)

    @property
    def n_surfels(self):
        return len(self.s_idx)

    @property
    def n_children(self):
        return len(self.c_idx)

    def __len__(self):
        return self.n_surfels + self.n_children

    def __getitem__(self, row) -> ProjectedSplat:
        cam = self.cam
        if row < self.n_surfels:
            return ProjectedSplat("surfel", int(self.s_idx[row]),
                                  float(self.s_depth[row]),
                                  float(self.s_opacity[row]),
                                  self.s_rgb[row], A=self.s_A[row],
                                  center=self.s_center[row],
                                  near=cam.near, far=cam.far)
        j = row - self.n_surfels
        return ProjectedSplat("child", int(self.c_idx[j]),
                              float(self.c_depth[j]),
                              float(self.c_opacity[j]), self.c_rgb[j],
                              center=self.c_center[j], conic=self.c_conic[j],
                              near=cam.near, far=cam.far)

    def bbox(self, row):
        if row < self.n_surfels:
            return self.s_bbox[row]
        return self.c_bbox[row - self.n_surfels]

    def depth(self, row):
        if row < self.n_surfels:
            return self.s_depth[row]
        return self.c_depth[row - self.n_surfels]


def _view_colors(sh, degree, mu_g, campos):
    d = mu_g - campos[None, :]
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    color, raw = shlib.eval_color(sh, degree, d)
    return color, raw, d


def _conic_extremes(brow, b2, r2, lo_img, hi_img):
    """Extremes of (brow.h)/(b2.h) over the disk u^2+v^2 <= r2, h=(u,v,1).

    Solves the stationarity quadratic; unbounded images (splat crosses the
    camera plane inside the disk) fall back to the full image range.
    """
    a, a0 = brow[:, :2], brow[:, 2]
    c, g = b2[:, :2], b2[:, 2]
    A2 = g * g - r2 * np.sum(c * c, axis=-1)
    B1 = g * a0 - r2 * np.sum(a * c, axis=-1)
    C0 = a0 * a0 - r2 * np.sum(a * a, axis=-1)
    bounded = A2 > 1e-30
    safe = np.where(bounded, A2, 1.0)
    disc = np.sqrt(np.maximum(B1 * B1 - A2 * C0, 0.0))
    lo = np.where(bounded, (B1 - disc) / safe, lo_img)
    hi = np.where(bounded, (B1 + disc) / safe, hi_img)
    return lo, hi


def _pixel_rect(lo_x, hi_x, lo_y, hi_y, width, height):
    x0 = np.clip(np.floor(lo_x), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(hi_x) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.floor(lo_y), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(hi_y) + 1, 0, height).astype(np.int64)
    return np.stack([x0, y0, x1, y1], axis=-1)


def project_scene(scene, surf_g, chil_g, cam: Camera, mode="mixed",
                  full_extent=False) -> ProjectedSplats:
    """Project transformed surfels (and children in mixed mode) to cam.

    surf_g / chil_g are the batched dicts from rigging.transform_*;
    culling is independent per primitive: a culled parent never blends,
    but its child keeps its own projection and vice versa. full_extent
    skips footprint culling and lists every kept splat on the whole
    image; the finite-difference tooling uses it to keep the forward
    smooth in position parameters.
    """
    out = ProjectedSplats(cam)
    K, Rw, tw = cam.K, cam.R, cam.t
    campos = cam.position
    W, H = cam.width, cam.height

    # ---- surfels -----------------------------------------------------
    mu_g = surf_g["mu_g"]
    n = len(mu_g)
    mu_c = mu_g @ Rw.T + tw
    depth = mu_c[:, 2]
    keep = (depth > cam.near) & (depth < cam.far)
    R_c = np.einsum("ij,njk->nik", Rw, surf_g["R_g"])
    s_g = surf_g["s_g"]
    M = np.empty((n, 3, 3))
    M[:, :, 0] = s_g[:, 0:1] * R_c[:, :, 0]
    M[:, :, 1] = s_g[:, 1:2] * R_c[:, :, 1]
    M[:, :, 2] = mu_c
    B = np.einsum("ij,njk->nik", K, M)
    detB = np.linalg.det(B)
    scaleB = np.maximum(np.linalg.norm(B, axis=(1, 2)) / math.sqrt(3.0), 1e-30)
    keep &= np.abs(detB) > 1e-12 * scaleB ** 3

    h = mu_c @ K.T
    hz = np.where(np.abs(h[:, 2]) < 1e-30, 1e-30, h[:, 2])
    center = h[:, :2] / hz[:, None]

    lo_x, hi_x = _conic_extremes(B[:, 0], B[:, 2], R_CUT2, 0.0, float(W))
    lo_y, hi_y = _conic_extremes(B[:, 1], B[:, 2], R_CUT2, 0.0, float(H))
    if full_extent:
        bbox = np.tile(np.array([0, 0, W, H], dtype=np.int64), (n, 1))
    else:
        ext = np.maximum(hi_x - lo_x, hi_y - lo_y) * 0.5
        keep &= ext > _EXTENT_EPS
        r_lp = LOWPASS_SIGMA * math.sqrt(R_CUT2)
        lo_x = np.minimum(lo_x, center[:, 0] - r_lp)
        hi_x = np.maximum(hi_x, center[:, 0] + r_lp)
        lo_y = np.minimum(lo_y, center[:, 1] - r_lp)
        hi_y = np.maximum(hi_y, center[:, 1] + r_lp)
        bbox = _pixel_rect(lo_x, hi_x, lo_y, hi_y, W, H)
        keep &= (bbox[:, 2] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 1])

    rows = np.nonzero(keep)[0]
    out.s_idx = rows
    out.s_A = np.linalg.inv(B[rows]) if len(rows) else np.zeros((0, 3, 3))
    out.s_center = center[rows]
    out.s_depth = depth[rows]
    nrm = R_c[rows][:, :, 2]
    flip = np.where(np.sum(nrm * mu_c[rows], axis=-1) > 0.0, -1.0, 1.0)
    out.s_flip = flip
    out.s_normal = nrm * flip[:, None]
    out.s_opacity = surf_g["opacity"][rows]
    color, raw, dirs = _view_colors(scene.s_sh[rows], scene.sh_degree,
                                    mu_g[rows], campos)
    out.s_rgb, out.s_rgb_raw, out.s_dir = color, raw, dirs
    out.s_bbox = bbox[rows]
    out.s_mu_c = mu_c[rows]
    out.s_R_c = R_c[rows]
    out.s_s_g = s_g[rows]
    out.s_radius = np.maximum(bbox[rows, 2] - bbox[rows, 0],
                              bbox[rows, 3] - bbox[rows, 1]) * 0.5

    # ---- children ----------------------------------------------------
    out.child_of_surfel = np.full(scene.n_surfels, -1, dtype=np.int64)
    if chil_g is None or mode == "stage1" or scene.n_children == 0:
        return out
    mu_g = chil_g["mu_g"]
    m = len(mu_g)
    mu_c = mu_g @ Rw.T + tw
    depth = mu_c[:, 2]
    keep = (depth > cam.near) & (depth < cam.far)
    R_cg = np.einsum("ij,njk->nik", Rw, chil_g["R_g"])
    s_g = chil_g["s_g"]
    Sigma_c = np.einsum("nij,nj,nkj->nik", R_cg, s_g * s_g, R_cg)
    fx, fy = K[0, 0], K[1, 1]
    sk = K[0, 1]
    z = np.where(np.abs(depth) < 1e-30, 1e-30, depth)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 1] = sk / z
    J[:, 0, 2] = -(fx * mu_c[:, 0] + sk * mu_c[:, 1]) / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * mu_c[:, 1] / (z * z)
    Sigma2_raw = np.einsum("nij,njk,nlk->nil", J, Sigma_c, J)
    tr = 0.5 * (Sigma2_raw[:, 0, 0] + Sigma2_raw[:, 1, 1])
    det_raw = (Sigma2_raw[:, 0, 0] * Sigma2_raw[:, 1, 1]
               - Sigma2_raw[:, 0, 1] * Sigma2_raw[:, 1, 0])
    eig_max = tr + np.sqrt(np.maximum(tr * tr - det_raw, 0.0))
    if not full_extent:
        keep &= eig_max > _EXTENT_EPS    # pre-dilation extent
    Sigma2 = Sigma2_raw.copy()
    Sigma2[:, 0, 0] += DILATION
    Sigma2[:, 1, 1] += DILATION

    h = mu_c @ K.T
    hz = np.where(np.abs(h[:, 2]) < 1e-30, 1e-30, h[:, 2])
    center = h[:, :2] / hz[:, None]
    if full_extent:
        bbox = np.tile(np.array([0, 0, W, H], dtype=np.int64), (m, 1))
    else:
        half_x = np.sqrt(np.maximum(R_CUT2 * Sigma2[:, 0, 0], 0.0))
        half_y = np.sqrt(np.maximum(R_CUT2 * Sigma2[:, 1, 1], 0.0))
        bbox = _pixel_rect(center[:, 0] - half_x, center[:, 0] + half_x,
                           center[:, 1] - half_y, center[:, 1] + half_y, W, H)
        keep &= (bbox[:, 2] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 1])

    rows = np.nonzero(keep)[0]
    out.c_idx = rows
    out.c_conic = np.linalg.inv(Sigma2[rows]) if len(rows) else np.zeros((0, 2, 2))
    out.c_center = center[rows]
    out.c_depth = depth[rows]
    out.c_opacity = chil_g["opacity"][rows]
    color, raw, dirs = _view_colors(scene.c_sh[rows], scene.sh_degree,
                                    mu_g[rows], campos)
    out.c_rgb, out.c_rgb_raw, out.c_dir = color, raw, dirs
    out.c_bbox = bbox[rows]
    out.c_mu_c = mu_c[rows]
    out.c_R_cg = R_cg[rows]
    out.c_s_g = s_g[rows]
    out.c_Sigma_c = Sigma_c[rows]
    out.c_Sigma2 = Sigma2[rows]
    out.child_of_surfel[scene.c_parent[rows]] = np.arange(len(rows))

    # children blend only where their parent appears in a tile's run, so
    # the parent must be listed in every tile the child's footprint
    # reaches; otherwise the output would depend on the tile size
    srow_of_scene = np.full(scene.n_surfels, -1, dtype=np.int64)
    srow_of_scene[out.s_idx] = np.arange(out.n_surfels)
    pr = srow_of_scene[scene.c_parent[rows]]
    live = pr >= 0
    if live.any():
        pb = out.s_bbox[pr[live]]
        cb = out.c_bbox[live]
        out.s_bbox[pr[live]] = np.stack([
            np.minimum(pb[:, 0], cb[:, 0]), np.minimum(pb[:, 1], cb[:, 1]),
            np.maximum(pb[:, 2], cb[:, 2]), np.maximum(pb[:, 3], cb[:, 3]),
        ], axis=1)
    return out


def project_all(globals_list, cam: Camera) -> ProjectedSplats:
    """Project a list of GlobalGaussian records (spec-level entry point).

    Surfel/child pairing uses each child GlobalGaussian's `source` as the
    index of its parent surfel within the surfel sub-list.
    """
    from types import SimpleNamespace

    surfels = [g for g in globals_list if g.kind == "surfel"]
    children = [g for g in globals_list if g.kind == "child"]

    def batch(gs, dims):
        if not gs:
            return None
        q = normalize_quat(np.stack([np.asarray(g.rot_g, dtype=np.float64) for g in gs]))
        return {
            "mu_g": np.stack([g.mu_g for g in gs]).astype(np.float64),
            "R_g": quat_to_mat(q),
            "s_g": np.stack([g.s_g for g in gs]).astype(np.float64),
            "opacity": np.array([g.opacity for g in gs], dtype=np.float64),
        }

    k = shlib.n_coeffs(0) if not globals_list else len(np.atleast_2d(globals_list[0].sh))
    degree = int(round(math.sqrt(k))) - 1
    fake = SimpleNamespace(
        n_surfels=len(surfels), n_children=len(children), sh_degree=degree,
        s_sh=(np.stack([np.asarray(g.sh, dtype=np.float64) for g in surfels])
              if surfels else np.zeros((0, k, 3))),
        c_sh=(np.stack([np.asarray(g.sh, dtype=np.float64) for g in children])
              if children else np.zeros((0, k, 3))),
        c_parent=np.array([g.source for g in children], dtype=np.int64),
    )
    sb = batch(surfels, 2) or {"mu_g": np.zeros((0, 3)), "R_g": np.zeros((0, 3, 3)),
                               "s_g": np.zeros((0, 2)), "opacity": np.zeros(0)}
    cb = batch(children, 3)
    return project_scene(fake, sb, cb, cam, mode="mixed")


# ----------------------------------------------------------------------
def eval_surfels(A, center, xh, near, far):
    """Vectorized surfel evaluation.

    A: (E, 3, 3), center: (E, 2), xh: (3, P) homogeneous pixel centers.
    Returns (G, z, valid, obj_branch, u, v, q2, G_obj, G_lp), each (E, P).
    Rays parallel to a splat plane or meeting it outside (near, far) are
    invalid and contribute nothing.
    """
    q = np.einsum("eij,jp->eip", A, xh)
    q2 = q[:, 2, :]
    valid = (q2 > 1.0 / far) & (q2 < 1.0 / near)
    safe = np.where(valid, q2, 1.0)
    z = np.where(valid, 1.0 / safe, 0.0)
    u = q[:, 0, :] / safe
    v = q[:, 1, :] / safe
    G_obj = np.where(valid, np.exp(-0.5 * (u * u + v * v)), 0.0)
    dx = xh[0][None, :] - center[:, 0:1]
    dy = xh[1][None, :] - center[:, 1:2]
    G_lp = np.exp(-0.5 * (dx * dx + dy * dy) / (LOWPASS_SIGMA ** 2))
    obj_branch = G_obj >= G_lp
    G = np.where(valid, np.maximum(G_obj, G_lp), 0.0)
    return G, z, valid, obj_branch, u, v, q2, G_obj, G_lp


def eval_children(conic, center, xh):
    """Vectorized child evaluation: G (E, P) plus the pixel offsets."""
    dx = xh[0][None, :] - center[:, 0:1]
    dy = xh[1][None, :] - center[:, 1:2]
    power = -0.5 * (conic[:, 0, 0][:, None] * dx * dx
                    + conic[:, 1, 1][:, None] * dy * dy
                    + (conic[:, 0, 1] + conic[:, 1, 0])[:, None] * dx * dy)
    return np.exp(np.minimum(power, 0.0)), dx, dy


def evaluate_surfel(p: ProjectedSplat, x):
    """Gaussian value and intersection depth of one surfel at pixel x.

    Returns (G, depth); (0.0, None) when the ray is parallel to the splat
    plane or the intersection lies outside (near, far).
    """
    xh = np.array([[x[0]], [x[1]], [1.0]])
    G, z, valid, *_ = eval_surfels(p.A[None], p.center[None], xh, p.near, p.far)
    if not valid[0, 0]:
        return 0.0, None
    return float(G[0, 0]), float(z[0, 0])


def evaluate_child(p: ProjectedSplat, x):
    """Gaussian value of one child at pixel x (its depth is the mean's)."""
    xh = np.array([[x[0]], [x[1]], [1.0]])
    G, _, _ = eval_children(p.conic[None], p.center[None], xh)
    return float(G[0, 0]), float(p.depth)
