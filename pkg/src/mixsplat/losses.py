"""Training objectives for both stages, with hand-written gradients.

Image-space losses return the gradient wrt the rendered image; the
trace-based geometry losses (depth distortion, normal consistency)
return upstream gradients for the rasterizer's backward pass; the
parameter-space clamp losses return gradients wrt the raw parameters.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

from .rasterizer.backward import Upstream

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossWeights:
    """Loss constants; the defaults are the published values."""

    lambda_dssim: float = 0.2
    lambda1: float = 0.01    # local position clamp
    lambda2: float = 1.0     # local scale clamp
    lambda3: float = 1000.0  # depth distortion
    lambda4: float = 0.05    # normal consistency
    lambda5: float = 0.01    # child distance clamp
    eps_pos: float = 1.0
    eps_sca: float = 0.6
    eps_dis: float = 1.0

    def validate(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


# ----------------------------------------------------------------------
# SSIM with symmetric-padded Gaussian windows and an exact adjoint.
def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


class _WindowFilter:
    """Gaussian windowing F and its adjoint for a fixed image shape."""

    def __init__(self, shape, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
        self.kernel = _gauss_kernel(size, sigma)
        self.pad = size // 2
        h, w = shape
        idx = np.pad(np.arange(h * w).reshape(h, w), self.pad, mode="symmetric")
        self.idx = idx
        self.shape = shape

    def apply(self, img):
        padded = img.ravel()[self.idx]
        return correlate2d(padded, self.kernel, mode="valid")

    def adjoint(self, g):
        full = correlate2d(g, self.kernel, mode="full")   # kernel is symmetric
        h, w = self.shape
        return np.bincount(self.idx.ravel(), weights=full.ravel(),
                           minlength=h * w).reshape(h, w)


def ssim(img1, img2, want_grad=False):
    """Mean SSIM over channels; optional gradient wrt img1.

    Standard stabilizers C1 = (K1 L)^2, C2 = (K2 L)^2 with dynamic range
    L = 1; 11x11 Gaussian window, sigma 1.5, symmetric edge padding (so
    constant images keep their closed-form SSIM at the borders).
    """
    img1 = np.atleast_3d(np.asarray(img1, dtype=np.float64))
    img2 = np.atleast_3d(np.asarray(img2, dtype=np.float64))
    if img1.shape != img2.shape:
        raise ValueError("ssim needs equal image shapes")
    C1, C2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    F = _WindowFilter(img1.shape[:2])
    n_px = img1.shape[0] * img1.shape[1]
    n_ch = img1.shape[2]
    total = 0.0
    grad = np.zeros_like(img1) if want_grad else None
    for c in range(n_ch):
        x, y = img1[:, :, c], img2[:, :, c]
        mu1, mu2 = F.apply(x), F.apply(y)
        s11 = F.apply(x * x) - mu1 * mu1
        s22 = F.apply(y * y) - mu2 * mu2
        s12 = F.apply(x * y) - mu1 * mu2
        A1 = 2 * mu1 * mu2 + C1
        A2 = 2 * s12 + C2
        B1 = mu1 * mu1 + mu2 * mu2 + C1
        B2 = s11 + s22 + C2
        D = B1 * B2
        S = (A1 * A2) / D
        total += S.mean()
        if want_grad:
            gS = 1.0 / (n_px * n_ch)
            g_mu1 = gS * (2 * mu2 * A2 / D - 2 * mu1 * S / B1)
            g_s11 = gS * (-S / B2)
            g_s12 = gS * (2 * A1 / D)
            g_mu1 = g_mu1 - 2 * mu1 * g_s11 - mu2 * g_s12
            grad[:, :, c] = (F.adjoint(g_mu1) + 2 * x * F.adjoint(g_s11)
                             + y * F.adjoint(g_s12))
    value = total / n_ch
    return (value, grad) if want_grad else value


def rgb_loss(rendered, truth, lambda_dssim=0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM)/2, with gradient wrt rendered."""
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if rendered.shape != truth.shape:
        raise ValueError("image shape mismatch")
    diff = rendered - truth
    l1 = np.mean(np.abs(diff))
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim(rendered, truth, want_grad=True)
    dssim = (1.0 - s) / 2.0
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim
    grad = (1.0 - lambda_dssim) * g_l1 - 0.5 * lambda_dssim * g_s.reshape(rendered.shape)
    return value, grad, {"l1": l1, "dssim": dssim}


# ----------------------------------------------------------------------
def _clamp_norm_loss(x, eps):
    """Mean over rows of || max(x, eps) ||_2 and its gradient wrt x."""
    if len(x) == 0:
        return 0.0, np.zeros_like(x)
    v = np.maximum(x, eps)
    norms = np.maximum(np.linalg.norm(v, axis=-1), 1e-30)
    value = float(norms.mean())
    grad = np.where(x > eps, v / norms[:, None], 0.0) / len(x)
    return value, grad


def pos_loss(scene, eps_pos=1.0):
    """Clamp penalty on surfel local positions; components below the
    threshold are flat (zero gradient)."""
    return _clamp_norm_loss(scene.s_mu, eps_pos)


def sca_loss(scene, eps_sca=0.6):
    """Clamp penalty on activated surfel scales; gradient is wrt the raw
    (log-space) parameters."""
    act = np.exp(scene.s_scale)
    value, g_act = _clamp_norm_loss(act, eps_sca)
    return value, g_act * act


def dis_loss(scene, p3d, eps_dis=1.0):
    """Clamp penalty on child local position plus its world perturbation;
    the gradient is shared by both addends."""
    if scene.n_children == 0:
        return 0.0, np.zeros((0, 3))
    return _clamp_norm_loss(scene.c_mu + p3d, eps_dis)


# ----------------------------------------------------------------------
def depth_distortion(traces, image_shape, want_grads=False):
    """Mean over pixels of sum_ij w_i w_j |z_i - z_j| over each pixel's
    surfel contributors (w_i = alpha_i G_i T_i at that pixel).

    Exact for arbitrary per-pixel depth order: contributors are sorted by
    depth per pixel and reduced with prefix sums. Returns the loss and,
    if requested, per-tile upstream gradients wrt w_i and z_i.
    """
    if traces is None:
        raise ValueError("depth distortion needs a trace-mode render")
    n_px = float(image_shape[0] * image_shape[1])
    total = 0.0
    gws = [] if want_grads else None
    gzs = [] if want_grads else None
    for tr in traces:
        E = tr.w.shape[0]
        srows = ~tr.is_child
        if E == 0 or srows.sum() == 0:
            if want_grads:
                gws.append(np.zeros_like(tr.w))
                gzs.append(np.zeros_like(tr.w))
            continue
        omega = (tr.w * tr.T)[srows]
        z = tr.z[srows]
        order = np.argsort(z, axis=0, kind="stable")
        oz = np.take_along_axis(z, order, axis=0)
        ow = np.take_along_axis(omega, order, axis=0)
        A = np.cumsum(ow, axis=0)                  # inclusive prefix of w
        Z = np.cumsum(ow * oz, axis=0)             # inclusive prefix of w z
        A_prev = A - ow
        Z_prev = Z - ow * oz
        pair = ow * (oz * A_prev - Z_prev)         # sum over j < i of w_i w_j (z_i - z_j)
        total += 2.0 * pair.sum()
        if want_grads:
            A_tot, Z_tot = A[-1], Z[-1]
            g_ow = 2.0 * ((oz * A_prev - Z_prev) + ((Z_tot - Z) - oz * (A_tot - A)))
            g_oz = 2.0 * ow * (A_prev - (A_tot - A))
            g_omega = np.zeros_like(omega)
            g_z = np.zeros_like(z)
            np.put_along_axis(g_omega, order, g_ow, axis=0)
            np.put_along_axis(g_z, order, g_oz, axis=0)
            gw = np.zeros_like(tr.w)
            gz = np.zeros_like(tr.w)
            gw[srows] = g_omega / n_px
            gz[srows] = g_z / n_px
            gws.append(gw)
            gzs.append(gz)
    value = total / n_px
    return (value, gws, gzs) if want_grads else value


def depth_to_normals(depth, cam):
    """Backproject a depth map and take finite-difference normals.

    Returns (normals (H, W, 3) camera space oriented toward the camera,
    valid mask, points (3, H, W), raw cross products); boundary pixels
    and pixels with an invalid stencil are masked out.
    """
    H, W = depth.shape
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    px, py = np.meshgrid(xs, ys)
    Kinv = np.linalg.inv(cam.K)
    rays = np.einsum("ij,jhw->ihw", Kinv,
                     np.stack([px, py, np.ones_like(px)]))
    pts = depth[None] * rays
    dpdx = np.zeros_like(pts)
    dpdy = np.zeros_like(pts)
    dpdx[:, :, 1:-1] = 0.5 * (pts[:, :, 2:] - pts[:, :, :-2])
    dpdy[:, 1:-1, :] = 0.5 * (pts[:, 2:, :] - pts[:, :-2, :])
    V = np.cross(dpdx, dpdy, axis=0)
    nrm = np.linalg.norm(V, axis=0)
    valid = depth > 0
    stencil = valid.copy()
    stencil[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
                           & valid[:-2, 1:-1] & valid[2:, 1:-1])
    stencil[0, :] = stencil[-1, :] = stencil[:, 0] = stencil[:, -1] = False
    stencil &= nrm > 1e-12
    N = np.where(nrm[None] > 1e-12, V / np.maximum(nrm[None], 1e-30), 0.0)
    flip = np.where(np.sum(N * pts, axis=0) > 0, -1.0, 1.0)
    N = N * flip[None]
    return np.moveaxis(N, 0, -1), stencil, pts, (V, dpdx, dpdy, rays, flip)


def normal_consistency(out, want_grads=False):
    """Mean over pixels of sum_i w_i (1 - n_i . N) with N derived from the
    median depth map; evaluated through the identity alpha - n_acc . N.

    Pixels without a valid normal stencil contribute zero. Returns the
    loss and optional upstream gradients (d_alpha, d_normal, d_median).
    """
    cam = out.cam
    depth = out.median_depth
    H, W = depth.shape
    n_px = float(H * W)
    N, valid, pts, (V, dpdx, dpdy, rays, flip) = depth_to_normals(depth, cam)
    per_px = np.where(valid, out.alpha - np.sum(out.normal * N, axis=-1), 0.0)
    value = per_px.sum() / n_px
    if not want_grads:
        return value
    d_alpha = valid / n_px
    d_nacc = np.where(valid[:, :, None], -N, 0.0) / n_px
    # chain into the median depth map through the normal construction
    gN = np.where(valid[:, :, None], -out.normal, 0.0) / n_px
    gN = np.moveaxis(gN, -1, 0) * flip[None]
    nrm = np.maximum(np.linalg.norm(V, axis=0), 1e-30)
    Nn = V / nrm
    gV = (gN - Nn * np.sum(Nn * gN, axis=0)[None]) / nrm
    gV[:, ~valid] = 0.0
    g_dpdx = np.cross(dpdy, gV, axis=0)
    g_dpdy = np.cross(gV, dpdx, axis=0)
    g_pts = np.zeros_like(pts)
    g_pts[:, :, 2:] += 0.5 * g_dpdx[:, :, 1:-1]
    g_pts[:, :, :-2] -= 0.5 * g_dpdx[:, :, 1:-1]
    g_pts[:, 2:, :] += 0.5 * g_dpdy[:, 1:-1, :]
    g_pts[:, :-2, :] -= 0.5 * g_dpdy[:, 1:-1, :]
    d_median = np.sum(g_pts * rays, axis=0)
    d_median[depth <= 0] = 0.0
    return value, d_alpha, d_nacc, d_median


# ----------------------------------------------------------------------
def combine_stage1(l_rgb, l_pos, l_sca, l_d, l_n, weights: LossWeights):
    """Stage-1 total: rgb + l1*pos + l2*sca + l3*distortion + l4*normal."""
    return (l_rgb + weights.lambda1 * l_pos + weights.lambda2 * l_sca
            + weights.lambda3 * l_d + weights.lambda4 * l_n)


def combine_stage2(l_rgb, l_dis, weights: LossWeights):
    """Stage-2 total: rgb + l5*distance."""
    return l_rgb + weights.lambda5 * l_dis


@dataclass
class LossResult:
    total: float
    parts: dict
    upstream: Upstream
    direct: dict = field(default_factory=dict)   # param name -> gradient array


def total_stage1(out, truth, scene, weights: LossWeights) -> LossResult:
    """Full stage-1 objective with every gradient path populated."""
    l_rgb, g_rgb, rgb_parts = rgb_loss(out.color, truth, weights.lambda_dssim)
    l_pos, g_pos = pos_loss(scene, weights.eps_pos)
    l_sca, g_sca = sca_loss(scene, weights.eps_sca)
    if weights.lambda3 > 0:
        l_d, gtw, gtz = depth_distortion(out.traces, out.color.shape[:2],
                                         want_grads=True)
        gtw = [weights.lambda3 * g for g in gtw]
        gtz = [weights.lambda3 * g for g in gtz]
    else:
        l_d, gtw, gtz = 0.0, None, None
    if weights.lambda4 > 0:
        l_n, g_alpha, g_nacc, g_median = normal_consistency(out, want_grads=True)
        g_alpha = weights.lambda4 * g_alpha
        g_nacc = weights.lambda4 * g_nacc
        g_median = weights.lambda4 * g_median
    else:
        l_n, g_alpha, g_nacc, g_median = 0.0, None, None, None
    total = combine_stage1(l_rgb, l_pos, l_sca, l_d, l_n, weights)
    upstream = Upstream(d_color=g_rgb, d_alpha=g_alpha, d_normal=g_nacc,
                        d_median=g_median, d_trace_w=gtw, d_trace_z=gtz)
    direct = {"s_mu": weights.lambda1 * g_pos,
              "s_scale": weights.lambda2 * g_sca}
    parts = {"rgb": l_rgb, "l1": rgb_parts["l1"], "dssim": rgb_parts["dssim"],
             "pos": l_pos, "sca": l_sca, "dist": l_d, "normal": l_n}
    return LossResult(total, parts, upstream, direct)


def total_stage2(out, truth, scene, p3d, weights: LossWeights) -> LossResult:
    """Full stage-2 objective: rgb plus the child distance clamp."""
    l_rgb, g_rgb, rgb_parts = rgb_loss(out.color, truth, weights.lambda_dssim)
    l_dis, g_dis = dis_loss(scene, p3d, weights.eps_dis)
    total = combine_stage2(l_rgb, l_dis, weights)
    upstream = Upstream(d_color=g_rgb)
    direct = {"c_mu": weights.lambda5 * g_dis, "p3d": weights.lambda5 * g_dis}
    parts = {"rgb": l_rgb, "l1": rgb_parts["l1"], "dssim": rgb_parts["dssim"],
             "dis": l_dis}
    return LossResult(total, parts, upstream, direct)
