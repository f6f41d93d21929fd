"""Analytic reverse-mode gradients of the renderer.

Each tile is replayed and swept back to front: at every insertion point
the spliced child's gradient is handled before its parent's, mirroring
the reversed forward order. The sweep reconstructs intermediate
transmittances with a division-free recurrence seeded by the cached
terminal transmittance; per-tile partials are merged in fixed tile order
so results do not depend on the worker count.

Stage masks: stage 1 trains every surfel parameter plus the surfel
perturbation table and no child parameters; stage 2 trains every child
parameter, the surfel SH coefficients and both perturbation tables,
forcing the remaining surfel gradients to zero.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import sh as shlib
from ..errors import MissingCacheError, RenderError
from ..rotations import normalize_quat_backward, quat_to_mat_backward
from .forward import RenderOutput, _augmented_run, _tile_pixels
from .projection import LOWPASS_SIGMA, eval_children, eval_surfels


@dataclass
class Upstream:
    """Per-pixel loss gradients flowing into the renderer."""

    d_color: np.ndarray                       # (H, W, 3)
    d_alpha: Optional[np.ndarray] = None      # (H, W)
    d_normal: Optional[np.ndarray] = None     # (H, W, 3) wrt accumulated normals
    d_median: Optional[np.ndarray] = None     # (H, W) wrt median depth
    d_trace_w: Optional[list] = None          # per tile (E, P) wrt omega_i = alpha G T
    d_trace_z: Optional[list] = None          # per tile (E, P) wrt contribution depth


@dataclass
class GradBuffer:
    """Gradients mirroring the scene layout, plus densification signals."""

    s_mu: np.ndarray
    s_rot: np.ndarray
    s_scale: np.ndarray
    s_opacity: np.ndarray
    s_sh: np.ndarray
    c_mu: np.ndarray
    c_rot: np.ndarray
    c_scale: np.ndarray
    c_opacity: np.ndarray
    c_sh: np.ndarray
    p2d: np.ndarray
    p3d: np.ndarray
    screen_grad: np.ndarray     # per-surfel ||dL/d(projected center)|| in px
    seen: np.ndarray            # surfel contributed to this view
    radii: np.ndarray           # projected screen radius (px, 0 if culled)

    @classmethod
    def zeros(cls, scene):
        n, m, k = scene.n_surfels, scene.n_children, scene.n_sh_coeffs
        return cls(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n),
            np.zeros((n, k, 3)),
            np.zeros((m, 3)), np.zeros((m, 4)), np.zeros((m, 3)), np.zeros(m),
            np.zeros((m, k, 3)),
            np.zeros((n, 3)), np.zeros((m, 3)),
            np.zeros(n), np.zeros(n, dtype=bool), np.zeros(n),
        )

    def param_arrays(self):
        return {"s_mu": self.s_mu, "s_rot": self.s_rot, "s_scale": self.s_scale,
                "s_opacity": self.s_opacity, "s_sh": self.s_sh,
                "c_mu": self.c_mu, "c_rot": self.c_rot, "c_scale": self.c_scale,
                "c_opacity": self.c_opacity, "c_sh": self.c_sh,
                "p2d": self.p2d, "p3d": self.p3d}

    def check_finite(self):
        for name, a in self.param_arrays().items():
            if not np.all(np.isfinite(a)):
                raise RenderError(f"non-finite gradient in {name}")

    def add(self, other):
        for name, a in self.param_arrays().items():
            a += getattr(other, name)
        return self


STAGE1_GROUPS = ("s_mu", "s_rot", "s_scale", "s_opacity", "s_sh", "p2d")
STAGE2_GROUPS = ("c_mu", "c_rot", "c_scale", "c_opacity", "c_sh",
                 "s_sh", "p2d", "p3d")


def apply_stage_mask(grads: GradBuffer, stage):
    if stage is None:
        return grads
    keep = STAGE1_GROUPS if stage == "stage1" else STAGE2_GROUPS
    for name, a in grads.param_arrays().items():
        if name not in keep:
            a[:] = 0.0
    return grads


def _sweep(w, Tb, phi, psi, T_final):
    """dL/dw_i = T_i (phi_i - V_i) with the division-free back-to-front
    recurrence V_i = w_{i+1} phi_{i+1} + (1 - w_{i+1}) V_{i+1}, V_E = psi.

    A closed suffix-sum form is used when no contribution saturates;
    exact w = 1 entries (opaque test scenes) fall back to the loop."""
    E = w.shape[0]
    if E == 0:
        return np.zeros_like(w)
    if w.max() < 1.0 - 1e-12:
        pw = phi * w * Tb
        suffix = np.cumsum(pw[::-1], axis=0)[::-1] - pw
        gw = Tb * phi - (suffix + psi * T_final) / (1.0 - w)
    else:
        gw = np.empty_like(w)
        V = np.broadcast_to(psi, w.shape[1:]).copy()
        for i in range(E - 1, -1, -1):
            gw[i] = Tb[i] * (phi[i] - V)
            V = w[i] * phi[i] + (1.0 - w[i]) * V
    gw[w == 0.0] = 0.0
    return gw


def _tile_backward(out: RenderOutput, upstream: Upstream, tile_id):
    """Replay one tile's blending and return per-entry gradients wrt the
    projection-level quantities."""
    projected, buffer = out.projected, out.buffer
    cam = out.cam
    x0, y0, x1, y1 = buffer.tile_rect(tile_id, cam.width, cam.height)
    P = (x1 - x0) * (y1 - y0)
    run = buffer.tile_run(tile_id)
    rows, is_child, _ = _augmented_run(projected, run, out.mode)
    E = len(rows)
    if E == 0:
        return None
    ns = projected.n_surfels
    s_pos = np.nonzero(~is_child)[0]
    c_pos = np.nonzero(is_child)[0]
    s_rows = rows[s_pos]
    c_rows = rows[c_pos] - ns
    xh = _tile_pixels(x0, y0, x1, y1)

    # ---- forward replay ------------------------------------------------
    w = np.zeros((E, P))
    G_s, z_s, valid, obj_branch, u, v, q2, G_obj, G_lp = eval_surfels(
        projected.s_A[s_rows], projected.s_center[s_rows], xh,
        cam.near, cam.far)
    w[s_pos] = projected.s_opacity[s_rows][:, None] * G_s
    if len(c_pos):
        G_c, dx_c, dy_c = eval_children(projected.c_conic[c_rows],
                                        projected.c_center[c_rows], xh)
        w[c_pos] = projected.c_opacity[c_rows][:, None] * G_c
    if out.cutoff > 0.0:
        w[w < out.cutoff] = 0.0
    if out.t_min > 0.0:
        Tp = np.cumprod(1.0 - w, axis=0)
        dead = np.empty_like(w, dtype=bool)
        dead[0] = False
        dead[1:] = Tp[:-1] < out.t_min
        w[dead] = 0.0
    Tprod = np.cumprod(1.0 - w, axis=0)
    T_final = Tprod[-1]
    Tb = np.empty_like(Tprod)
    Tb[0] = 1.0
    Tb[1:] = Tprod[:-1]
    omega = w * Tb

    cached_T = out.transmittance[y0:y1, x0:x1].ravel()
    cached_n = out.n_contrib[y0:y1, x0:x1].ravel()
    if (np.max(np.abs(T_final - cached_T)) > 1e-12
            or np.any((w > 0).sum(axis=0) != cached_n)):
        raise RenderError(f"forward cache does not match replay in tile {tile_id}")

    # ---- upstream slabs -------------------------------------------------
    gC = upstream.d_color[y0:y1, x0:x1].reshape(P, 3).T          # (3, P)
    gA_map = (upstream.d_alpha[y0:y1, x0:x1].ravel()
              if upstream.d_alpha is not None else np.zeros(P))
    rgb = np.zeros((E, 3))
    rgb[s_pos] = projected.s_rgb[s_rows]
    if len(c_pos):
        rgb[c_pos] = projected.c_rgb[c_rows]
    phi = np.einsum("ec,cp->ep", rgb, gC)
    if upstream.d_normal is not None:
        gN = upstream.d_normal[y0:y1, x0:x1].reshape(P, 3).T     # (3, P)
        phi[s_pos] += np.einsum("ec,cp->ep", projected.s_normal[s_rows], gN)
    else:
        gN = None
    if upstream.d_trace_w is not None and upstream.d_trace_w[tile_id] is not None:
        phi += upstream.d_trace_w[tile_id]
    psi = out.background @ gC - gA_map

    gw = _sweep(w, Tb, phi, psi, T_final)

    # ---- per-contribution depth gradients -------------------------------
    gz = np.zeros((E, P))
    if upstream.d_trace_z is not None and upstream.d_trace_z[tile_id] is not None:
        gz += upstream.d_trace_z[tile_id]
    if upstream.d_median is not None:
        med_rows = out.median_row[y0:y1, x0:x1].ravel()
        gmed = upstream.d_median[y0:y1, x0:x1].ravel()
        sel = med_rows >= 0
        if sel.any():
            gz[med_rows[sel], np.nonzero(sel)[0]] += gmed[sel]

    res = {"tile_id": tile_id}

    # ---- surfel entry chains --------------------------------------------
    gw_s = gw[s_pos]                         # (Es, P)
    alpha_s = projected.s_opacity[s_rows][:, None]
    gG = gw_s * alpha_s
    res["s_rows"] = s_rows
    res["s_alpha"] = np.sum(gw_s * G_s, axis=1)
    res["s_rgb"] = np.einsum("ep,cp->ec", omega[s_pos], gC)
    if gN is not None:
        res["s_normal"] = np.einsum("ep,cp->ec", omega[s_pos], gN)
    else:
        res["s_normal"] = np.zeros((len(s_rows), 3))
    b = obj_branch & valid                   # ties resolve to the object branch
    gu = np.where(b, gG * (-u * G_obj), 0.0)
    gv = np.where(b, gG * (-v * G_obj), 0.0)
    lp = (~obj_branch) & valid
    glp = np.where(lp, gG * G_lp / (LOWPASS_SIGMA ** 2), 0.0)
    dxs = xh[0][None, :] - projected.s_center[s_rows][:, 0:1]
    dys = xh[1][None, :] - projected.s_center[s_rows][:, 1:2]
    res["s_center"] = np.stack([np.sum(glp * dxs, axis=1),
                                np.sum(glp * dys, axis=1)], axis=1)
    gz_s = np.where(valid, gz[s_pos], 0.0)
    zsafe = np.where(valid, z_s, 1.0)
    gq0 = gu * zsafe
    gq1 = gv * zsafe
    gq2 = -(u * gu + v * gv) * zsafe - gz_s * zsafe * zsafe
    gq = np.stack([gq0, gq1, gq2], axis=1)   # (Es, 3, P)
    res["s_A"] = np.einsum("ekp,jp->ekj", gq, xh)

    # ---- child entry chains ----------------------------------------------
    if len(c_pos):
        gw_c = gw[c_pos]
        alpha_c = projected.c_opacity[c_rows][:, None]
        gpow = gw_c * alpha_c * G_c
        conic = projected.c_conic[c_rows]
        a = conic[:, 0, 0][:, None]
        bq = conic[:, 0, 1][:, None]
        d = conic[:, 1, 1][:, None]
        gdx = gpow * (-(a * dx_c + bq * dy_c))
        gdy = gpow * (-(bq * dx_c + d * dy_c))
        res["c_rows"] = c_rows
        res["c_alpha"] = np.sum(gw_c * G_c, axis=1)
        res["c_rgb"] = np.einsum("ep,cp->ec", omega[c_pos], gC)
        res["c_center"] = np.stack([-np.sum(gdx, axis=1), -np.sum(gdy, axis=1)], axis=1)
        gcon = np.zeros((len(c_rows), 2, 2))
        gcon[:, 0, 0] = np.sum(gpow * (-0.5 * dx_c * dx_c), axis=1)
        gcon[:, 1, 1] = np.sum(gpow * (-0.5 * dy_c * dy_c), axis=1)
        off = np.sum(gpow * (-0.5 * dx_c * dy_c), axis=1)
        gcon[:, 0, 1] = off
        gcon[:, 1, 0] = off
        res["c_conic"] = gcon
        res["c_z"] = np.sum(gz[c_pos], axis=1)
    return res


def _dir_chain(mu_g, campos, gdir):
    """d(normalize(mu_g - campos))/d(mu_g) applied to gdir."""
    d = mu_g - campos[None, :]
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    dn = d / r
    return (gdir - dn * np.sum(dn * gdir, axis=-1, keepdims=True)) / r


def backward(scene, out: RenderOutput, upstream: Upstream, stage=None,
             workers=1) -> GradBuffer:
    """Gradients of sum(upstream . render outputs) wrt scene parameters."""
    if out.projected is None or out.buffer is None:
        raise MissingCacheError("backward needs the forward cache "
                                "(render with keep_cache=True)")
    projected = out.projected
    cam = out.cam
    K, Rw = cam.K, cam.R
    campos = cam.position
    grads = GradBuffer.zeros(scene)
    ns, nc = projected.n_surfels, projected.n_children

    # projection-level accumulators
    gA = np.zeros((ns, 3, 3))
    gcen_s = np.zeros((ns, 2))
    galpha_s = np.zeros(ns)
    grgb_s = np.zeros((ns, 3))
    gnorm_s = np.zeros((ns, 3))
    gcon_c = np.zeros((nc, 2, 2))
    gcen_c = np.zeros((nc, 2))
    galpha_c = np.zeros(nc)
    grgb_c = np.zeros((nc, 3))
    gz_c = np.zeros(nc)

    tile_ids = range(out.buffer.n_tiles)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _tile_backward(out, upstream, i),
                                    tile_ids))
    else:
        results = [_tile_backward(out, upstream, i) for i in tile_ids]

    for res in results:           # fixed tile order => deterministic sums
        if res is None:
            continue
        np.add.at(gA, res["s_rows"], res["s_A"])
        np.add.at(gcen_s, res["s_rows"], res["s_center"])
        np.add.at(galpha_s, res["s_rows"], res["s_alpha"])
        np.add.at(grgb_s, res["s_rows"], res["s_rgb"])
        np.add.at(gnorm_s, res["s_rows"], res["s_normal"])
        if "c_rows" in res:
            np.add.at(gcon_c, res["c_rows"], res["c_conic"])
            np.add.at(gcen_c, res["c_rows"], res["c_center"])
            np.add.at(galpha_c, res["c_rows"], res["c_alpha"])
            np.add.at(grgb_c, res["c_rows"], res["c_rgb"])
            np.add.at(gz_c, res["c_rows"], res["c_z"])

    gmu_g_scene = np.zeros((scene.n_surfels, 3))   # world-space position grads

    # ---- child chains (parent position pass-through scatters first) ------
    if nc and out.chil_g is not None:
        rows = projected.c_idx
        conic = projected.c_conic
        gS2 = -np.matmul(conic, np.matmul(gcon_c, conic))   # conic = Sigma2^-1
        J = _child_jacobian(projected.c_mu_c, K)
        Sc = projected.c_Sigma_c
        gJ = np.matmul(gS2 + gS2.transpose(0, 2, 1), np.matmul(J, Sc))
        gSc = np.einsum("nji,njk,nkl->nil", J, gS2, J)
        R_cg = projected.c_R_cg
        s_g = projected.c_s_g
        sym = gSc + gSc.transpose(0, 2, 1)
        gR_cg = np.matmul(sym, R_cg * (s_g * s_g)[:, None, :])
        gdiag = np.einsum("nji,njk,nki->ni", R_cg, 0.5 * sym, R_cg)
        gs_g = 2.0 * s_g * gdiag

        gmu_c = _child_jacobian_backward(projected.c_mu_c, K, gJ)
        gmu_c += _center_chain(projected.c_mu_c, K, gcen_c)
        gmu_c[:, 2] += gz_c

        color_raw = projected.c_rgb_raw
        gsh, gdir = shlib.eval_color_backward(scene.c_sh[rows], scene.sh_degree,
                                              projected.c_dir, color_raw, grgb_c)
        mu_g = out.chil_g["mu_g"][rows]
        gmu_g = gmu_c @ Rw + _dir_chain(mu_g, campos, gdir)

        lam = out.chil_g["frame_lam"][rows]
        Rf = out.chil_g["frame_R"][rows]
        grads.c_mu[rows] = lam[:, None] * np.einsum("nji,nj->ni", Rf, gmu_g)
        grads.p3d[rows] = gmu_g
        np.add.at(gmu_g_scene, scene.c_parent[rows], gmu_g)

        gR_g = np.einsum("ji,njk->nik", Rw, gR_cg)
        gR_l = np.einsum("nji,njk->nik", Rf, gR_g)
        q_hat = out.chil_g["q_hat"][rows]
        gq_hat = quat_to_mat_backward(q_hat, gR_l)
        grads.c_rot[rows] = normalize_quat_backward(scene.c_rot[rows], gq_hat)
        grads.c_scale[rows] = gs_g * s_g
        op = projected.c_opacity
        grads.c_opacity[rows] = galpha_c * op * (1.0 - op)
        grads.c_sh[rows] = gsh

    # ---- surfel chains ----------------------------------------------------
    if ns:
        rows = projected.s_idx
        A = projected.s_A
        At = A.transpose(0, 2, 1)
        gB = -np.matmul(At, np.matmul(gA, At))
        gM = np.einsum("ji,njk->nik", K, gB)
        R_c = projected.s_R_c
        s_g = projected.s_s_g
        gs_u = np.einsum("ni,ni->n", R_c[:, :, 0], gM[:, :, 0])
        gs_v = np.einsum("ni,ni->n", R_c[:, :, 1], gM[:, :, 1])
        gR_c = np.zeros_like(R_c)
        gR_c[:, :, 0] = s_g[:, 0:1] * gM[:, :, 0]
        gR_c[:, :, 1] = s_g[:, 1:2] * gM[:, :, 1]
        gR_c[:, :, 2] = projected.s_flip[:, None] * gnorm_s
        gmu_c = gM[:, :, 2] + _center_chain(projected.s_mu_c, K, gcen_s)

        color_raw = projected.s_rgb_raw
        gsh, gdir = shlib.eval_color_backward(scene.s_sh[rows], scene.sh_degree,
                                              projected.s_dir, color_raw, grgb_s)
        mu_g = out.surf_g["mu_g"][rows]
        gmu_g = gmu_c @ Rw + _dir_chain(mu_g, campos, gdir)
        np.add.at(gmu_g_scene, rows, gmu_g)

        gR_g = np.einsum("ji,njk->nik", Rw, gR_c)
        Rf = out.surf_g["frame_R"][rows]
        gR_l = np.einsum("nji,njk->nik", Rf, gR_g)
        q_hat = out.surf_g["q_hat"][rows]
        gq_hat = quat_to_mat_backward(q_hat, gR_l)
        grads.s_rot[rows] = normalize_quat_backward(scene.s_rot[rows], gq_hat)
        grads.s_scale[rows] = np.stack([gs_u, gs_v], axis=1) * s_g
        op = projected.s_opacity
        grads.s_opacity[rows] = galpha_s * op * (1.0 - op)
        grads.s_sh[rows] = gsh

        # densification signal: gradient wrt the projected center in pixels,
        # from the surfel's total world-position gradient this view
        g_cam = gmu_g_scene[rows] @ Rw.T
        zc = projected.s_mu_c[:, 2]
        gpix = np.stack([zc / K[0, 0] * g_cam[:, 0],
                         zc / K[1, 1] * g_cam[:, 1]], axis=1)
        grads.screen_grad[rows] = np.linalg.norm(gpix, axis=1)
        grads.seen[rows] = True
        grads.radii[rows] = projected.s_radius

    # ---- scene-level surfel position chain (covers culled parents too) ----
    lam_all = out.surf_g["frame_lam"]
    Rf_all = out.surf_g["frame_R"]
    grads.s_mu[:] = lam_all[:, None] * np.einsum("nji,nj->ni", Rf_all, gmu_g_scene)
    grads.p2d[:] = gmu_g_scene

    apply_stage_mask(grads, stage)
    grads.check_finite()
    return grads


def _child_jacobian(mu_c, K):
    """First-order pinhole expansion at the mean (2, 3), batched."""
    fx, fy, sk = K[0, 0], K[1, 1], K[0, 1]
    X, Y, Z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    J = np.zeros((len(mu_c), 2, 3))
    J[:, 0, 0] = fx / Z
    J[:, 0, 1] = sk / Z
    J[:, 0, 2] = -(fx * X + sk * Y) / (Z * Z)
    J[:, 1, 1] = fy / Z
    J[:, 1, 2] = -fy * Y / (Z * Z)
    return J


def _child_jacobian_backward(mu_c, K, gJ):
    fx, fy, sk = K[0, 0], K[1, 1], K[0, 1]
    X, Y, Z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    Z2, Z3 = Z * Z, Z * Z * Z
    g = np.zeros_like(mu_c)
    g[:, 0] = gJ[:, 0, 2] * (-fx / Z2)
    g[:, 1] = gJ[:, 0, 2] * (-sk / Z2) + gJ[:, 1, 2] * (-fy / Z2)
    g[:, 2] = (gJ[:, 0, 0] * (-fx / Z2) + gJ[:, 0, 1] * (-sk / Z2)
               + gJ[:, 0, 2] * (2 * (fx * X + sk * Y) / Z3)
               + gJ[:, 1, 1] * (-fy / Z2)
               + gJ[:, 1, 2] * (2 * fy * Y / Z3))
    return g


def _center_chain(mu_c, K, gcenter):
    """Adjoint of mu_c -> pixel projection (K mu)[:2] / (K mu)[2]."""
    h = mu_c @ K.T
    hz = h[:, 2]
    c = h[:, :2] / hz[:, None]
    gh = np.zeros_like(mu_c)
    gh[:, 0] = gcenter[:, 0] / hz
    gh[:, 1] = gcenter[:, 1] / hz
    gh[:, 2] = -(c[:, 0] * gcenter[:, 0] + c[:, 1] * gcenter[:, 1]) / hz
    return gh @ K


@dataclass
class DensifyStats:
    """Running densification counters (reset on every densify event)."""

    grad_accum: np.ndarray
    denom: np.ndarray
    max_radii: np.ndarray

    @classmethod
    def zeros(cls, n_surfels):
        return cls(np.zeros(n_surfels), np.zeros(n_surfels), np.zeros(n_surfels))

    def mean_grad(self):
        return self.grad_accum / np.maximum(self.denom, 1.0)


def accumulate_densify_stats(stats: DensifyStats, grads: GradBuffer) -> DensifyStats:
    """Fold one backward pass into the running per-surfel counters."""
    seen = grads.seen
    stats.grad_accum[seen] += grads.screen_grad[seen]
    stats.denom[seen] += 1.0
    stats.max_radii = np.maximum(stats.max_radii, grads.radii)
    return stats
