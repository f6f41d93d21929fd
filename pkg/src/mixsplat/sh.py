"""Real spherical harmonics up to degree 3 for view-dependent color.

Colors are decoded as clamp(sum_k c_k Y_k(d) + 0.5, 0), the usual
splatting convention: a zero coefficient block decodes to mid-gray.
"""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def rgb_to_sh_dc(rgb):
    """Invert the DC decode: coefficients whose degree-0 color equals rgb."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_basis(degree: int, dirs):
    """Evaluate the SH basis at unit directions.

    dirs: (N, 3) unit vectors. Returns (N, (degree+1)^2).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    B = np.empty((n, n_coeffs(degree)))
    B[:, 0] = SH_C0
    if degree >= 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        B[:, 4] = SH_C2[0] * xy
        B[:, 5] = SH_C2[1] * yz
        B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * xz
        B[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return B


def sh_basis_grad(degree: int, dirs):
    """d(basis)/d(direction): (N, K, 3) for unit directions (N, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    G = np.zeros((n, n_coeffs(degree), 3))
    if degree >= 1:
        G[:, 1, 1] = -SH_C1
        G[:, 2, 2] = SH_C1
        G[:, 3, 0] = -SH_C1
    if degree >= 2:
        G[:, 4, 0] = SH_C2[0] * y
        G[:, 4, 1] = SH_C2[0] * x
        G[:, 5, 1] = SH_C2[1] * z
        G[:, 5, 2] = SH_C2[1] * y
        G[:, 6, 0] = SH_C2[2] * (-2 * x)
        G[:, 6, 1] = SH_C2[2] * (-2 * y)
        G[:, 6, 2] = SH_C2[2] * (4 * z)
        G[:, 7, 0] = SH_C2[3] * z
        G[:, 7, 2] = SH_C2[3] * x
        G[:, 8, 0] = SH_C2[4] * (2 * x)
        G[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        G[:, 9, 0] = SH_C3[0] * 6 * x * y
        G[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        G[:, 10, 0] = SH_C3[1] * y * z
        G[:, 10, 1] = SH_C3[1] * x * z
        G[:, 10, 2] = SH_C3[1] * x * y
        G[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        G[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        G[:, 11, 2] = SH_C3[2] * (8 * y * z)
        G[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        G[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        G[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        G[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        G[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        G[:, 13, 2] = SH_C3[4] * (8 * x * z)
        G[:, 14, 0] = SH_C3[5] * (2 * x * z)
        G[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        G[:, 14, 2] = SH_C3[5] * (xx - yy)
        G[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        G[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return G


def eval_color(coeffs, degree: int, dirs):
    """Decode RGB from SH coefficients at unit view directions.

    coeffs: (N, K, 3), dirs: (N, 3). Returns (colors (N, 3), raw (N, 3));
    colors are clamped at zero, raw is the pre-clamp value.
    """
    B = sh_basis(degree, dirs)
    raw = np.einsum("nk,nkc->nc", B, coeffs) + 0.5
    return np.maximum(raw, 0.0), raw


def eval_color_backward(coeffs, degree: int, dirs, raw, g_color):
    """Adjoint of eval_color.

    Returns (g_coeffs (N, K, 3), g_dirs (N, 3)). The clamp passes no
    gradient where raw <= 0.
    """
    g_raw = np.where(raw > 0.0, g_color, 0.0)
    B = sh_basis(degree, dirs)
    g_coeffs = np.einsum("nk,nc->nkc", B, g_raw)
    dB = sh_basis_grad(degree, dirs)
    g_dirs = np.einsum("nkd,nkc,nc->nd", dB, coeffs, g_raw)
    return g_coeffs, g_dirs
