"""Binary containers for scenes, perturbation fields and gradient dumps.

All files are little-endian. Layouts:

MXGS (scene) v1:
  magic "MXGS", version u32, sh_degree u32, n_triangles u32,
  n_surfels u32, n_children u32,
  surfel f32 arrays in field order: mu_l (N,3), rot_l (N,4), s_l (N,2),
    opacity_raw (N,), sh (N,K,3),
  child f32 arrays: mu_l (M,3), rot_l (M,4), s_l (M,3), opacity_raw (M,),
    sh (M,K,3),
  tree index arrays: surfel parent_tri u32 (N,), surfel child i32 (N,)
    (-1 = none), child parent_surfel u32 (M,).

MXPF (perturbation field) v1:
  magic "MXPF", version u32, n_surfels u32, n_children u32, flags u32
  (bit0 = per-frame residuals), n_frames u32, p2d_base f32 (N,3),
  p3d_base f32 (M,3), then per frame: frame_id u32, p2d f32 (N,3),
  p3d f32 (M,3).

MXGB (gradient dump) v1: like MXGS parameter blocks but f64 and with
  p2d/p3d blocks appended; used by the gradcheck tooling.
"""

import struct

import numpy as np

from .errors import FormatError
from .mesh import RiggedMesh
from .scene import MixedScene

MXGS_MAGIC = b"MXGS"
MXPF_MAGIC = b"MXPF"
MXGB_MAGIC = b"MXGB"
VERSION = 1


def _write(f, arr, dtype):
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read(f, count, dtype, shape):
    item = np.dtype(dtype).itemsize
    buf = f.read(count * item)
    if len(buf) != count * item:
        raise FormatError("truncated file")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def save_scene(path, scene: MixedScene):
    n, m, k = scene.n_surfels, scene.n_children, scene.n_sh_coeffs
    with open(path, "wb") as f:
        f.write(MXGS_MAGIC)
        f.write(struct.pack("<5I", VERSION, scene.sh_degree,
                            scene.mesh.n_triangles, n, m))
        for a in (scene.s_mu, scene.s_rot, scene.s_scale, scene.s_opacity, scene.s_sh):
            _write(f, a, "<f4")
        for a in (scene.c_mu, scene.c_rot, scene.c_scale, scene.c_opacity, scene.c_sh):
            _write(f, a, "<f4")
        _write(f, scene.s_parent_tri, "<u4")
        _write(f, scene.s_child, "<i4")
        _write(f, scene.c_parent, "<u4")


def load_scene(path, mesh: RiggedMesh) -> MixedScene:
    with open(path, "rb") as f:
        if f.read(4) != MXGS_MAGIC:
            raise FormatError(f"{path}: not an MXGS scene file")
        version, deg, n_tri, n, m = struct.unpack("<5I", f.read(20))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n_tri != mesh.n_triangles:
            raise FormatError(f"{path}: scene was built for {n_tri} triangles, "
                              f"mesh has {mesh.n_triangles}")
        scene = MixedScene(mesh, deg)
        k = scene.n_sh_coeffs
        scene.s_mu = _read(f, n * 3, "<f4", (n, 3)).astype(np.float64)
        scene.s_rot = _read(f, n * 4, "<f4", (n, 4)).astype(np.float64)
        scene.s_scale = _read(f, n * 2, "<f4", (n, 2)).astype(np.float64)
        scene.s_opacity = _read(f, n, "<f4", (n,)).astype(np.float64)
        scene.s_sh = _read(f, n * k * 3, "<f4", (n, k, 3)).astype(np.float64)
        scene.c_mu = _read(f, m * 3, "<f4", (m, 3)).astype(np.float64)
        scene.c_rot = _read(f, m * 4, "<f4", (m, 4)).astype(np.float64)
        scene.c_scale = _read(f, m * 3, "<f4", (m, 3)).astype(np.float64)
        scene.c_opacity = _read(f, m, "<f4", (m,)).astype(np.float64)
        scene.c_sh = _read(f, m * k * 3, "<f4", (m, k, 3)).astype(np.float64)
        scene.s_parent_tri = _read(f, n, "<u4", (n,)).astype(np.int64)
        scene.s_child = _read(f, n, "<i4", (n,)).astype(np.int64)
        scene.c_parent = _read(f, m, "<u4", (m,)).astype(np.int64)
    scene.validate()
    return scene


def save_perturbation(path, field):
    n, m = len(field.p2d_base), len(field.p3d_base)
    frames = sorted(set(field.p2d_res) | set(field.p3d_res)) if field.per_frame else []
    with open(path, "wb") as f:
        f.write(MXPF_MAGIC)
        f.write(struct.pack("<5I", VERSION, n, m,
                            1 if field.per_frame else 0, len(frames)))
        _write(f, field.p2d_base, "<f4")
        _write(f, field.p3d_base, "<f4")
        for t in frames:
            f.write(struct.pack("<I", t))
            _write(f, field.p2d_res.get(t, np.zeros((n, 3))), "<f4")
            _write(f, field.p3d_res.get(t, np.zeros((m, 3))), "<f4")


def load_perturbation(path):
    from .rigging import PerturbationField
    with open(path, "rb") as f:
        if f.read(4) != MXPF_MAGIC:
            raise FormatError(f"{path}: not an MXPF file")
        version, n, m, flags, n_frames = struct.unpack("<5I", f.read(20))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        field = PerturbationField(n, m, per_frame=bool(flags & 1))
        field.p2d_base = _read(f, n * 3, "<f4", (n, 3)).astype(np.float64)
        field.p3d_base = _read(f, m * 3, "<f4", (m, 3)).astype(np.float64)
        for _ in range(n_frames):
            (t,) = struct.unpack("<I", f.read(4))
            field.p2d_res[t] = _read(f, n * 3, "<f4", (n, 3)).astype(np.float64)
            field.p3d_res[t] = _read(f, m * 3, "<f4", (m, 3)).astype(np.float64)
    return field


def save_gradbuffer(path, grads):
    """Diagnostic dump of a GradBuffer (f64; supports the gradcheck CLI)."""
    n, m = len(grads.s_mu), len(grads.c_mu)
    k = grads.s_sh.shape[1] if n else grads.c_sh.shape[1]
    with open(path, "wb") as f:
        f.write(MXGB_MAGIC)
        f.write(struct.pack("<4I", VERSION, n, m, k))
        for a in (grads.s_mu, grads.s_rot, grads.s_scale, grads.s_opacity, grads.s_sh,
                  grads.c_mu, grads.c_rot, grads.c_scale, grads.c_opacity, grads.c_sh,
                  grads.p2d, grads.p3d):
            _write(f, a, "<f8")
