"""Mesh extraction from a trained scene.

Median-depth maps of the training views are fused into a truncated
signed distance volume (projective TSDF, per-voxel weighted average, the
same weights fusing RGB), and the zero level set is extracted with
marching cubes as a vertex-colored triangle mesh.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from skimage import measure

from .errors import FormatError, SceneError
from .rasterizer.forward import render


@dataclass
class TsdfVolume:
    origin: np.ndarray          # world position of voxel (0,0,0)'s center
    voxel_size: float
    dims: tuple                 # (nx, ny, nz)
    tsdf: np.ndarray            # normalized to [-1, 1] by the truncation band
    weight: np.ndarray
    color: np.ndarray           # (nx, ny, nz, 3) weighted RGB accumulators

    @classmethod
    def empty(cls, origin, voxel_size, dims):
        if voxel_size <= 0:
            raise ValueError("voxel size must be > 0")
        dims = tuple(int(d) for d in dims)
        # unobserved voxels read -1 ("unknown, assume solid"); the weight
        # mask keeps them out of extraction
        return cls(np.asarray(origin, dtype=np.float64), float(voxel_size), dims,
                   -np.ones(dims), np.zeros(dims), np.zeros(dims + (3,)))

    @classmethod
    def around(cls, center, extent, resolution=128):
        """Cube volume of `resolution`^3 voxels spanning +-extent."""
        voxel = 2.0 * extent / resolution
        origin = np.asarray(center, dtype=np.float64) - extent + 0.5 * voxel
        return cls.empty(origin, voxel, (resolution, resolution, resolution))

    def voxel_centers(self):
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        pts = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
        return pts * self.voxel_size + self.origin


@dataclass
class TexturedMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray          # per-vertex RGB in [0, 1]

    def validate(self):
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise SceneError("face index out of range")
        if self.colors.size and (self.colors.min() < -1e-9
                                 or self.colors.max() > 1 + 1e-9):
            raise SceneError("vertex colors out of [0,1]")


def render_fusion_inputs(scene, perturb, t, cams, mode="mixed", tile_size=16,
                         background=(0.0, 0.0, 0.0), workers=1):
    """Median-depth map, color image and alpha mask per view.

    Median depth is already zero where accumulated alpha never reached
    0.5, which marks those pixels invalid for fusion."""
    maps = []
    for cam in cams:
        out = render(scene, perturb, t, cam, mode=mode, tile_size=tile_size,
                     background=background, keep_cache=False, workers=workers)
        maps.append({"depth": out.median_depth, "color": out.color,
                     "alpha": out.alpha, "normal": out.normal, "cam": cam})
    return maps


def tsdf_fuse(maps, volume: TsdfVolume, trunc_voxels=4.0,
              edge_reject=True, grazing_cos=0.35) -> TsdfVolume:
    """Projective TSDF integration of per-view median depth maps.

    Standard truncation: per voxel and view, the signed distance along
    the camera ray (positive in front of the surface) is integrated only
    within the band sdf >= -tau; voxels occluded deeper than the band
    stay untouched (they read the -1 initialization until some view sees
    them). In-band values clamp to [-1, 1] and average with weight 1,
    colors with the same weights.

    Depth reliability: invalid pixels contribute nothing; edge_reject
    drops pixels on strong depth discontinuities (3x3 spread above the
    truncation band), and grazing_cos drops pixels whose rendered normal
    is nearly perpendicular to the viewing ray, where median depths of
    edge-on splats are biased.
    """
    if len(maps) < 1:
        raise ValueError("fusion needs at least one view")
    from scipy.ndimage import grey_dilation, grey_erosion

    tau = trunc_voxels * volume.voxel_size
    pts = volume.voxel_centers()
    tsdf_acc = np.where(volume.weight.ravel() > 0,
                        volume.tsdf.ravel() * volume.weight.ravel(), 0.0)
    w_acc = volume.weight.ravel().copy()
    c_acc = volume.color.reshape(-1, 3) * w_acc[:, None]
    for m in maps:
        cam = m["cam"]
        depth, color = m["depth"], m["color"]
        usable = depth > 0
        if edge_reject:
            hole = np.where(usable, depth, np.inf)
            spread = (grey_dilation(depth, size=3)
                      - grey_erosion(hole, size=3))
            usable &= np.abs(spread) < tau
        if grazing_cos > 0 and m.get("normal") is not None:
            rays = np.linalg.inv(cam.K) @ cam.pixel_centers()
            rays /= np.linalg.norm(rays, axis=0, keepdims=True)
            rays = rays.reshape(3, cam.height, cam.width)
            n = np.moveaxis(m["normal"], -1, 0)
            n_len = np.maximum(np.linalg.norm(n, axis=0), 1e-12)
            facing = -np.sum(n * rays, axis=0) / n_len
            usable &= facing > grazing_cos
        pc = cam.to_camera(pts)
        z = pc[:, 2]
        ok = z > cam.near
        px = cam.project(pc[ok])
        ix = np.floor(px[:, 0]).astype(np.int64)
        iy = np.floor(px[:, 1]).astype(np.int64)
        inb = (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height)
        rows = np.nonzero(ok)[0][inb]
        ix, iy = ix[inb], iy[inb]
        valid = usable[iy, ix]
        rows, ix, iy = rows[valid], ix[valid], iy[valid]
        d = depth[iy, ix]
        sdf = (d - z[rows]) / tau
        band = sdf >= -1.0
        rows, ix, iy = rows[band], ix[band], iy[band]
        tsdf_acc[rows] += np.minimum(sdf[band], 1.0)
        w_acc[rows] += 1.0
        c_acc[rows] += color[iy, ix]
    out = TsdfVolume(volume.origin, volume.voxel_size, volume.dims,
                     -np.ones(volume.dims), np.zeros(volume.dims),
                     np.zeros(volume.dims + (3,)))
    has = w_acc > 0
    flat = -np.ones_like(tsdf_acc)
    flat[has] = tsdf_acc[has] / w_acc[has]
    out.tsdf = flat.reshape(volume.dims)
    out.weight = w_acc.reshape(volume.dims)
    cflat = np.zeros_like(c_acc)
    cflat[has] = c_acc[has] / w_acc[has, None]
    out.color = cflat.reshape(volume.dims + (3,))
    return out


def extract_mesh(volume: TsdfVolume, min_component_faces=16) -> TexturedMesh:
    """Marching cubes over the TSDF zero level set.

    Vertex colors are trilinearly sampled from the fused RGB volume;
    connected components below the face-count threshold are dropped
    (floating-artifact removal)."""
    observed = volume.weight > 0
    if not observed.any() or volume.tsdf[observed].min() > 0 \
            or volume.tsdf[observed].max() < 0:
        return TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((0, 3)))
    mask = None
    if not observed.all():
        # cubes must not touch unobserved voxels, or the -1 fill fabricates
        # crossings along the observation boundary
        from scipy.ndimage import minimum_filter
        mask = minimum_filter(observed, size=3, mode="constant", cval=False)
        if not mask.any():
            return TexturedMesh(np.zeros((0, 3)),
                                np.zeros((0, 3), dtype=np.int64),
                                np.zeros((0, 3)))
    verts, faces, _, _ = measure.marching_cubes(volume.tsdf, level=0.0,
                                                mask=mask)
    colors = np.stack([
        map_coordinates(volume.color[:, :, :, c], verts.T, order=1,
                        mode="nearest")
        for c in range(3)], axis=-1)
    verts_world = verts * volume.voxel_size + volume.origin
    mesh = TexturedMesh(verts_world, faces.astype(np.int64),
                        np.clip(colors, 0.0, 1.0))
    mesh = drop_small_components(mesh, min_component_faces)
    mesh.validate()
    return mesh


def drop_small_components(mesh: TexturedMesh, min_faces) -> TexturedMesh:
    """Remove connected components with fewer than min_faces faces."""
    if len(mesh.triangles) == 0 or min_faces <= 1:
        return mesh
    n = len(mesh.vertices)
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for tri in mesh.triangles:
        a, b, c = (find(int(v)) for v in tri)
        parent[b] = a
        parent[c] = a
    roots = np.array([find(int(v)) for v in mesh.triangles[:, 0]])
    counts = {}
    for r in roots:
        counts[r] = counts.get(r, 0) + 1
    keep_faces = np.array([counts[r] >= min_faces for r in roots])
    faces = mesh.triangles[keep_faces]
    used = np.unique(faces)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TexturedMesh(mesh.vertices[used], remap[faces], mesh.colors[used])


def save_ply(path, mesh: TexturedMesh):
    """ASCII PLY with 8-bit per-vertex color."""
    mesh.validate()
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element face {len(mesh.triangles)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        cols = (np.clip(mesh.colors, 0, 1) * 255 + 0.5).astype(np.uint8)
        for v, c in zip(mesh.vertices, cols):
            f.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
        for tri in mesh.triangles:
            f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def load_ply(path):
    """Read back the ASCII PLY subset written by save_ply."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        n_v = n_f = 0
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                n_v = int(line.split()[-1])
            elif line.startswith("element face"):
                n_f = int(line.split()[-1])
            elif line == "end_header":
                break
        verts = np.zeros((n_v, 3))
        cols = np.zeros((n_v, 3))
        for i in range(n_v):
            parts = f.readline().split()
            verts[i] = [float(x) for x in parts[:3]]
            cols[i] = [int(x) / 255.0 for x in parts[3:6]]
        faces = np.zeros((n_f, 3), dtype=np.int64)
        for i in range(n_f):
            parts = f.readline().split()
            faces[i] = [int(x) for x in parts[1:4]]
    return TexturedMesh(verts, faces, cols)
