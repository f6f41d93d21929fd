"""Dataset manifests, loaders and synthetic scene generation.

Synthetic ground truth comes from an analytic ray-plane rasterizer with
procedural textures, fully independent of the splatting pipeline, so the
trainer and acceptance checks have hermetic data with known content.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .camera import Camera, simple_camera
from .errors import DatasetError
from .imageio import load_png, save_png
from .mesh import RiggedMesh, load_rigged_mesh, save_frame, save_obj
from .scene import MixedScene, init_scene


@dataclass
class DatasetManifest:
    root: str
    canonical_mesh: str
    frames_dir: str
    background: object
    records: list                      # (frame-id, camera path, image path)

    @classmethod
    def load(cls, path):
        root = os.path.dirname(os.path.abspath(path))
        with open(path) as f:
            d = json.load(f)
        records = [(int(r["frame"]), r["camera"], r["image"])
                   for r in d["records"]]
        m = cls(root, d["canonical_mesh"], d.get("frames_dir", ""),
                d.get("background", "black"), records)
        m.validate()
        return m

    def path(self, rel):
        return os.path.join(self.root, rel)

    def validate(self):
        missing = []
        if not os.path.exists(self.path(self.canonical_mesh)):
            missing.append(self.canonical_mesh)
        if self.frames_dir and not os.path.isdir(self.path(self.frames_dir)):
            missing.append(self.frames_dir)
        for _, cam, img in self.records:
            for rel in (cam, img):
                if not os.path.exists(self.path(rel)):
                    missing.append(rel)
        if missing:
            raise DatasetError(f"manifest references missing files: {missing}")
        if not self.records:
            raise DatasetError("manifest has no records")

    def save(self, path):
        d = {"canonical_mesh": self.canonical_mesh,
             "frames_dir": self.frames_dir,
             "background": self.background,
             "records": [{"frame": t, "camera": c, "image": i}
                         for t, c, i in self.records]}
        with open(path, "w") as f:
            json.dump(d, f, indent=1)


class TrainDataset:
    """Manifest-backed training set; images and cameras cached in memory."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._mesh = load_rigged_mesh(
            manifest.path(manifest.canonical_mesh),
            manifest.path(manifest.frames_dir) if manifest.frames_dir else None)
        self.records = list(range(len(manifest.records)))
        self._cache = {}

    @classmethod
    def open(cls, manifest_path):
        return cls(DatasetManifest.load(manifest_path))

    def mesh(self) -> RiggedMesh:
        return self._mesh

    @property
    def background(self):
        return self.manifest.background

    def load(self, rec):
        if rec not in self._cache:
            t, cam_rel, img_rel = self.manifest.records[rec]
            cam = Camera.load(self.manifest.path(cam_rel))
            truth = load_png(self.manifest.path(img_rel))
            self._cache[rec] = (t, cam, truth)
        return self._cache[rec]


class ArrayDataset:
    """In-memory dataset of (frame-id, camera, truth) triples."""

    def __init__(self, mesh, items, background="black"):
        self._mesh = mesh
        self.items = list(items)
        self.records = list(range(len(self.items)))
        self.background = background

    def mesh(self):
        return self._mesh

    def load(self, rec):
        return self.items[rec]


# ----------------------------------------------------------------------
# analytic ground truth
def quad_mesh(half=1.0):
    verts = np.array([[-half, -half, 0.0], [half, -half, 0.0],
                      [half, half, 0.0], [-half, half, 0.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return RiggedMesh(verts, tris)


def smooth_texture(u, v):
    """Low-frequency RGB field on the quad, bounded away from 0 and 1."""
    r = 0.5 + 0.27 * np.sin(2.4 * u + 0.9 * v + 0.4)
    g = 0.5 + 0.27 * np.sin(1.7 * v - 0.5) * np.cos(1.3 * u + 0.2)
    b = 0.5 + 0.27 * np.cos(1.9 * u + 2.3 * v)
    return np.stack([r, g, b], axis=-1)


def viewdep_texture(u, v, view_dir):
    """Smooth base plus a high-frequency view-dependent patch.

    view_dir: unit vectors from the surface point toward the camera."""
    base = smooth_texture(u, v)
    in_patch = (np.abs(u) < 0.45) & (np.abs(v) < 0.45)
    checker = 0.5 * (1.0 + np.sin(14.0 * u) * np.sin(14.0 * v))
    h = np.array([0.35, 0.2, -0.91])
    h = h / np.linalg.norm(h)
    spec = np.maximum(view_dir @ h, 0.0) ** 4
    bump = 0.5 * in_patch * checker * spec
    return np.clip(base + bump[..., None], 0.0, 1.0)


def render_quad_truth(cam: Camera, texture="smooth", background=(0, 0, 0),
                      half=1.0):
    """Exact ray-plane rasterization of the textured quad at z = 0."""
    bg = np.asarray(background, dtype=np.float64)
    xh = cam.pixel_centers()
    d = cam.R.T @ np.linalg.inv(cam.K) @ xh          # world ray directions
    o = cam.position
    dz = np.where(np.abs(d[2]) < 1e-30, 1e-30, d[2])
    tstar = -o[2] / dz
    pts = o[:, None] + tstar[None, :] * d
    inside = (tstar > 0) & (np.abs(pts[0]) <= half) & (np.abs(pts[1]) <= half)
    u, v = pts[0], pts[1]
    if texture == "smooth":
        col = smooth_texture(u, v)
    elif texture == "viewdep":
        vd = o[:, None] - pts
        vd = (vd / np.linalg.norm(vd, axis=0, keepdims=True)).T
        col = viewdep_texture(u, v, vd)
    else:
        raise ValueError(f"unknown texture {texture!r}")
    img = np.where(inside[:, None], col, bg[None, :])
    return img.reshape(cam.height, cam.width, 3)


def quad_cameras(n_views=4, size=64, dist=2.6, max_tilt_deg=8.0, seed=0):
    """Cameras on a small cap looking at the quad center, framed so the
    quad always overfills the view (no silhouette pixels)."""
    rng = np.random.default_rng(seed)
    focal = 2.9 * size
    cams = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views
        tilt = np.deg2rad(max_tilt_deg) * (0.4 + 0.6 * rng.random())
        eye = dist * np.array([np.sin(tilt) * np.cos(ang),
                               np.sin(tilt) * np.sin(ang),
                               -np.cos(tilt)])
        cams.append(simple_camera(size, size, eye=eye, target=(0, 0, 0),
                                  focal=focal, near=0.2, far=20.0))
    return cams


def make_quad_dataset(size=64, n_views=4, texture="smooth", seed=0):
    """In-memory textured-quad dataset (the stage-1 workhorse)."""
    mesh = quad_mesh()
    cams = quad_cameras(n_views, size, seed=seed)
    items = [(0, cam, render_quad_truth(cam, texture)) for cam in cams]
    return ArrayDataset(mesh, items)


def write_dataset(outdir, dataset: ArrayDataset, name="synthetic"):
    """Persist an in-memory dataset in the on-disk layout (OBJ + MXVF +
    camera JSON + PNG + manifest)."""
    os.makedirs(outdir, exist_ok=True)
    os.makedirs(os.path.join(outdir, "cams"), exist_ok=True)
    os.makedirs(os.path.join(outdir, "images"), exist_ok=True)
    os.makedirs(os.path.join(outdir, "frames"), exist_ok=True)
    mesh = dataset.mesh()
    save_obj(os.path.join(outdir, "mesh.obj"), mesh.vertices_canonical,
             mesh.triangles)
    for t in mesh.frame_ids():
        save_frame(os.path.join(outdir, "frames", f"frame_{t:06d}.mxvf"),
                   t, mesh.vertices_at(t))
    records = []
    for i, rec in enumerate(dataset.records):
        t, cam, truth = dataset.load(rec)
        cam_rel = f"cams/cam_{i:03d}.json"
        img_rel = f"images/img_{i:03d}.png"
        cam.save(os.path.join(outdir, cam_rel))
        save_png(os.path.join(outdir, img_rel), truth)
        records.append((t, cam_rel, img_rel))
    manifest = DatasetManifest(outdir, "mesh.obj", "frames",
                               dataset.background, records)
    manifest.save(os.path.join(outdir, "manifest.json"))
    return os.path.join(outdir, "manifest.json")


# ----------------------------------------------------------------------
def icosphere(subdivisions=2, radius=1.0):
    """Subdivided icosahedron (vertices, triangles)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    tris = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = 0.5 * (verts[a] + verts[b])
                m = m / np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        tris = new_tris
    return radius * np.array(verts), np.array(tris, dtype=np.int64)


def make_sphere_scene(subdivisions=3, radius=1.0, opacity_raw=9.0,
                      scale=0.45, sh_degree=0):
    """Near-opaque surfel-covered sphere for depth/meshing tests.

    High opacity and sub-triangle discs keep median depths on the true
    surface instead of letting stacked Gaussian tails cross alpha 0.5
    early."""
    verts, tris = icosphere(subdivisions, radius)
    mesh = RiggedMesh(verts, tris)
    scene = init_scene(mesh, sh_degree)
    scene.s_opacity[:] = opacity_raw
    scene.s_scale[:] = np.log(scale)
    return scene, mesh


def sphere_cameras(n_views=8, radius=1.0, size=96):
    """Ring of inward-looking cameras framed so the silhouette stays in
    view (fusion's depth-edge filter needs to see it)."""
    cams = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views
        lift = 0.35 * np.sin(3.1 * i + 0.5)
        eye = 3.2 * radius * np.array([np.cos(ang) * np.cos(lift),
                                       np.sin(lift),
                                       np.sin(ang) * np.cos(lift)])
        cams.append(simple_camera(size, size, eye=eye, target=(0, 0, 0),
                                  focal=1.1 * size, near=0.3 * radius,
                                  far=30.0 * radius))
    return cams
