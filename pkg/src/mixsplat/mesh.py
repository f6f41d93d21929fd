"""Rigged triangle mesh: canonical OBJ geometry plus per-frame vertex sets.

Frame files are binary: magic "MXVF", frame-id u32, vertex count u32,
then little-endian f32 xyz triples.
"""

import os
import struct

import numpy as np

from .errors import DegenerateTriangleError, FormatError, SceneError

MIN_TRIANGLE_AREA = 1e-12
MXVF_MAGIC = b"MXVF"


def triangle_areas(vertices, triangles):
    v = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)


class RiggedMesh:
    """Canonical triangle mesh with optional per-frame vertex positions.

    Frame 0 always resolves: if no animation frames were provided the
    canonical vertices are used.
    """

    def __init__(self, vertices, triangles, frames=None):
        self.vertices_canonical = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.frames = {int(t): np.ascontiguousarray(v, dtype=np.float64)
                       for t, v in (frames or {}).items()}
        self.validate()

    def validate(self):
        V, T = self.vertices_canonical, self.triangles
        if V.ndim != 2 or V.shape[1] != 3:
            raise SceneError("vertices must be (N, 3)")
        if T.ndim != 2 or T.shape[1] != 3:
            raise SceneError("triangles must be (M, 3)")
        if T.size and (T.min() < 0 or T.max() >= len(V)):
            raise SceneError("triangle index out of range")
        for t, fv in self.frames.items():
            if fv.shape != V.shape:
                raise SceneError(f"frame {t} has {fv.shape[0]} vertices, expected {V.shape[0]}")
        areas = triangle_areas(V, T)
        bad = np.nonzero(areas <= MIN_TRIANGLE_AREA)[0]
        if bad.size:
            raise DegenerateTriangleError(int(bad[0]), area=float(areas[bad[0]]))

    @property
    def n_triangles(self):
        return len(self.triangles)

    def vertices_at(self, t):
        """Vertex positions for frame t (canonical if t has no entry and t == 0)."""
        t = int(t)
        if t in self.frames:
            return self.frames[t]
        if t == 0:
            return self.vertices_canonical
        raise SceneError(f"no vertex data for frame {t}")

    def frame_ids(self):
        return sorted(self.frames) if self.frames else [0]

    def extent(self):
        """Half-diagonal of the canonical bounding box (scene units)."""
        V = self.vertices_canonical
        return 0.5 * float(np.linalg.norm(V.max(axis=0) - V.min(axis=0)))


def load_obj(path):
    """Parse v/f records of an ASCII OBJ into (vertices, triangles)."""
    verts, tris = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{ln}: malformed vertex")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise FormatError(f"{path}:{ln}: face with <3 vertices")
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not tris:
        raise FormatError(f"{path}: no v/f records found")
    return np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64)


def save_obj(path, vertices, triangles):
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_frame(path, frame_id, vertices):
    vertices = np.asarray(vertices, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MXVF_MAGIC)
        f.write(struct.pack("<II", int(frame_id), vertices.shape[0]))
        f.write(vertices.tobytes())


def load_frame(path):
    with open(path, "rb") as f:
        if f.read(4) != MXVF_MAGIC:
            raise FormatError(f"{path}: not an MXVF file")
        frame_id, count = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(count * 12), dtype="<f4")
        if data.size != count * 3:
            raise FormatError(f"{path}: truncated vertex data")
    return frame_id, data.reshape(count, 3).astype(np.float64)


def load_frames_dir(path):
    """Read every MXVF file in a directory into {frame_id: vertices}."""
    frames = {}
    for name in sorted(os.listdir(path)):
        if name.endswith(".mxvf"):
            fid, verts = load_frame(os.path.join(path, name))
            frames[fid] = verts
    return frames


def load_rigged_mesh(obj_path, frames_dir=None):
    verts, tris = load_obj(obj_path)
    frames = load_frames_dir(frames_dir) if frames_dir else {}
    return RiggedMesh(verts, tris, frames)
