"""Pinhole camera with a rigid world-to-camera transform.

Conventions: camera looks along +z, x right, y down. Pixel (row i,
col j) has center (j + 0.5, i + 0.5); K maps camera space to pixels.
"""

import json

import numpy as np

from .errors import FormatError


class Camera:
    def __init__(self, K, W, width, height, near, far):
        self.K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        self.W = np.asarray(W, dtype=np.float64).reshape(4, 4)
        self.width = int(width)
        self.height = int(height)
        self.near = float(near)
        self.far = float(far)
        self.validate()

    def validate(self):
        K, W = self.K, self.W
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise FormatError("camera intrinsics need positive focal lengths")
        if np.any(np.abs(K[[1, 2, 2], [0, 0, 1]]) > 1e-9) or abs(K[2, 2] - 1) > 1e-9:
            raise FormatError("camera intrinsics must be upper-triangular with K[2,2]=1")
        R = W[:3, :3]
        if (np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6
                or abs(np.linalg.det(R) - 1) > 1e-6
                or np.any(np.abs(W[3] - [0, 0, 0, 1]) > 1e-9)):
            raise FormatError("world-to-camera transform must be rigid")
        if not (0 < self.near < self.far):
            raise FormatError("need 0 < near < far")

    @property
    def R(self):
        return self.W[:3, :3]

    @property
    def t(self):
        return self.W[:3, 3]

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to_camera(self, pts):
        """World points (N, 3) -> camera space."""
        return pts @ self.R.T + self.t

    def project(self, pts_cam):
        """Camera-space points (N, 3) -> pixel coordinates (N, 2)."""
        h = pts_cam @ self.K.T
        return h[:, :2] / h[:, 2:3]

    def pixel_centers(self):
        """Homogeneous pixel-center grid, shape (3, H*W), row-major."""
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        px, py = np.meshgrid(xs, ys)
        return np.stack([px.ravel(), py.ravel(), np.ones(px.size)])

    def to_dict(self):
        return {
            "K": self.K.ravel().tolist(),
            "W": self.W.ravel().tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["K"], d["W"], d["width"], d["height"], d["near"], d["far"])
        except KeyError as e:
            raise FormatError(f"camera json missing key {e}") from None

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Rigid world-to-camera matrix for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        up = np.array([0.0, 0.0, 1.0]) if abs(fwd[1]) > 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ eye
    return W


def simple_camera(width, height, eye, target, focal=None, near=0.05, far=100.0, up=(0.0, 1.0, 0.0)):
    """Convenience constructor with centered principal point."""
    if focal is None:
        focal = 1.2 * max(width, height)
    K = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1.0]])
    return Camera(K, look_at(eye, target, up), width, height, near, far)
