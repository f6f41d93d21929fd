"""Scene primitives and the triangle -> surfel -> child Gaussian tree.

A scene holds flat 2D Gaussians (surfels) bound to mesh triangles and
optional 3D Gaussian children bound to surfels. Parameters are stored
raw and unconstrained: opacity decodes through a sigmoid, scales through
exp, rotations are quaternions normalized on read.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import sh as shlib
from .errors import DuplicateChildError, SceneError
from .mesh import RiggedMesh

NO_CHILD = -1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


@dataclass
class Surfel2D:
    """One flat Gaussian disc in its parent triangle's local frame."""

    mu_l: np.ndarray          # (3,) local position, triangle-normalized
    rot_l: np.ndarray         # (4,) quaternion, normalized on read
    s_l: np.ndarray           # (2,) raw tangent scales, activated by exp
    opacity_raw: float
    sh: np.ndarray            # ((deg+1)^2, 3)
    parent_tri: int
    child: Optional[int] = None


@dataclass
class Child3D:
    """A 3D Gaussian bound to a parent surfel for color compensation."""

    mu_l: np.ndarray          # (3,) relative to the parent surfel's frame
    rot_l: np.ndarray
    s_l: np.ndarray           # (3,)
    opacity_raw: float
    sh: np.ndarray
    parent_surfel: int


@dataclass
class GaussianTree:
    """Index view of the triangle -> surfel -> child hierarchy."""

    tri_to_surfels: dict = field(default_factory=dict)
    surfel_to_child: dict = field(default_factory=dict)

    def siblings(self, surfel_index, parent_tri):
        return self.tri_to_surfels.get(int(parent_tri), [])


class MixedScene:
    """Mutable scene document; arrays are struct-of-arrays over primitives."""

    def __init__(self, mesh: RiggedMesh, sh_degree: int):
        if not (0 <= sh_degree <= 3):
            raise SceneError("sh_degree must be in 0..3")
        self.mesh = mesh
        self.sh_degree = int(sh_degree)
        k = shlib.n_coeffs(sh_degree)
        # surfels
        self.s_mu = np.zeros((0, 3))
        self.s_rot = np.zeros((0, 4))
        self.s_scale = np.zeros((0, 2))
        self.s_opacity = np.zeros((0,))
        self.s_sh = np.zeros((0, k, 3))
        self.s_parent_tri = np.zeros((0,), dtype=np.int64)
        self.s_child = np.zeros((0,), dtype=np.int64)
        # children
        self.c_mu = np.zeros((0, 3))
        self.c_rot = np.zeros((0, 4))
        self.c_scale = np.zeros((0, 3))
        self.c_opacity = np.zeros((0,))
        self.c_sh = np.zeros((0, k, 3))
        self.c_parent = np.zeros((0,), dtype=np.int64)

    # ------------------------------------------------------------------
    @property
    def n_surfels(self):
        return len(self.s_mu)

    @property
    def n_children(self):
        return len(self.c_mu)

    @property
    def n_sh_coeffs(self):
        return shlib.n_coeffs(self.sh_degree)

    def surfel(self, i) -> Surfel2D:
        child = int(self.s_child[i])
        return Surfel2D(self.s_mu[i].copy(), self.s_rot[i].copy(),
                        self.s_scale[i].copy(), float(self.s_opacity[i]),
                        self.s_sh[i].copy(), int(self.s_parent_tri[i]),
                        None if child == NO_CHILD else child)

    def child(self, j) -> Child3D:
        return Child3D(self.c_mu[j].copy(), self.c_rot[j].copy(),
                       self.c_scale[j].copy(), float(self.c_opacity[j]),
                       self.c_sh[j].copy(), int(self.c_parent[j]))

    def tree(self) -> GaussianTree:
        tri_to_surfels = {t: [] for t in range(self.mesh.n_triangles)}
        for i, t in enumerate(self.s_parent_tri):
            tri_to_surfels[int(t)].append(i)
        surfel_to_child = {i: int(c) for i, c in enumerate(self.s_child)
                           if c != NO_CHILD}
        return GaussianTree(tri_to_surfels, surfel_to_child)

    def validate(self):
        n, m = self.n_surfels, self.n_children
        if np.any(self.s_parent_tri < 0) or np.any(self.s_parent_tri >= self.mesh.n_triangles):
            raise SceneError("surfel bound to nonexistent triangle")
        if np.any(np.linalg.norm(self.s_rot, axis=-1) < 1e-8):
            raise SceneError("surfel quaternion has (near-)zero norm")
        if m and (np.any(self.c_parent < 0) or np.any(self.c_parent >= n)):
            raise SceneError("child bound to nonexistent surfel")
        # child links must be mutual and unique
        linked = self.s_child[self.s_child != NO_CHILD]
        if len(set(linked.tolist())) != len(linked):
            raise SceneError("two surfels reference the same child")
        if sorted(linked.tolist()) != list(range(m)):
            raise SceneError("surfel->child links do not cover the child set")
        for j in range(m):
            if self.s_child[self.c_parent[j]] != j:
                raise SceneError(f"child {j} back-reference mismatch")

    # ------------------------------------------------------------------
    def geometry_digest(self):
        """SHA-256 over the surfel geometric parameters (frozen in stage 2)."""
        import hashlib
        h = hashlib.sha256()
        for a in (self.s_mu, self.s_rot, self.s_scale, self.s_opacity):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def copy(self):
        out = MixedScene(self.mesh, self.sh_degree)
        for name in ("s_mu", "s_rot", "s_scale", "s_opacity", "s_sh",
                     "s_parent_tri", "s_child",
                     "c_mu", "c_rot", "c_scale", "c_opacity", "c_sh", "c_parent"):
            setattr(out, name, getattr(self, name).copy())
        return out


def init_scene(mesh: RiggedMesh, sh_degree: int = 1) -> MixedScene:
    """One surfel per triangle: local position 0, identity rotation, unit
    activated scales, mid-opacity, mid-gray color."""
    mesh.validate()  # rejects degenerate canonical triangles by index
    scene = MixedScene(mesh, sh_degree)
    n = mesh.n_triangles
    k = scene.n_sh_coeffs
    scene.s_mu = np.zeros((n, 3))
    scene.s_rot = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    scene.s_scale = np.zeros((n, 2))  # exp(0) = unit vector
    # opacity 0.5 after sigmoid; a literal zero opacity would render nothing
    # and kill all gradients on the first step.
    scene.s_opacity = np.zeros((n,))
    scene.s_sh = np.zeros((n, k, 3))
    scene.s_sh[:, 0, :] = shlib.rgb_to_sh_dc([0.5, 0.5, 0.5])
    scene.s_parent_tri = np.arange(n, dtype=np.int64)
    scene.s_child = np.full((n,), NO_CHILD, dtype=np.int64)
    return scene


def spawn_children(scene: MixedScene, selected) -> int:
    """Create one child per selected surfel, inheriting the parent's
    parameters; the third scale is the mean of the parent's two activated
    scales. Fails without mutating if any selected surfel has a child."""
    selected = sorted(int(s) for s in set(selected))
    if not selected:
        return 0
    for s in selected:
        if s < 0 or s >= scene.n_surfels:
            raise SceneError(f"surfel index {s} out of range")
        if scene.s_child[s] != NO_CHILD:
            raise DuplicateChildError(s)
    sel = np.array(selected, dtype=np.int64)
    act = np.exp(scene.s_scale[sel])                       # (S, 2)
    third = np.log(act.mean(axis=1, keepdims=True))        # back to raw space
    new_scale = np.concatenate([scene.s_scale[sel], third], axis=1)
    base = scene.n_children
    scene.c_mu = np.concatenate([scene.c_mu, scene.s_mu[sel]])
    scene.c_rot = np.concatenate([scene.c_rot, scene.s_rot[sel]])
    scene.c_scale = np.concatenate([scene.c_scale, new_scale])
    scene.c_opacity = np.concatenate([scene.c_opacity, scene.s_opacity[sel]])
    scene.c_sh = np.concatenate([scene.c_sh, scene.s_sh[sel]])
    scene.c_parent = np.concatenate([scene.c_parent, sel])
    scene.s_child[sel] = base + np.arange(len(sel))
    return len(sel)
