"""Material-labelled triangle meshes, manifold checks and the ray-query scene."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import bvh as _bvh
from .materials import MaterialClass

AREA_EPS = 1e-8


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class TriMesh:
    """Triangle mesh with one material label per face.

    ``sheet`` marks open single-surface geometry (e.g. a wall modelled as one
    plane); closed solids leave it False and must be watertight.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_material: list[MaterialClass]
    object_id: str = "object"
    sheet: bool = False
    area_eps: float = AREA_EPS
    face_normals: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if isinstance(self.face_material, (str, MaterialClass)):
            self.face_material = [self.face_material] * len(self.faces)
        self.face_material = [m if isinstance(m, MaterialClass) else MaterialClass.parse(m) for m in self.face_material]
        if len(self.face_material) != len(self.faces):
            raise MeshError(f"{self.object_id}: {len(self.face_material)} material labels for {len(self.faces)} faces")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError(f"{self.object_id}: face index out of range")
        cross = self._cross()
        area = 0.5 * np.linalg.norm(cross, axis=1)
        bad = np.flatnonzero(area <= self.area_eps)
        if len(bad):
            raise MeshError(f"{self.object_id}: {len(bad)} degenerate triangle(s), first is face {bad[0]}")
        self.face_normals = cross / (2.0 * area[:, None])

    def _cross(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and self.sheet == other.sheet
            and self.face_material == other.face_material
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )


@dataclass(frozen=True)
class ManifoldReport:
    is_watertight: bool
    boundary_edge_count: int
    nonmanifold_edge_count: int
    inconsistent_normal_pairs: int

    def as_dict(self) -> dict:
        return {
            "is_watertight": self.is_watertight,
            "boundary_edge_count": self.boundary_edge_count,
            "nonmanifold_edge_count": self.nonmanifold_edge_count,
            "inconsistent_normal_pairs": self.inconsistent_normal_pairs,
        }


def validate_manifold(mesh: TriMesh) -> ManifoldReport:
    # vertices with identical coordinates are the same topological vertex
    _, weld = np.unique(mesh.vertices, axis=0, return_inverse=True)
    faces = weld.reshape(-1)[mesh.faces]
    directed = Counter()
    undirected = Counter()
    for a, b, c in faces.tolist():
        for u, v in ((a, b), (b, c), (c, a)):
            directed[(u, v)] += 1
            undirected[(min(u, v), max(u, v))] += 1
    boundary = nonmanifold = inconsistent = 0
    for (u, v), n in undirected.items():
        if n == 1:
            boundary += 1
        elif n >= 3:
            nonmanifold += 1
        elif directed[(u, v)] != 1 or directed[(v, u)] != 1:
            inconsistent += 1
    return ManifoldReport(boundary == 0 and nonmanifold == 0 and inconsistent == 0, boundary, nonmanifold, inconsistent)


def mesh_ok_for_tracing(mesh: TriMesh, report: ManifoldReport | None = None) -> bool:
    """Closed solids must be watertight; sheets may have a boundary but no other defects."""
    report = report or validate_manifold(mesh)
    if mesh.sheet:
        return report.nonmanifold_edge_count == 0 and report.inconsistent_normal_pairs == 0
    return report.is_watertight


@dataclass(frozen=True)
class Hit:
    face: int
    distance: float
    point: np.ndarray
    normal: np.ndarray
    material: MaterialClass


class Scene:
    """Immutable set of meshes with flat per-face arrays and a BVH."""

    def __init__(self, meshes: Sequence[TriMesh] = ()):
        self.meshes = list(meshes)
        ids = [m.object_id for m in self.meshes]
        if len(set(ids)) != len(ids):
            raise MeshError("duplicate object ids in scene")
        if self.meshes:
            tris = np.concatenate([m.vertices[m.faces] for m in self.meshes])
            normals = np.concatenate([m.face_normals for m in self.meshes])
            mats = [mat for m in self.meshes for mat in m.face_material]
            obj = np.concatenate([np.full(len(m.faces), i, dtype=np.int64) for i, m in enumerate(self.meshes)])
        else:
            tris = np.zeros((0, 3, 3))
            normals = np.zeros((0, 3))
            mats = []
            obj = np.zeros(0, dtype=np.int64)
        self.v0 = np.ascontiguousarray(tris[:, 0])
        self.e1 = np.ascontiguousarray(tris[:, 1] - tris[:, 0])
        self.e2 = np.ascontiguousarray(tris[:, 2] - tris[:, 0])
        self.normals = np.ascontiguousarray(normals)
        self.offsets = -np.einsum("ij,ij->i", self.normals, self.v0)
        self.face_material = mats
        self.face_object = obj
        self.accel = _bvh.BVH(tris[:, 0], tris[:, 1], tris[:, 2])
        if len(tris):
            flat = tris.reshape(-1, 3)
            self.bounds = (flat.min(axis=0), flat.max(axis=0))
        else:
            self.bounds = None
        for arr in (self.v0, self.e1, self.e2, self.normals):
            arr.setflags(write=False)

    @property
    def n_faces(self) -> int:
        return len(self.face_material)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return self.meshes == other.meshes

    def contains(self, p, margin: float = 0.5) -> bool:
        """Whether ``p`` lies in the bounding box grown by ``margin`` times its largest extent."""
        if self.bounds is None:
            return True
        lo, hi = self.bounds
        pad = margin * float(np.max(hi - lo)) + 1e-9
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo - pad) and np.all(p <= hi + pad))

    def manifold_reports(self) -> dict[str, ManifoldReport]:
        return {m.object_id: validate_manifold(m) for m in self.meshes}

    def _kernel_args(self):
        return (self.v0, self.e1, self.e2) + self.accel.arrays()

    def _hit(self, origin, d, f, t) -> Hit | None:
        if f < 0:
            return None
        n = self.normals[f]
        if np.dot(n, d) > 0:
            n = -n
        return Hit(int(f), float(t), origin + t * d, n.copy(), self.face_material[f])

    def intersect(self, origin, direction, t_min: float = 0.0, t_max: float = np.inf) -> Hit | None:
        """Nearest hit in ``(t_min, t_max]``; the normal is flipped to face the ray."""
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        f, t = _bvh.closest_hit(o, d, float(t_min), float(t_max), *self._kernel_args())
        return self._hit(o, d, f, t)

    def intersect_brute(self, origin, direction, t_min: float = 0.0, t_max: float = np.inf) -> Hit | None:
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        f, t = _bvh.closest_hit_brute(o, d, float(t_min), float(t_max), self.v0, self.e1, self.e2)
        return self._hit(o, d, f, t)

    def intersect_many(self, origins, directions, t_min, t_max: float = np.inf):
        """Batched nearest hits; returns ``(faces, distances)`` with -1 / inf for misses."""
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        directions = np.ascontiguousarray(directions, dtype=np.float64)
        t_min = np.ascontiguousarray(np.broadcast_to(t_min, len(origins)), dtype=np.float64)
        return _bvh.closest_hits(origins, directions, t_min, float(t_max), *self._kernel_args())

    def intersect_many_brute(self, origins, directions, t_min, t_max: float = np.inf):
        origins = np.ascontiguousarray(origins, dtype=np.float64)
        directions = np.ascontiguousarray(directions, dtype=np.float64)
        t_min = np.ascontiguousarray(np.broadcast_to(t_min, len(origins)), dtype=np.float64)
        return _bvh.closest_hits_brute(origins, directions, t_min, float(t_max), self.v0, self.e1, self.e2)
