"""Point cloud to RT mesh: outlier filtering, fusion, plane fitting, merging, voting.

Semantic/instance labels and per-frame material predictions are consumed as
input data; no learned model runs here.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, Delaunay, cKDTree

from .materials import MaterialClass
from .scene import Scene, TriMesh, validate_manifold, ManifoldReport

log = logging.getLogger(__name__)

HUBER_K = 1.345
# most EM-impactful first; decides ties in the per-object vote
VOTE_PRIORITY = (
    MaterialClass.CONCRETE,
    MaterialClass.METAL,
    MaterialClass.GLASS,
    MaterialClass.WOOD,
    MaterialClass.PLYWOOD,
    MaterialClass.AIR,
)
PLANAR_CLASSES = frozenset({"wall", "floor", "ceiling"})


class ReconError(ValueError):
    pass


class UnlabeledInstanceError(ReconError):
    def __init__(self, instance_ids):
        self.instance_ids = sorted(instance_ids)
        super().__init__(f"instances without material votes: {self.instance_ids}")


class NonWatertightMeshError(ReconError):
    def __init__(self, object_id, report: ManifoldReport):
        self.object_id = object_id
        self.report = report
        super().__init__(f"non-planar mesh {object_id!r} is not watertight: {report.as_dict()}")


@dataclass(frozen=True)
class RawPoint:
    position: tuple[float, float, float]
    confidence: float
    quality: float
    frame_id: int
    reproj_error: float


@dataclass
class PointCloud:
    """Column-oriented point cloud; ``instance_id`` uses -1 for unassigned points."""

    positions: np.ndarray
    confidence: np.ndarray
    quality: np.ndarray | None = None
    frame_id: np.ndarray | None = None
    reproj_error: np.ndarray | None = None
    semantic_label: np.ndarray | None = None
    instance_id: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.quality = np.ones(n) if self.quality is None else np.asarray(self.quality, dtype=np.float64)
        self.frame_id = np.zeros(n, dtype=np.int64) if self.frame_id is None else np.asarray(self.frame_id, dtype=np.int64)
        self.reproj_error = np.zeros(n) if self.reproj_error is None else np.asarray(self.reproj_error, dtype=np.float64)
        if self.semantic_label is not None:
            self.semantic_label = np.asarray(self.semantic_label, dtype=object)
        if self.instance_id is not None:
            if self.semantic_label is None:
                raise ReconError("instance_id requires semantic_label")
            self.instance_id = np.asarray(self.instance_id, dtype=np.int64)
        for name in ("confidence", "quality", "frame_id", "reproj_error", "semantic_label", "instance_id"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ReconError(f"{name} has {len(arr)} entries for {n} points")
        for name in ("confidence", "quality"):
            arr = getattr(self, name)
            if n and (arr.min() < 0 or arr.max() > 1):
                raise ReconError(f"{name} must lie in [0, 1]")
        if n and self.reproj_error.min() < 0:
            raise ReconError("reproj_error must be non-negative")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_points(cls, points: Sequence[RawPoint], semantic_label=None, instance_id=None) -> "PointCloud":
        return cls(
            positions=[p.position for p in points],
            confidence=[p.confidence for p in points],
            quality=[p.quality for p in points],
            frame_id=[p.frame_id for p in points],
            reproj_error=[p.reproj_error for p in points],
            semantic_label=semantic_label,
            instance_id=instance_id,
        )

    def subset(self, idx) -> "PointCloud":
        def take(a):
            return None if a is None else a[idx]

        return PointCloud(
            self.positions[idx], self.confidence[idx], self.quality[idx], self.frame_id[idx],
            self.reproj_error[idx], take(self.semantic_label), take(self.instance_id),
        )


@dataclass(frozen=True)
class PlanePrimitive:
    normal: np.ndarray
    offset: float
    inlier_ids: np.ndarray
    area: float
    centroid: np.ndarray

    def distance(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.normal + self.offset


@dataclass(frozen=True)
class FrameVote:
    object_id: int
    frame_id: int
    predicted_material: MaterialClass


@dataclass(frozen=True)
class VoteOutcome:
    material: MaterialClass
    counts: dict
    tied: bool


@dataclass
class FilterResult:
    cloud: PointCloud
    kept: np.ndarray  # indices into the input cloud
    retention: float
    removed_reproj: int
    removed_small_clusters: int
    status: str  # "ok" | "empty"


# --------------------------------------------------------------------------
# filtering and fusion


def huber_weight(residual: float, k: float = HUBER_K):
    if not k > 0:
        raise ValueError("Huber threshold must be positive")
    r = np.abs(np.asarray(residual, dtype=float))
    w = k / np.maximum(r, k)  # exactly 1 for |r| <= k
    return float(w) if w.ndim == 0 else w


def euclidean_clusters(positions: np.ndarray, radius: float) -> np.ndarray:
    """Connected-component labels under the ``radius`` neighbourhood graph."""
    n = len(positions)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def filter_outliers(cloud: PointCloud, max_reproj: float = 0.1, min_cluster: int = 100, radius: float = 0.1) -> FilterResult:
    """Reprojection gate, then removal of Euclidean clusters below ``min_cluster`` points."""
    if not max_reproj > 0:
        raise ValueError("max_reproj must be positive")
    if min_cluster < 1:
        raise ValueError("min_cluster must be >= 1")
    n = len(cloud)
    gate = np.flatnonzero(cloud.reproj_error <= max_reproj)
    labels = euclidean_clusters(cloud.positions[gate], radius)
    sizes = np.bincount(labels) if len(labels) else np.zeros(0, dtype=np.int64)
    keep = gate[sizes[labels] >= min_cluster] if len(labels) else gate
    result = FilterResult(
        cloud=cloud.subset(keep),
        kept=keep,
        retention=len(keep) / n if n else 0.0,
        removed_reproj=n - len(gate),
        removed_small_clusters=len(gate) - len(keep),
        status="ok" if len(keep) else "empty",
    )
    log.info("filter: kept %d of %d points (%.1f%%)", len(keep), n, 100 * result.retention)
    return result


def fuse_observations(positions, confidence, quality=None, extra_weight=None) -> np.ndarray:
    """Confidence-weighted mean with weights ``C_k * Q_k`` (optionally times ``extra_weight``)."""
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    w = np.asarray(confidence, dtype=float) * (1.0 if quality is None else np.asarray(quality, dtype=float))
    if extra_weight is not None:
        w = w * np.asarray(extra_weight, dtype=float)
    w = np.broadcast_to(w, (len(p),))
    if len(p) == 0:
        raise ReconError("no observations to fuse")
    if np.any(w < 0):
        raise ReconError("fusion weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise ReconError("all fusion weights are zero; the average is undefined")
    return (w[:, None] * p).sum(axis=0) / total


def fuse_cloud(cloud: PointCloud, voxel: float, use_huber: bool = False, huber_k: float = HUBER_K) -> PointCloud:
    """Fuse observations falling in the same voxel (and instance) into one point."""
    if voxel <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    if cloud.instance_id is not None:
        keys = np.column_stack([keys, cloud.instance_id])
    _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    w = cloud.confidence * cloud.quality
    if use_huber:
        w = w * huber_weight(cloud.reproj_error, huber_k)
    wsum = np.bincount(inv, weights=w)
    zero = wsum <= 0
    wsafe = np.where(zero, 1.0, wsum)
    pos = np.column_stack([np.bincount(inv, weights=w * cloud.positions[:, a]) for a in range(3)]) / wsafe[:, None]
    # groups with zero total weight keep their first observation
    pos[zero] = cloud.positions[first[zero]]
    # keep voxels in first-seen order for stable output
    order = np.argsort(first, kind="stable")
    sub = cloud.subset(first[order])
    sub.positions = pos[order]
    sub.confidence = (np.bincount(inv, weights=cloud.confidence) / np.bincount(inv))[order]
    return sub


# --------------------------------------------------------------------------
# planes


def _orient(normal: np.ndarray, centroid: np.ndarray, toward) -> np.ndarray:
    if toward is not None:
        if np.dot(normal, np.asarray(toward, dtype=float) - centroid) < 0:
            normal = -normal
    else:
        i = int(np.argmax(np.abs(normal)))
        if normal[i] < 0:
            normal = -normal
    return normal


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.eye(3)[int(np.argmin(np.abs(normal)))]
    u = np.cross(normal, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


def fit_plane(points, weights=None, toward=None, inlier_ids=None, area: float | None = None) -> PlanePrimitive:
    """Weighted least-squares plane: smallest eigenvector of the weighted covariance.

    ``toward`` is a viewpoint the normal should face; without it the largest
    normal component is made positive.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 3:
        raise ReconError(f"plane fit needs at least 3 points, got {len(p)}")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not w.sum() > 0:
        raise ReconError("plane fit weights must be non-negative with a positive sum")
    c = (w[:, None] * p).sum(axis=0) / w.sum()
    q = p - c
    cov = (w[:, None] * q).T @ q / w.sum()
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise ReconError("points are collinear or coincident; plane is undefined")
    n = _orient(evecs[:, 0] / np.linalg.norm(evecs[:, 0]), c, toward)
    if area is None:
        u, v = _plane_basis(n)
        uv = np.column_stack([q @ u, q @ v])
        try:
            area = float(ConvexHull(uv).volume)
        except Exception:
            area = 0.0
    ids = np.arange(len(p)) if inlier_ids is None else np.asarray(inlier_ids)
    return PlanePrimitive(n, float(-n @ c), ids, float(area), c)


def _angle_deg(a: PlanePrimitive, b: PlanePrimitive) -> float:
    return math.degrees(math.acos(min(1.0, abs(float(a.normal @ b.normal)))))


def _proj_dist(a: PlanePrimitive, b: PlanePrimitive) -> float:
    return max(abs(float(a.distance(b.centroid))), abs(float(b.distance(a.centroid))))


def mergeable(a: PlanePrimitive, b: PlanePrimitive, max_proj_dist: float = 0.1, max_normal_angle: float = 10.0) -> bool:
    return _angle_deg(a, b) <= max_normal_angle + 1e-9 and _proj_dist(a, b) <= max_proj_dist + 1e-12


def _merge_group(group: list[PlanePrimitive], points, toward) -> PlanePrimitive:
    area = sum(g.area for g in group)
    if points is not None:
        pts = np.asarray(points, dtype=float)
        ids = np.concatenate([g.inlier_ids for g in group])
        w = np.concatenate([np.full(len(g.inlier_ids), g.area / max(len(g.inlier_ids), 1)) for g in group])
        if w.sum() <= 0:
            w = np.ones(len(ids))
        return fit_plane(pts[ids], w, toward=toward if toward is not None else group[0].centroid + group[0].normal,
                         inlier_ids=ids, area=area)
    ref = group[0].normal
    wts = np.array([max(g.area, 1e-12) for g in group])
    normals = np.array([g.normal if g.normal @ ref >= 0 else -g.normal for g in group])
    n = (wts[:, None] * normals).sum(axis=0)
    n /= np.linalg.norm(n)
    c = (wts[:, None] * np.array([g.centroid for g in group])).sum(axis=0) / wts.sum()
    ids = np.concatenate([g.inlier_ids for g in group])
    return PlanePrimitive(n, float(-n @ c), ids, area, c)


def merge_planes(
    primitives: Sequence[PlanePrimitive],
    max_proj_dist: float = 0.1,
    max_normal_angle: float = 10.0,
    points=None,
    toward=None,
) -> list[PlanePrimitive]:
    """Merge primitives under the transitive closure of the pairwise relation.

    Merged groups are refitted with per-point weights ``area / n_inliers`` of
    their member primitive when ``points`` is given. Repeats until no pair is
    mergeable, so the output is a fixed point.
    """
    prims = list(primitives)
    while True:
        n = len(prims)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(n):
            for j in range(i + 1, n):
                if mergeable(prims[i], prims[j], max_proj_dist, max_normal_angle):
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
        groups: dict[int, list[int]] = {}
        for i in range(n):
            groups.setdefault(find(i), []).append(i)
        if len(groups) == n:
            return prims
        prims = [prims[g[0]] if len(g) == 1 else _merge_group([prims[i] for i in g], points, toward)
                 for _, g in sorted(groups.items())]


def project_to_plane(mesh: TriMesh, plane: PlanePrimitive) -> TriMesh:
    n = plane.normal
    v = mesh.vertices - np.outer(mesh.vertices @ n + plane.offset, n)
    return TriMesh(v, mesh.faces.copy(), list(mesh.face_material), object_id=mesh.object_id, sheet=mesh.sheet)


def plane_sheet(plane: PlanePrimitive, points: np.ndarray, material: MaterialClass, object_id: str,
                alpha: float = 0.2) -> TriMesh:
    """Alpha-shape triangulation of inlier points projected onto ``plane``.

    Points are thinned to one per ``alpha / 2`` grid cell, Delaunay
    triangulated in plane coordinates, and triangles with circumradius above
    ``alpha`` are dropped. Face normals follow the plane normal.
    """
    n = plane.normal
    u, v = _plane_basis(n)
    origin = -plane.offset * n
    q = np.asarray(points, dtype=float) - origin
    uv = np.column_stack([q @ u, q @ v])
    cell = alpha / 2.0
    _, first = np.unique(np.floor(uv / cell).astype(np.int64), axis=0, return_index=True)
    uv = uv[np.sort(first)]
    if len(uv) < 3:
        raise ReconError(f"{object_id}: too few points for a surface mesh")
    tri = Delaunay(uv).simplices
    a, b, c = uv[tri[:, 0]], uv[tri[:, 1]], uv[tri[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    cross = (b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0]
    area = 0.5 * np.abs(cross)
    with np.errstate(divide="ignore", invalid="ignore"):
        circ = la * lb * lc / (4.0 * area)
    keep = (area > 1e-6) & (circ <= alpha)
    tri = tri[keep]
    cross = cross[keep]
    # (u, v, n) is right-handed, so positive 2D orientation means normal along n
    flip = cross < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    used, faces = np.unique(tri, return_inverse=True)
    faces = faces.reshape(-1, 3)
    verts = origin + uv[used, :1] * u + uv[used, 1:] * v
    if not len(faces):
        raise ReconError(f"{object_id}: alpha shape produced no triangles")
    mesh = TriMesh(verts, faces, [material] * len(faces), object_id=object_id, sheet=True)
    return project_to_plane(mesh, plane)


# --------------------------------------------------------------------------
# material voting


def vote_material(votes: Iterable[FrameVote], object_id) -> VoteOutcome:
    counts = Counter(v.predicted_material for v in votes if v.object_id == object_id)
    if not counts:
        raise UnlabeledInstanceError([object_id])
    best = max(counts.values())
    leaders = [m for m in VOTE_PRIORITY if counts.get(m, 0) == best]
    return VoteOutcome(leaders[0], {m.value: c for m, c in sorted(counts.items(), key=lambda kv: VOTE_PRIORITY.index(kv[0]))},
                       len(leaders) > 1)


# --------------------------------------------------------------------------
# pipeline


@dataclass
class ReconConfig:
    max_reproj: float = 0.1
    min_cluster: int = 100
    cluster_radius: float = 0.1
    fuse_voxel: float = 0.01
    use_huber: bool = False
    huber_k: float = HUBER_K
    tile_size: float = 1.0
    min_tile_points: int = 30
    inlier_dist: float = 0.05
    max_proj_dist: float = 0.1
    max_normal_angle: float = 10.0
    alpha: float = 0.2
    planar_classes: frozenset = field(default_factory=lambda: PLANAR_CLASSES)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ReconConfig":
        data = dict(data)
        if "planar_classes" in data:
            data["planar_classes"] = frozenset(data["planar_classes"])
        return cls(**data)


@dataclass
class BuildResult:
    scene: Scene
    report: dict
    planes: dict[int, list[PlanePrimitive]]


def _tile_primitives(points: np.ndarray, cfg: ReconConfig, toward) -> list[PlanePrimitive]:
    base = fit_plane(points, toward=toward)
    u, v = _plane_basis(base.normal)
    uv = np.column_stack([points @ u, points @ v])
    tiles = np.floor(uv / cfg.tile_size).astype(np.int64)
    keys, inv = np.unique(tiles, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    prims = []
    for t in range(len(keys)):
        ids = np.flatnonzero(inv == t)
        if len(ids) < cfg.min_tile_points:
            continue
        try:
            p = fit_plane(points[ids], toward=toward)
            ids = ids[np.abs(p.distance(points[ids])) <= cfg.inlier_dist]
            if len(ids) < cfg.min_tile_points:
                continue
            prims.append(fit_plane(points[ids], toward=toward, inlier_ids=ids))
        except ReconError:
            continue
    if not prims:
        ids = np.flatnonzero(np.abs(base.distance(points)) <= cfg.inlier_dist)
        prims = [fit_plane(points[ids], toward=toward, inlier_ids=ids)]
    return prims


def build_rt_model(
    cloud: PointCloud,
    votes: Sequence[FrameVote],
    nonplanar_meshes: Mapping[str, TriMesh] | Sequence[TriMesh] = (),
    config: ReconConfig | None = None,
) -> BuildResult:
    cfg = config or ReconConfig()
    if cloud.instance_id is None or cloud.semantic_label is None:
        raise ReconError("point cloud lacks semantic/instance labels")
    if not isinstance(nonplanar_meshes, Mapping):
        nonplanar_meshes = {m.object_id: m for m in nonplanar_meshes}

    filt = filter_outliers(cloud, cfg.max_reproj, cfg.min_cluster, cfg.cluster_radius)
    if filt.status == "empty":
        raise ReconError("outlier filtering removed every point")
    clean = fuse_cloud(filt.cloud, cfg.fuse_voxel, cfg.use_huber, cfg.huber_k)
    toward = clean.positions.mean(axis=0)

    instances = sorted(int(i) for i in np.unique(clean.instance_id) if i >= 0)
    voted = {int(v.object_id) for v in votes}
    missing = [i for i in instances if i not in voted]
    if missing:
        raise UnlabeledInstanceError(missing)

    report: dict = {
        "points_in": len(cloud),
        "points_after_filter": len(filt.cloud),
        "points_after_fusion": len(clean),
        "retention": filt.retention,
        "removed_reproj": filt.removed_reproj,
        "removed_small_clusters": filt.removed_small_clusters,
        "instances": {},
        "ties": [],
        "manifold": {},
    }
    meshes: list[TriMesh] = []
    planes: dict[int, list[PlanePrimitive]] = {}
    for inst in instances:
        idx = np.flatnonzero(clean.instance_id == inst)
        labels = Counter(clean.semantic_label[idx].tolist())
        semantic = sorted(labels.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        outcome = vote_material(votes, inst)
        if outcome.tied:
            report["ties"].append({"instance": inst, "counts": outcome.counts, "chosen": outcome.material.value})
        entry = {"semantic": semantic, "material": outcome.material.value, "votes": outcome.counts}
        if semantic in cfg.planar_classes:
            pts = clean.positions[idx]
            prims = _tile_primitives(pts, cfg, toward)
            merged = merge_planes(prims, cfg.max_proj_dist, cfg.max_normal_angle, points=pts, toward=toward)
            merged.sort(key=lambda p: -len(p.inlier_ids))
            planes[inst] = merged
            entry.update(primitives=len(prims), merged=len(merged), planes=[
                {"normal": p.normal.tolist(), "offset": p.offset, "area": p.area} for p in merged
            ])
            for k, plane in enumerate(merged):
                oid = f"inst{inst}_{semantic}" if len(merged) == 1 else f"inst{inst}_{semantic}_p{k}"
                sel = np.unique(plane.inlier_ids)
                mesh = plane_sheet(plane, pts[sel], outcome.material, oid, cfg.alpha)
                rep = validate_manifold(mesh)
                report["manifold"][oid] = rep.as_dict()
                meshes.append(mesh)
        else:
            key = next((k for k in (str(inst), f"inst{inst}", f"instance_{inst}") if k in nonplanar_meshes), None)
            if key is None:
                raise ReconError(f"non-planar instance {inst} ({semantic}) has no supplied mesh")
            src = nonplanar_meshes[key]
            rep = validate_manifold(src)
            report["manifold"][f"inst{inst}_{semantic}"] = rep.as_dict()
            if not rep.is_watertight:
                raise NonWatertightMeshError(key, rep)
            meshes.append(TriMesh(src.vertices, src.faces, outcome.material, object_id=f"inst{inst}_{semantic}"))
            entry["mesh"] = key
        report["instances"][str(inst)] = entry
    return BuildResult(Scene(meshes), report, planes)


# --------------------------------------------------------------------------
# file interfaces


def read_votes(path: str | Path) -> list[FrameVote]:
    votes, seen = [], set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["object_id"]), int(row["frame_id"]))
            if key in seen:
                raise ReconError(f"duplicate vote for object {key[0]} in frame {key[1]}")
            seen.add(key)
            votes.append(FrameVote(key[0], key[1], MaterialClass.parse(row["material"])))
    return votes


def write_votes(votes: Iterable[FrameVote], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "frame_id", "material"])
        for v in votes:
            w.writerow([v.object_id, v.frame_id, v.predicted_material.value])


def write_point_cloud(cloud: PointCloud, path: str | Path) -> None:
    """Binary PLY with per-point attributes; semantic labels are stored as indices."""
    classes = sorted(set(cloud.semantic_label.tolist())) if cloud.semantic_label is not None else []
    lookup = {c: i for i, c in enumerate(classes)}
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("confidence", "f8"), ("quality", "f8"),
              ("frame_id", "i4"), ("reproj_error", "f8")]
    if cloud.semantic_label is not None:
        fields.append(("semantic_label", "i2"))
    if cloud.instance_id is not None:
        fields.append(("instance_id", "i4"))
    arr = np.empty(len(cloud), dtype=fields)
    arr["x"], arr["y"], arr["z"] = cloud.positions.T
    arr["confidence"] = cloud.confidence
    arr["quality"] = cloud.quality
    arr["frame_id"] = cloud.frame_id
    arr["reproj_error"] = cloud.reproj_error
    if cloud.semantic_label is not None:
        arr["semantic_label"] = [lookup[c] for c in cloud.semantic_label]
    if cloud.instance_id is not None:
        arr["instance_id"] = cloud.instance_id
    comments = ["semantic_classes " + " ".join(classes)] if classes else []
    PlyData([PlyElement.describe(arr, "vertex")], text=False, byte_order="<", comments=comments).write(str(path))


def read_point_cloud(path: str | Path) -> PointCloud:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    names = v.dtype.names
    classes: list[str] = []
    for c in ply.comments:
        if c.startswith("semantic_classes"):
            classes = c.split()[1:]
    n = len(v)

    def col(name, default=None, dtype=float):
        return np.asarray(v[name], dtype=dtype) if name in names else default

    sem = None
    if "semantic_label" in names:
        idx = np.asarray(v["semantic_label"], dtype=np.int64)
        sem = np.array([classes[i] if 0 <= i < len(classes) else str(i) for i in idx], dtype=object)
    return PointCloud(
        positions=np.column_stack([v["x"], v["y"], v["z"]]),
        confidence=col("confidence", np.ones(n)),
        quality=col("quality"),
        frame_id=col("frame_id", dtype=np.int64),
        reproj_error=col("reproj_error"),
        semantic_label=sem,
        instance_id=col("instance_id", dtype=np.int64),
    )
