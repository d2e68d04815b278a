"""Deterministic synthetic inputs: box room scene, ground slab, room point clouds."""

from __future__ import annotations

import numpy as np

from .materials import MaterialClass
from .scene import Scene, TriMesh

BOX_SIZE = (6.0, 4.0, 3.0)
# side name -> (material, fixed axis, fixed at max side?)
BOX_SIDES = {
    "floor": (MaterialClass.CONCRETE, 2, False),
    "ceiling": (MaterialClass.CONCRETE, 2, True),
    "wall_west": (MaterialClass.CONCRETE, 0, False),
    "wall_east": (MaterialClass.GLASS, 0, True),
    "wall_south": (MaterialClass.WOOD, 1, False),
    "wall_north": (MaterialClass.CONCRETE, 1, True),
}
BOX_TX = (1.3, 1.1, 2.4)
BOX_RX = (4.6, 2.7, 1.5)


def box_mesh(lo, hi, materials: dict[str, MaterialClass] | MaterialClass, object_id: str = "room") -> TriMesh:
    """Closed axis-aligned box, 12 outward-facing triangles."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = {
        "floor": (0, 3, 2, 1),
        "ceiling": (4, 5, 6, 7),
        "wall_west": (0, 4, 7, 3),
        "wall_east": (1, 2, 6, 5),
        "wall_south": (0, 1, 5, 4),
        "wall_north": (3, 7, 6, 2),
    }
    faces, mats = [], []
    for name, (a, b, c, d) in quads.items():
        m = materials if isinstance(materials, MaterialClass) else materials[name]
        faces += [(a, b, c), (a, c, d)]
        mats += [m, m]
    return TriMesh(v, np.array(faces), mats, object_id=object_id)


def box_room_scene() -> Scene:
    """6-wall, 12-face closed room with mixed wall materials."""
    mats = {name: spec[0] for name, spec in BOX_SIDES.items()}
    return Scene([box_mesh((0, 0, 0), BOX_SIZE, mats)])


def ground_slab_scene(half_width: float = 1000.0, depth: float = 1.0, material=MaterialClass.CONCRETE) -> Scene:
    """Large closed slab whose top face is the plane z = 0."""
    mesh = box_mesh((-half_width, -half_width, -depth), (half_width, half_width, 0.0), material, object_id="ground")
    return Scene([mesh])


PLANAR_CLASSES = ("wall", "floor", "ceiling")


def room_planes(size=BOX_SIZE) -> dict[str, tuple[np.ndarray, float]]:
    """Ground-truth inward-facing planes ``n.p + d = 0`` of a box room."""
    sx, sy, sz = size
    return {
        "floor": (np.array([0.0, 0.0, 1.0]), 0.0),
        "ceiling": (np.array([0.0, 0.0, -1.0]), sz),
        "wall_west": (np.array([1.0, 0.0, 0.0]), 0.0),
        "wall_east": (np.array([-1.0, 0.0, 0.0]), sx),
        "wall_south": (np.array([0.0, 1.0, 0.0]), 0.0),
        "wall_north": (np.array([0.0, -1.0, 0.0]), sy),
    }


def synthetic_room_cloud(
    n_points: int = 100_000,
    size=BOX_SIZE,
    noise: float = 0.005,
    seed: int = 7,
    bad_reproj_fraction: float = 0.0,
    blob_fraction: float = 0.0,
    n_frames: int = 40,
):
    """Noisy samples of the six inner surfaces of a box room.

    Points are spread over surfaces proportionally to area. Optional clutter:
    ``bad_reproj_fraction`` of points get reprojection errors above 0.1 m and
    ``blob_fraction`` of points are scattered outside the room in tiny clusters.
    Returns ``(PointCloud, instance names)``.
    """
    from .recon import PointCloud  # local import keeps fixtures importable early

    rng = np.random.default_rng(seed)
    sx, sy, sz = size
    planes = room_planes(size)
    extents = {
        "floor": (sx, sy), "ceiling": (sx, sy),
        "wall_west": (sy, sz), "wall_east": (sy, sz),
        "wall_south": (sx, sz), "wall_north": (sx, sz),
    }
    names = list(planes)
    areas = np.array([extents[n][0] * extents[n][1] for n in names])
    n_blob = int(round(blob_fraction * n_points))
    n_surf = n_points - n_blob
    counts = np.floor(areas / areas.sum() * n_surf).astype(int)
    counts[0] += n_surf - counts.sum()

    pos, inst, sem = [], [], []
    for i, name in enumerate(names):
        u = rng.uniform(0.0, 1.0, counts[i])
        v = rng.uniform(0.0, 1.0, counts[i])
        if name in ("floor", "ceiling"):
            p = np.column_stack([u * sx, v * sy, np.full(counts[i], 0.0 if name == "floor" else sz)])
        elif name in ("wall_west", "wall_east"):
            p = np.column_stack([np.full(counts[i], 0.0 if name == "wall_west" else sx), u * sy, v * sz])
        else:
            p = np.column_stack([u * sx, np.full(counts[i], 0.0 if name == "wall_south" else sy), v * sz])
        n, _ = planes[name]
        p = p + rng.normal(0.0, noise, counts[i])[:, None] * n
        pos.append(p)
        inst += [i] * counts[i]
        sem += ["floor" if name == "floor" else "ceiling" if name == "ceiling" else "wall"] * counts[i]
    pos = np.concatenate(pos)
    inst = np.array(inst, dtype=np.int64)
    sem = np.array(sem, dtype=object)
    reproj = np.abs(rng.normal(0.0, 0.01, len(pos)))
    if bad_reproj_fraction > 0:
        bad = rng.choice(len(pos), int(round(bad_reproj_fraction * len(pos))), replace=False)
        reproj[bad] = rng.uniform(0.11, 0.5, len(bad))

    if n_blob:
        # clusters of 10 points, 1 m apart from each other and from the room
        n_clusters = int(np.ceil(n_blob / 10))
        centers = np.column_stack([
            np.full(n_clusters, sx + 5.0),
            (np.arange(n_clusters) % 50) * 1.0,
            (np.arange(n_clusters) // 50) * 1.0,
        ])
        blob = centers.repeat(10, axis=0)[:n_blob] + rng.normal(0.0, 0.01, (n_blob, 3))
        pos = np.concatenate([pos, blob])
        inst = np.concatenate([inst, np.full(n_blob, -1)])
        sem = np.concatenate([sem, np.array(["clutter"] * n_blob, dtype=object)])
        reproj = np.concatenate([reproj, np.abs(rng.normal(0.0, 0.01, n_blob))])

    m = len(pos)
    cloud = PointCloud(
        positions=pos,
        confidence=rng.uniform(0.5, 1.0, m),
        quality=np.ones(m),
        frame_id=rng.integers(0, n_frames, m),
        reproj_error=reproj,
        semantic_label=sem,
        instance_id=inst,
    )
    return cloud, names


# --------------------------------------------------------------------------
# end-to-end run fixture: room + metal cabinet, three links

CABINET_LO = (2.5, 1.5, 0.3)
CABINET_HI = (3.5, 2.5, 2.0)
RUN_LINKS = {
    "L1": ((1.0, 3.5, 2.4), (5.0, 3.4, 1.5), "LOS"),
    "L2": ((1.5, 2.0, 1.2), (4.5, 2.0, 1.2), "NLOS"),  # blocked by the cabinet
    "L3": (BOX_TX, (4.6, 0.8, 1.5), "LOS"),
}
RUN_SIM = {"n_rays": 200_000, "max_reflections": 3}
ROOM_MATERIALS = ("concrete", "concrete", "concrete", "glass", "wood", "concrete")


def cabinet_mesh(material=MaterialClass.METAL) -> TriMesh:
    return box_mesh(CABINET_LO, CABINET_HI, material, object_id="cabinet")


def ground_truth_run_scene() -> Scene:
    mats = {name: spec[0] for name, spec in BOX_SIDES.items()}
    return Scene([box_mesh((0, 0, 0), BOX_SIZE, mats), cabinet_mesh()])


def _cabinet_points(n: int, rng, noise: float) -> np.ndarray:
    lo, hi = np.array(CABINET_LO), np.array(CABINET_HI)
    ext = hi - lo
    # 6 faces, area-weighted; axis a fixed at lo or hi
    faces = [(a, s) for a in range(3) for s in (0, 1)]
    areas = np.array([np.prod(np.delete(ext, a)) for a, _ in faces])
    which = rng.choice(len(faces), n, p=areas / areas.sum())
    p = lo + rng.uniform(0.0, 1.0, (n, 3)) * ext
    for k, (a, s) in enumerate(faces):
        sel = which == k
        p[sel, a] = hi[a] if s else lo[a]
        p[sel, a] += rng.normal(0.0, noise, sel.sum()) * (1 if s else -1)
    return p


def run_fixture_inputs(n_points: int = 100_000, n_cabinet: int = 6000, seed: int = 11):
    """Cloud, votes and supplied non-planar meshes for the end-to-end fixture."""
    from .recon import FrameVote, PointCloud

    cloud, names = synthetic_room_cloud(n_points, noise=0.005, seed=seed, bad_reproj_fraction=0.05, blob_fraction=0.02)
    rng = np.random.default_rng(seed + 1)
    cab = _cabinet_points(n_cabinet, rng, 0.005)
    inst_cab = len(names)
    m = len(cab)
    cloud = PointCloud(
        positions=np.concatenate([cloud.positions, cab]),
        confidence=np.concatenate([cloud.confidence, rng.uniform(0.5, 1.0, m)]),
        quality=np.concatenate([cloud.quality, np.ones(m)]),
        frame_id=np.concatenate([cloud.frame_id, rng.integers(0, 40, m)]),
        reproj_error=np.concatenate([cloud.reproj_error, np.abs(rng.normal(0.0, 0.01, m))]),
        semantic_label=np.concatenate([cloud.semantic_label, np.array(["cabinet"] * m, dtype=object)]),
        instance_id=np.concatenate([cloud.instance_id, np.full(m, inst_cab)]),
    )
    votes = []
    labels = list(ROOM_MATERIALS) + ["metal"]
    for inst, mat in enumerate(labels):
        for frame in range(7):
            # one dissenting frame per object keeps the vote non-trivial
            pred = "plywood" if frame == 3 and mat != "plywood" else mat
            votes.append(FrameVote(inst, frame, MaterialClass(pred)))
    meshes = {f"inst{inst_cab}": cabinet_mesh()}
    return cloud, votes, meshes


def bundled_box_room_path():
    """Path of the shipped box-room scene XML (same geometry as ``box_room_scene``)."""
    from importlib.resources import files

    return files("sitewave") / "data" / "box_room" / "box_room.xml"
