"""Shooting-and-bouncing rays with image-method validation to a point receiver.

Rays launched on a spherical Fibonacci lattice only *propose* interaction
sequences (ordered reflect/penetrate events on faces). Every distinct
sequence is then solved exactly with TX images mirrored across the
reflecting faces, so no reception sphere is involved.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numba
import numpy as np

from .bvh import BARY_EPS, closest_hit
from .materials import C0, MaterialClass, MaterialRecord, default_table, eval_permittivity, fresnel_arrays, slab_transmission
from .scene import ManifoldReport, Scene, mesh_ok_for_tracing, validate_manifold

log = logging.getLogger(__name__)

SURFACE_EPS = 1e-4  # m, self-intersection offset after each interaction
REFLECT, PENETRATE = 0, 1
MECHANISMS = frozenset({"reflection", "penetration"})
# faces whose normal-incidence slab transmission is below this are opaque to SBR
OPAQUE_POWER = 1e-20


class SceneRefused(RuntimeError):
    """Raised when the scene fails the manifold contract."""

    def __init__(self, reports: Mapping[str, ManifoldReport]):
        self.reports = dict(reports)
        bad = ", ".join(sorted(self.reports))
        super().__init__(f"scene is not RT-ready, offending objects: {bad}")


@dataclass(frozen=True)
class SimConfig:
    freq: float = 6.75e9
    tx_pos: tuple[float, float, float] = (0.0, 0.0, 2.4)
    rx_pos: tuple[float, float, float] = (1.0, 0.0, 1.5)
    tx_power: float = 0.0  # dBm
    n_rays: int = 10**6
    max_reflections: int = 5
    mechanisms: frozenset[str] = MECHANISMS
    dynamic_range: float = 25.0  # dB
    max_penetrations: int = 2
    delay_bin: float | None = None  # s; None keeps one PDP entry per path
    batch_size: int = 1 << 17
    min_path_power: float = -300.0  # dBm, weaker paths are dropped

    def __post_init__(self):
        object.__setattr__(self, "tx_pos", tuple(float(x) for x in self.tx_pos))
        object.__setattr__(self, "rx_pos", tuple(float(x) for x in self.rx_pos))
        object.__setattr__(self, "mechanisms", frozenset(self.mechanisms))
        if "diffraction" in self.mechanisms:
            raise NotImplementedError("diffraction is not implemented; use reflection and/or penetration")
        unknown = self.mechanisms - MECHANISMS
        if unknown:
            raise ValueError(f"unknown propagation mechanisms: {sorted(unknown)}")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if self.max_reflections < 0 or self.max_penetrations < 0:
            raise ValueError("interaction limits must be >= 0")
        if not self.dynamic_range > 0:
            raise ValueError("dynamic_range must be positive")
        if not self.freq > 0:
            raise ValueError("freq must be positive")
        if len(self.tx_pos) != 3 or len(self.rx_pos) != 3:
            raise ValueError("tx_pos and rx_pos must be 3D points")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown SimConfig keys: {sorted(extra)}")
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return {
            "freq": self.freq,
            "tx_pos": list(self.tx_pos),
            "rx_pos": list(self.rx_pos),
            "tx_power": self.tx_power,
            "n_rays": self.n_rays,
            "max_reflections": self.max_reflections,
            "mechanisms": sorted(self.mechanisms),
            "dynamic_range": self.dynamic_range,
            "max_penetrations": self.max_penetrations,
            "delay_bin": self.delay_bin,
            "batch_size": self.batch_size,
            "min_path_power": self.min_path_power,
        }

    def swapped(self) -> "SimConfig":
        return replace(self, tx_pos=self.rx_pos, rx_pos=self.tx_pos)


@dataclass(frozen=True)
class Interaction:
    kind: str  # "reflect" | "penetrate"
    face: int
    point: tuple[float, float, float]
    incidence_angle: float  # rad


@dataclass(frozen=True)
class PropPath:
    interactions: tuple[Interaction, ...]
    delay: float
    amplitude: complex
    power_dbm: float
    length: float

    @property
    def sequence(self) -> tuple[tuple[str, int], ...]:
        return tuple((i.kind, i.face) for i in self.interactions)

    @property
    def n_reflections(self) -> int:
        return sum(i.kind == "reflect" for i in self.interactions)

    def to_dict(self, complex_amplitude: bool = False) -> dict:
        out = {
            "delay_s": self.delay,
            "power_dbm": self.power_dbm,
            "length_m": self.length,
            "interactions": [
                {"kind": i.kind, "face": i.face, "point": list(i.point), "incidence_angle_rad": i.incidence_angle}
                for i in self.interactions
            ],
        }
        if complex_amplitude:
            out["amplitude"] = [self.amplitude.real, self.amplitude.imag]
        return out


class TraceResult(list):
    """List of PropPath with diagnostic counters in ``stats``."""

    def __init__(self, paths: Iterable[PropPath] = (), stats: dict | None = None):
        super().__init__(paths)
        self.stats = stats or {}


@dataclass
class Pdp:
    delays: np.ndarray  # s
    powers: np.ndarray  # mW
    metadata: dict = field(default_factory=dict)

    @property
    def entries(self) -> list[tuple[float, float]]:
        return list(zip(self.delays.tolist(), self.powers.tolist()))

    @property
    def powers_dbm(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.powers)

    def __len__(self):
        return len(self.delays)


def fibonacci_directions(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def reflect_dir(d, n):
    d = np.asarray(d, dtype=float)
    n = np.asarray(n, dtype=float)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def vertical_polarization(k) -> np.ndarray:
    """Unit field direction of a vertically polarised isotropic antenna along ``k``."""
    k = np.asarray(k, dtype=float)
    for ref in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        v = ref - np.dot(ref, k) * k
        nv = np.linalg.norm(v)
        if nv > 1e-12:
            return v / nv
    raise AssertionError("unreachable")


def _perp(k: np.ndarray) -> np.ndarray:
    for ref in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        s = np.cross(k, ref)
        ns = np.linalg.norm(s)
        if ns > 1e-12:
            return s / ns
    raise AssertionError("unreachable")


# --------------------------------------------------------------------------
# image-method validation kernel


@numba.njit(cache=True)
def _inside(p, f, v0, e1, e2):
    wx = p[0] - v0[f, 0]
    wy = p[1] - v0[f, 1]
    wz = p[2] - v0[f, 2]
    d00 = e1[f, 0] * e1[f, 0] + e1[f, 1] * e1[f, 1] + e1[f, 2] * e1[f, 2]
    d01 = e1[f, 0] * e2[f, 0] + e1[f, 1] * e2[f, 1] + e1[f, 2] * e2[f, 2]
    d11 = e2[f, 0] * e2[f, 0] + e2[f, 1] * e2[f, 1] + e2[f, 2] * e2[f, 2]
    d20 = wx * e1[f, 0] + wy * e1[f, 1] + wz * e1[f, 2]
    d21 = wx * e2[f, 0] + wy * e2[f, 1] + wz * e2[f, 2]
    den = d00 * d11 - d01 * d01
    if den <= 0.0:
        return False
    b1 = (d11 * d20 - d01 * d21) / den
    b2 = (d00 * d21 - d01 * d20) / den
    eps = BARY_EPS
    return b1 >= -eps and b2 >= -eps and b1 + b2 <= 1.0 + eps


@numba.njit(cache=True)
def _validate(cand, tx, rx, nrm, off, v0, e1, e2, bmin, bmax, left, right, start, count, order, eps):
    K, L = cand.shape
    valid = np.zeros(K, dtype=np.bool_)
    pts = np.zeros((K, L, 3))
    imgs = np.empty((L + 1, 3))
    chain = np.empty((L + 2, 3))
    refl_pos = np.empty(L, dtype=np.int64)
    d = np.empty(3)
    for k in range(K):
        n_int = 0
        m = 0
        for j in range(L):
            c = cand[k, j]
            if c < 0:
                break
            n_int += 1
            if c % 2 == REFLECT:
                refl_pos[m] = j
                m += 1
        for a in range(3):
            imgs[0, a] = tx[a]
        for i in range(m):
            f = cand[k, refl_pos[i]] // 2
            s = nrm[f, 0] * imgs[i, 0] + nrm[f, 1] * imgs[i, 1] + nrm[f, 2] * imgs[i, 2] + off[f]
            for a in range(3):
                imgs[i + 1, a] = imgs[i, a] - 2.0 * s * nrm[f, a]
        ok = True
        for a in range(3):
            chain[0, a] = tx[a]
            chain[m + 1, a] = rx[a]
        for i in range(m - 1, -1, -1):
            f = cand[k, refl_pos[i]] // 2
            for a in range(3):
                d[a] = chain[i + 2, a] - imgs[i + 1, a]
            den = nrm[f, 0] * d[0] + nrm[f, 1] * d[1] + nrm[f, 2] * d[2]
            if abs(den) < 1e-15:
                ok = False
                break
            s = -(nrm[f, 0] * imgs[i + 1, 0] + nrm[f, 1] * imgs[i + 1, 1] + nrm[f, 2] * imgs[i + 1, 2] + off[f]) / den
            if not (1e-12 < s < 1.0 - 1e-12):
                ok = False
                break
            for a in range(3):
                chain[i + 1, a] = imgs[i + 1, a] + s * d[a]
            if not _inside(chain[i + 1], f, v0, e1, e2):
                ok = False
                break
        if not ok:
            continue
        # both neighbours of a reflection point must lie strictly on the same side
        for i in range(m):
            f = cand[k, refl_pos[i]] // 2
            s1 = nrm[f, 0] * chain[i, 0] + nrm[f, 1] * chain[i, 1] + nrm[f, 2] * chain[i, 2] + off[f]
            s2 = nrm[f, 0] * chain[i + 2, 0] + nrm[f, 1] * chain[i + 2, 1] + nrm[f, 2] * chain[i + 2, 2] + off[f]
            if s1 * s2 <= 0.0 or abs(s1) < 1e-9 or abs(s2) < 1e-9:
                ok = False
                break
        if not ok:
            continue
        # walk every segment; the faces it crosses must be exactly the expected penetrations
        j = 0
        for i in range(m + 1):
            for a in range(3):
                d[a] = chain[i + 1, a] - chain[i, a]
            length = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
            if length <= 2.0 * eps:
                ok = False
                break
            for a in range(3):
                d[a] /= length
            t = eps
            while True:
                f, th = closest_hit(chain[i], d, t, length - eps, v0, e1, e2, bmin, bmax, left, right, start, count, order)
                if f < 0:
                    break
                if j >= n_int or cand[k, j] != 2 * f + PENETRATE:
                    ok = False
                    break
                for a in range(3):
                    pts[k, j, a] = chain[i, a] + th * d[a]
                j += 1
                t = th + eps
            if not ok:
                break
            if i < m:
                if j != refl_pos[i]:
                    ok = False
                    break
                for a in range(3):
                    pts[k, j, a] = chain[i + 1, a]
                j += 1
        if ok and j == n_int:
            valid[k] = True
    return valid, pts


# --------------------------------------------------------------------------


def _face_tables(scene: Scene, freq: float, table: Mapping[MaterialClass, MaterialRecord]):
    etas = {}
    for m in set(scene.face_material):
        etas[m] = eval_permittivity(table[m], freq).eta
    eta = np.array([etas[m] for m in scene.face_material], dtype=complex)
    thick = np.array([table[m].default_thickness for m in scene.face_material], dtype=float)
    return eta, thick


def check_scene(scene: Scene) -> None:
    bad = {}
    for mesh in scene.meshes:
        rep = validate_manifold(mesh)
        if not mesh_ok_for_tracing(mesh, rep):
            bad[mesh.object_id] = rep
    if bad:
        raise SceneRefused(bad)


def winding_number(mesh, p) -> float:
    """Generalised winding number of a closed mesh around ``p`` (about 1 inside, 0 outside)."""
    tri = mesh.vertices[mesh.faces] - np.asarray(p, dtype=float)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", b, c) * la \
        + np.einsum("ij,ij->i", c, a) * lb
    return float(np.sum(2.0 * np.arctan2(num, den)) / (4.0 * math.pi))


def enclosures(scene: Scene, points) -> np.ndarray:
    """Closed objects containing any of ``points``; their interior is air (rooms)."""
    out = np.zeros(len(scene.meshes), dtype=bool)
    for i, m in enumerate(scene.meshes):
        if not m.sheet:
            out[i] = any(abs(winding_number(m, p)) > 0.5 for p in points)
    return out


def sbr_candidates(scene: Scene, config: SimConfig, eta: np.ndarray, thick: np.ndarray) -> np.ndarray:
    """Distinct interaction sequences seen by the launched rays.

    Rows are padded with -1; each entry encodes ``2 * face + kind``. Every
    prefix of a ray's event history is a candidate; the empty sequence (direct
    path) is always included. A ray that penetrates into a closed solid may
    only penetrate out again: there are no reflections inside solids. Sheets
    are crossed in a single penetration event, and closed objects enclosing
    the TX or RX are rooms whose walls behave the same way.
    """
    L = config.max_reflections + config.max_penetrations
    width = max(L, 1)
    found = [np.full((1, width), -1, dtype=np.int64)]
    if L == 0 or scene.n_faces == 0:
        return found[0]
    allow_r = "reflection" in config.mechanisms and config.max_reflections > 0
    allow_p = "penetration" in config.mechanisms and config.max_penetrations > 0
    if allow_p:
        t_perp, _ = slab_transmission(eta, np.zeros(len(eta)), thick, config.freq)
        penetrable = np.abs(t_perp) ** 2 > OPAQUE_POWER
    else:
        penetrable = np.zeros(scene.n_faces, dtype=bool)

    tx = np.asarray(config.tx_pos, dtype=float)
    dirs_all = fibonacci_directions(config.n_rays)
    normals = np.asarray(scene.normals)
    face_obj = scene.face_object
    closed = np.array([not m.sheet for m in scene.meshes], dtype=bool)
    closed &= ~enclosures(scene, (config.tx_pos, config.rx_pos))
    for lo in range(0, config.n_rays, config.batch_size):
        d = dirs_all[lo:lo + config.batch_size]
        o = np.broadcast_to(tx, d.shape).copy()
        seq = np.full((len(d), L), -1, dtype=np.int64)
        nref = np.zeros(len(d), dtype=np.int64)
        npen = np.zeros(len(d), dtype=np.int64)
        inside = np.full(len(d), -1, dtype=np.int64)  # closed object the ray is in, -1 for air
        depth = 0
        tmin = SURFACE_EPS
        while len(o) and depth < L:
            faces, ts = scene.intersect_many(o, d, tmin)
            hit = faces >= 0
            o, d, seq, nref, npen, inside = o[hit], d[hit], seq[hit], nref[hit], npen[hit], inside[hit]
            faces, ts = faces[hit], ts[hit]
            if not len(o):
                break
            p = o + ts[:, None] * d
            kids_o, kids_d, kids_seq, kids_r, kids_p, kids_in = [], [], [], [], [], []
            if allow_r:
                mr = (nref < config.max_reflections) & (inside < 0)
                s = seq[mr].copy()
                s[:, depth] = 2 * faces[mr] + REFLECT
                kids_o.append(p[mr])
                kids_d.append(reflect_dir(d[mr], normals[faces[mr]]))
                kids_seq.append(s)
                kids_r.append(nref[mr] + 1)
                kids_p.append(npen[mr])
                kids_in.append(inside[mr])
            if allow_p:
                mp = (npen < config.max_penetrations) & penetrable[faces]
                s = seq[mp].copy()
                s[:, depth] = 2 * faces[mp] + PENETRATE
                kids_o.append(p[mp])
                kids_d.append(d[mp])
                kids_seq.append(s)
                kids_r.append(nref[mp])
                kids_p.append(npen[mp] + 1)
                obj = face_obj[faces[mp]]
                cur = inside[mp]
                # entering a closed object from air, or leaving the one we are in
                kids_in.append(np.where(closed[obj] & (cur < 0), obj, np.where(cur == obj, -1, cur)))
            if not kids_o:
                break
            o = np.concatenate(kids_o)
            d = np.concatenate(kids_d)
            seq = np.concatenate(kids_seq)
            nref = np.concatenate(kids_r)
            npen = np.concatenate(kids_p)
            inside = np.concatenate(kids_in)
            found.append(np.unique(seq, axis=0))
            depth += 1
    return np.unique(np.concatenate(found), axis=0)


def _path_amplitude(chain, faces, kinds, scene, eta, thick, freq):
    """Complex received amplitude (isotropic antennas, vertical polarisation)."""
    seg = np.diff(chain, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    k = seg / lengths[:, None]
    total = float(lengths.sum())
    field_vec = vertical_polarization(k[0]).astype(complex)
    angles = []
    for j, (f, kind) in enumerate(zip(faces, kinds)):
        k_in, k_out = k[j], k[j + 1]
        n = scene.normals[f]
        if np.dot(n, k_in) > 0:
            n = -n
        cos_t = float(np.clip(-np.dot(k_in, n), 0.0, 1.0))
        theta = math.acos(cos_t)
        angles.append(theta)
        s = np.cross(k_in, n)
        ns = np.linalg.norm(s)
        s = s / ns if ns > 1e-12 else _perp(k_in)
        p_in = np.cross(s, k_in)
        if kind == REFLECT:
            r_s, r_p = fresnel_arrays(eta[f], theta)
            p_out = np.cross(s, k_out)
            field_vec = complex(r_s) * np.dot(field_vec, s) * s + complex(r_p) * np.dot(field_vec, p_in) * p_out
        else:
            t_s, t_p = slab_transmission(eta[f], theta, thick[f], freq)
            field_vec = complex(t_s) * np.dot(field_vec, s) * s + complex(t_p) * np.dot(field_vec, p_in) * p_in
    wavelength = C0 / freq
    delay = total / C0
    pol = np.dot(field_vec, vertical_polarization(k[-1]))
    amp = wavelength / (4.0 * math.pi * total) * pol * np.exp(-2j * math.pi * freq * delay)
    return complex(amp), delay, total, angles


def trace(scene: Scene, config: SimConfig, materials: Mapping[MaterialClass, MaterialRecord] | None = None) -> TraceResult:
    check_scene(scene)
    tx = np.asarray(config.tx_pos, dtype=float)
    rx = np.asarray(config.rx_pos, dtype=float)
    if np.allclose(tx, rx, atol=1e-9, rtol=0):
        raise ValueError("tx_pos and rx_pos coincide")
    for name, p in (("tx_pos", tx), ("rx_pos", rx)):
        if not scene.contains(p):
            raise ValueError(f"{name} {p.tolist()} lies outside the scene bounds")
    table = materials or default_table()
    eta, thick = _face_tables(scene, config.freq, table)

    cand = sbr_candidates(scene, config, eta, thick)
    stats = {"rays_launched": config.n_rays, "candidates": int(len(cand))}
    log.info("SBR: %d rays launched, %d candidate sequences", config.n_rays, len(cand))

    valid, pts = _validate(cand, tx, rx, np.asarray(scene.normals), scene.offsets, scene.v0, scene.e1, scene.e2,
                           *scene.accel.arrays(), SURFACE_EPS)
    stats["validated"] = int(valid.sum())

    paths = []
    seen = set()
    p_tx_mw = 10.0 ** (config.tx_power / 10.0)
    for k in np.flatnonzero(valid):
        row = cand[k]
        row = row[row >= 0]
        faces = (row // 2).tolist()
        kinds = (row % 2).tolist()
        chain = np.vstack([tx, pts[k, : len(row)], rx])
        # the same geometric path can validate through two triangles sharing an edge
        key = (tuple(kinds), tuple(np.round(chain[1:-1], 7).ravel().tolist()))
        if key in seen:
            continue
        seen.add(key)
        amp, delay, total, angles = _path_amplitude(chain, faces, kinds, scene, eta, thick, config.freq)
        power = abs(amp) ** 2 * p_tx_mw
        if power <= 0.0:
            continue
        power_dbm = 10.0 * math.log10(power)
        if power_dbm < config.min_path_power:
            continue
        inter = tuple(
            Interaction("reflect" if kd == REFLECT else "penetrate", int(f), tuple(map(float, pts[k, j])), float(a))
            for j, (f, kd, a) in enumerate(zip(faces, kinds, angles))
        )
        paths.append(PropPath(inter, delay, amp, power_dbm, total))
    paths.sort(key=lambda p: (p.delay, p.sequence))
    stats["paths"] = len(paths)
    log.info("image validation: %d candidates valid, %d paths kept", stats["validated"], len(paths))
    return TraceResult(paths, stats)


def synthesize_pdp(paths: Iterable[PropPath], config: SimConfig, delay_bin: float | None = None) -> Pdp:
    """Non-coherent PDP: one entry per path with power ``|a|^2 * P_tx``.

    With ``delay_bin`` set (or ``config.delay_bin``) powers of paths falling in
    the same delay bin are added, still without any phasor summation.
    """
    paths = list(paths)
    bin_w = delay_bin if delay_bin is not None else config.delay_bin
    p_tx_mw = 10.0 ** (config.tx_power / 10.0)
    delays = np.array([p.delay for p in paths], dtype=float)
    powers = np.array([abs(p.amplitude) ** 2 * p_tx_mw for p in paths], dtype=float)
    order = np.argsort(delays, kind="stable")
    delays, powers = delays[order], powers[order]
    if bin_w and len(delays):
        idx = np.floor(delays / bin_w).astype(np.int64)
        keys, inv = np.unique(idx, return_inverse=True)
        powers = np.bincount(inv, weights=powers)
        delays = keys * bin_w
    return Pdp(delays, powers, {"config": config.to_dict()})
