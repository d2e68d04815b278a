"""Bounding volume hierarchy over triangles and the numba ray kernels."""

from __future__ import annotations

import numba
import numpy as np

BARY_EPS = 1e-7
LEAF_SIZE = 4
_STACK = 128


class BVH:
    """Flattened binary BVH built by deterministic median splits.

    Triangles are referenced through ``order``; node ``i`` covers
    ``order[start[i]:start[i] + count[i]]`` when it is a leaf (``left[i] < 0``).
    """

    def __init__(self, v0: np.ndarray, v1: np.ndarray, v2: np.ndarray):
        n = len(v0)
        self.n_faces = n
        lo_all = np.minimum(np.minimum(v0, v1), v2)
        hi_all = np.maximum(np.maximum(v0, v1), v2)
        centroids = (v0 + v1 + v2) / 3.0

        bmin, bmax, left, right, start, count = [], [], [], [], [], []
        order = np.arange(n, dtype=np.int64)
        if n == 0:
            self.bmin = np.zeros((0, 3))
            self.bmax = np.zeros((0, 3))
            self.left = self.right = self.start = self.count = np.zeros(0, dtype=np.int64)
            self.order = order
            return

        # (node index, lo, hi) work list; children are appended after parents
        def new_node(lo, hi):
            idx = order[lo:hi]
            bmin.append(lo_all[idx].min(axis=0))
            bmax.append(hi_all[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(lo)
            count.append(hi - lo)
            return len(bmin) - 1

        stack = [(new_node(0, n), 0, n)]
        while stack:
            node, lo, hi = stack.pop()
            if hi - lo <= LEAF_SIZE:
                continue
            idx = order[lo:hi]
            c = centroids[idx]
            extent = c.max(axis=0) - c.min(axis=0)
            axis = int(np.argmax(extent))
            if extent[axis] <= 0.0:
                continue
            perm = np.argsort(c[:, axis], kind="stable")
            order[lo:hi] = idx[perm]
            mid = (lo + hi) // 2
            ln = new_node(lo, mid)
            rn = new_node(mid, hi)
            left[node] = ln
            right[node] = rn
            stack.append((rn, mid, hi))
            stack.append((ln, lo, mid))

        self.bmin = np.array(bmin, dtype=np.float64)
        self.bmax = np.array(bmax, dtype=np.float64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = order

    def arrays(self):
        return self.bmin, self.bmax, self.left, self.right, self.start, self.count, self.order


@numba.njit(cache=True)
def ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, f):
    """Moller-Trumbore distance to triangle ``f`` or ``inf``."""
    e1x, e1y, e1z = e1[f, 0], e1[f, 1], e1[f, 2]
    e2x, e2y, e2z = e2[f, 0], e2[f, 1], e2[f, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    scale = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z) * np.sqrt(e2x * e2x + e2y * e2y + e2z * e2z)
    if abs(det) <= 1e-12 * scale:
        return np.inf
    inv = 1.0 / det
    sx = ox - v0[f, 0]
    sy = oy - v0[f, 1]
    sz = oz - v0[f, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@numba.njit(cache=True)
def _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, node, t_min, t_max):
    t0 = t_min
    t1 = t_max
    # per-axis slab test; NaN from 0*inf is rejected by the comparisons below
    a = (bmin[node, 0] - ox) * ix
    b = (bmax[node, 0] - ox) * ix
    if a > b:
        a, b = b, a
    if a > t0:
        t0 = a
    if b < t1:
        t1 = b
    a = (bmin[node, 1] - oy) * iy
    b = (bmax[node, 1] - oy) * iy
    if a > b:
        a, b = b, a
    if a > t0:
        t0 = a
    if b < t1:
        t1 = b
    a = (bmin[node, 2] - oz) * iz
    b = (bmax[node, 2] - oz) * iz
    if a > b:
        a, b = b, a
    if a > t0:
        t0 = a
    if b < t1:
        t1 = b
    if t0 <= t1 * (1.0 + 1e-12) + 1e-12:
        return t0
    return np.inf


@numba.njit(cache=True)
def _inv(x):
    if x == 0.0:
        return 1e300
    return 1.0 / x


@numba.njit(cache=True)
def closest_hit(o, d, t_min, t_max, v0, e1, e2, bmin, bmax, left, right, start, count, order):
    """Nearest face hit with distance in ``(t_min, t_max]``; ties go to the lower index."""
    best_f = -1
    best_t = np.inf
    if bmin.shape[0] == 0:
        return best_f, best_t
    ox, oy, oz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    ix, iy, iz = _inv(dx), _inv(dy), _inv(dz)
    pad = 1e-9 * (1.0 + abs(t_max) if np.isfinite(t_max) else 1.0)
    stack = np.empty(_STACK, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        limit = best_t if best_t < t_max else t_max
        if _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, node, -pad, limit + pad) == np.inf:
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                t = ray_triangle(ox, oy, oz, dx, dy, dz, v0, e1, e2, f)
                if t > t_min and t <= t_max:
                    if t < best_t or (t == best_t and f < best_f):
                        best_t = t
                        best_f = f
        else:
            stack[sp] = right[node]
            sp += 1
            stack[sp] = left[node]
            sp += 1
    return best_f, best_t


@numba.njit(cache=True)
def closest_hit_brute(o, d, t_min, t_max, v0, e1, e2):
    best_f = -1
    best_t = np.inf
    for f in range(v0.shape[0]):
        t = ray_triangle(o[0], o[1], o[2], d[0], d[1], d[2], v0, e1, e2, f)
        if t > t_min and t <= t_max:
            if t < best_t or (t == best_t and f < best_f):
                best_t = t
                best_f = f
    return best_f, best_t


@numba.njit(cache=True)
def closest_hits(origins, dirs, t_min, t_max, v0, e1, e2, bmin, bmax, left, right, start, count, order):
    n = origins.shape[0]
    faces = np.empty(n, dtype=np.int64)
    ts = np.empty(n, dtype=np.float64)
    for i in range(n):
        f, t = closest_hit(origins[i], dirs[i], t_min[i], t_max, v0, e1, e2, bmin, bmax, left, right, start, count, order)
        faces[i] = f
        ts[i] = t
    return faces, ts


@numba.njit(cache=True)
def closest_hits_brute(origins, dirs, t_min, t_max, v0, e1, e2):
    n = origins.shape[0]
    faces = np.empty(n, dtype=np.int64)
    ts = np.empty(n, dtype=np.float64)
    for i in range(n):
        f, t = closest_hit_brute(origins[i], dirs[i], t_min[i], t_max, v0, e1, e2)
        faces[i] = f
        ts[i] = t
    return faces, ts
