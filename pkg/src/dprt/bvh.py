"""Bounding volume hierarchy over a rank's local triangles.

Build is a recursive median split on the longest axis of the centroid
bounds (ties broken by global id), leaves hold up to four triangles.
Traversal is exact: it reports the same (t, global_id) as a linear scan
over every triangle, which `linear_nearest` / `linear_any` provide as the
reference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .geom import Aabb, Ray, Triangle

LEAF_SIZE = 4
MAX_STACK = 64

MISS_T = float("inf")
MISS_ID = np.iinfo(np.int64).max


@dataclass(frozen=True, order=True)
class HitKey:
    """Nearest-hit key, ordered lexicographically by (t, global_id)."""

    t: float
    global_id: int


MISS = HitKey(MISS_T, MISS_ID)


@dataclass(frozen=True)
class BvhNode:
    bounds: Aabb
    left: int
    right: int
    first: int
    count: int

    @property
    def is_leaf(self) -> bool:
        return self.count > 0


@dataclass
class Accel:
    """Immutable BVH plus the triangle arrays reordered to match its leaves."""

    node_lo: np.ndarray  # (n, 3) float64
    node_hi: np.ndarray  # (n, 3) float64
    node_left: np.ndarray  # (n,) int64, -1 for leaves
    node_right: np.ndarray  # (n,) int64, -1 for leaves
    node_first: np.ndarray  # (n,) int64, leaf range start
    node_count: np.ndarray  # (n,) int64, 0 for inner nodes
    root: int
    prim_order: np.ndarray  # (m,) int64, slot -> original local index
    tri_v: np.ndarray  # (m, 9) float64, reordered v0 v1 v2
    tri_id: np.ndarray  # (m,) int64, reordered global ids
    prims: Sequence[Triangle] = field(repr=False, default=())

    @property
    def num_nodes(self) -> int:
        return len(self.node_left)

    @property
    def num_prims(self) -> int:
        return len(self.tri_id)

    def node(self, i: int) -> BvhNode:
        return BvhNode(
            bounds=Aabb(tuple(self.node_lo[i]), tuple(self.node_hi[i])),
            left=int(self.node_left[i]),
            right=int(self.node_right[i]),
            first=int(self.node_first[i]),
            count=int(self.node_count[i]),
        )


def _empty_accel(prims: Sequence[Triangle]) -> Accel:
    z3 = np.zeros((0, 3), np.float64)
    zi = np.zeros(0, np.int64)
    return Accel(z3, z3.copy(), zi, zi.copy(), zi.copy(), zi.copy(), -1,
                 zi.copy(), np.zeros((0, 9), np.float64), zi.copy(), prims)


def triangles_to_arrays(prims: Sequence[Triangle]) -> Tuple[np.ndarray, np.ndarray]:
    """Flatten triangles to a (m, 9) vertex array and an (m,) id array."""
    m = len(prims)
    tri_v = np.empty((m, 9), np.float64)
    tri_id = np.empty(m, np.int64)
    for i, t in enumerate(prims):
        tri_v[i, 0:3] = t.v0
        tri_v[i, 3:6] = t.v1
        tri_v[i, 6:9] = t.v2
        tri_id[i] = t.global_id
    return tri_v, tri_id


def build_bvh(prims: Sequence[Triangle]) -> Accel:
    """Median-split BVH; deterministic for a given primitive set."""
    m = len(prims)
    if m == 0:
        return _empty_accel(prims)
    tri_v, tri_id = triangles_to_arrays(prims)
    vmin = np.minimum(np.minimum(tri_v[:, 0:3], tri_v[:, 3:6]), tri_v[:, 6:9])
    vmax = np.maximum(np.maximum(tri_v[:, 0:3], tri_v[:, 3:6]), tri_v[:, 6:9])
    cent = (tri_v[:, 0:3] + tri_v[:, 3:6] + tri_v[:, 6:9]) / 3.0

    order = np.arange(m, dtype=np.int64)
    lo_list: List[np.ndarray] = []
    hi_list: List[np.ndarray] = []
    left_list: List[int] = []
    right_list: List[int] = []
    first_list: List[int] = []
    count_list: List[int] = []

    def build(a: int, b: int) -> int:
        idx = order[a:b]
        ni = len(lo_list)
        lo_list.append(vmin[idx].min(axis=0))
        hi_list.append(vmax[idx].max(axis=0))
        left_list.append(-1)
        right_list.append(-1)
        first_list.append(a)
        count_list.append(b - a)
        if b - a > LEAF_SIZE:
            c = cent[idx]
            ext = c.max(axis=0) - c.min(axis=0)
            axis = int(np.argmax(ext))  # argmax picks the lowest axis on ties
            perm = np.lexsort((tri_id[idx], c[:, axis]))
            order[a:b] = idx[perm]
            mid = a + (b - a) // 2
            count_list[ni] = 0
            left_list[ni] = build(a, mid)
            right_list[ni] = build(mid, b)
        return ni

    build(0, m)
    return Accel(
        node_lo=np.ascontiguousarray(np.stack(lo_list)),
        node_hi=np.ascontiguousarray(np.stack(hi_list)),
        node_left=np.asarray(left_list, np.int64),
        node_right=np.asarray(right_list, np.int64),
        node_first=np.asarray(first_list, np.int64),
        node_count=np.asarray(count_list, np.int64),
        root=0,
        prim_order=order,
        tri_v=np.ascontiguousarray(tri_v[order]),
        tri_id=np.ascontiguousarray(tri_id[order]),
        prims=prims,
    )


@njit(cache=True, nogil=True)
def _tri_t(tri_v, k, ox, oy, oz, dx, dy, dz):
    """Unbounded Moller-Trumbore t for triangle slot k, inf on miss."""
    e1x = tri_v[k, 3] - tri_v[k, 0]
    e1y = tri_v[k, 4] - tri_v[k, 1]
    e1z = tri_v[k, 5] - tri_v[k, 2]
    e2x = tri_v[k, 6] - tri_v[k, 0]
    e2y = tri_v[k, 7] - tri_v[k, 1]
    e2z = tri_v[k, 8] - tri_v[k, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf
    inv_det = 1.0 / det
    tx = ox - tri_v[k, 0]
    ty = oy - tri_v[k, 1]
    tz = oz - tri_v[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv_det
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv_det
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv_det


@njit(cache=True, nogil=True)
def _node_interval(node_lo, node_hi, ni, ox, oy, oz, dx, dy, dz):
    """Slab interval of a node box; returns (1.0, -1.0) on a definite miss."""
    t0 = -np.inf
    t1 = np.inf
    for axis in range(3):
        if axis == 0:
            d, o = dx, ox
        elif axis == 1:
            d, o = dy, oy
        else:
            d, o = dz, oz
        lo = node_lo[ni, axis]
        hi = node_hi[ni, axis]
        if d == 0.0:
            if o < lo or o > hi:
                return 1.0, -1.0
            continue
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t1 < t0:
            return 1.0, -1.0
    return t0, t1


@njit(cache=True, nogil=True)
def _nearest_one(node_lo, node_hi, node_left, node_right, node_first, node_count,
                 root, tri_v, tri_id, ox, oy, oz, dx, dy, dz, tmin, tmax,
                 best_t, best_id):
    if root < 0:
        return best_t, best_id
    stack = np.empty(MAX_STACK, np.int64)
    stack[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        ni = stack[sp]
        t0, t1 = _node_interval(node_lo, node_hi, ni, ox, oy, oz, dx, dy, dz)
        limit = tmax if tmax < best_t else best_t
        if t1 < t0 or t1 < tmin or t0 > limit:
            continue
        if node_count[ni] > 0:
            first = node_first[ni]
            for k in range(first, first + node_count[ni]):
                t = _tri_t(tri_v, k, ox, oy, oz, dx, dy, dz)
                # chained compare rejects NaN; t must be finite to be a hit
                if not (tmin <= t <= tmax and t < np.inf):
                    continue
                if t < best_t or (t == best_t and tri_id[k] < best_id):
                    best_t = t
                    best_id = tri_id[k]
        else:
            stack[sp] = node_right[ni]
            stack[sp + 1] = node_left[ni]
            sp += 2
    return best_t, best_id


@njit(cache=True, nogil=True)
def _any_one(node_lo, node_hi, node_left, node_right, node_first, node_count,
             root, tri_v, tri_id, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """True iff any triangle intersects strictly inside (tmin, tmax)."""
    if root < 0:
        return False
    stack = np.empty(MAX_STACK, np.int64)
    stack[0] = root
    sp = 1
    while sp > 0:
        sp -= 1
        ni = stack[sp]
        t0, t1 = _node_interval(node_lo, node_hi, ni, ox, oy, oz, dx, dy, dz)
        if t1 < t0 or t1 < tmin or t0 > tmax:
            continue
        if node_count[ni] > 0:
            first = node_first[ni]
            for k in range(first, first + node_count[ni]):
                t = _tri_t(tri_v, k, ox, oy, oz, dx, dy, dz)
                if tmin < t < tmax:
                    return True
        else:
            stack[sp] = node_right[ni]
            stack[sp + 1] = node_left[ni]
            sp += 2
    return False


@njit(cache=True, nogil=True)
def trace_nearest_batch(node_lo, node_hi, node_left, node_right, node_first,
                        node_count, root, tri_v, tri_id,
                        org, dirn, tmin, tmax, best_t, best_id):
    """Min-reduce each ray's (best_t, best_id) against the local BVH, in place."""
    for i in range(org.shape[0]):
        bt, bid = _nearest_one(node_lo, node_hi, node_left, node_right,
                               node_first, node_count, root, tri_v, tri_id,
                               org[i, 0], org[i, 1], org[i, 2],
                               dirn[i, 0], dirn[i, 1], dirn[i, 2],
                               tmin[i], tmax[i], best_t[i], best_id[i])
        best_t[i] = bt
        best_id[i] = bid


@njit(cache=True, nogil=True)
def trace_any_batch(node_lo, node_hi, node_left, node_right, node_first,
                    node_count, root, tri_v, tri_id,
                    org, dirn, tmin, tmax, occluded):
    """OR-reduce each ray's occlusion flag against the local BVH, in place."""
    for i in range(org.shape[0]):
        if occluded[i]:
            continue
        if _any_one(node_lo, node_hi, node_left, node_right, node_first,
                    node_count, root, tri_v, tri_id,
                    org[i, 0], org[i, 1], org[i, 2],
                    dirn[i, 0], dirn[i, 1], dirn[i, 2], tmin[i], tmax[i]):
            occluded[i] = 1


@njit(cache=True, nogil=True)
def linear_nearest_one(tri_v, tri_id, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Exhaustive nearest scan over every triangle; the traversal oracle."""
    best_t = np.inf
    best_id = MISS_ID
    for k in range(tri_v.shape[0]):
        t = _tri_t(tri_v, k, ox, oy, oz, dx, dy, dz)
        if not (tmin <= t <= tmax and t < np.inf):
            continue
        if t < best_t or (t == best_t and tri_id[k] < best_id):
            best_t = t
            best_id = tri_id[k]
    return best_t, best_id


@njit(cache=True, nogil=True)
def linear_any_one(tri_v, tri_id, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Exhaustive any-hit scan, strict (tmin, tmax) interval."""
    for k in range(tri_v.shape[0]):
        t = _tri_t(tri_v, k, ox, oy, oz, dx, dy, dz)
        if tmin < t < tmax:
            return True
    return False


def intersect_nearest(accel: Accel, ray: Ray) -> Optional[HitKey]:
    """Hit with the lexicographically smallest (t, global_id), or None."""
    t, gid = _nearest_one(
        accel.node_lo, accel.node_hi, accel.node_left, accel.node_right,
        accel.node_first, accel.node_count, accel.root, accel.tri_v, accel.tri_id,
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.tmin, ray.tmax, MISS_T, MISS_ID)
    if gid == MISS_ID:
        return None
    return HitKey(float(t), int(gid))


def intersect_any(accel: Accel, ray: Ray) -> bool:
    """True iff some triangle intersects strictly between tmin and tmax."""
    return bool(_any_one(
        accel.node_lo, accel.node_hi, accel.node_left, accel.node_right,
        accel.node_first, accel.node_count, accel.root, accel.tri_v, accel.tri_id,
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.tmin, ray.tmax))


def linear_nearest(tri_v: np.ndarray, tri_id: np.ndarray, ray: Ray) -> Optional[HitKey]:
    t, gid = linear_nearest_one(
        tri_v, tri_id,
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.tmin, ray.tmax)
    if gid == MISS_ID:
        return None
    return HitKey(float(t), int(gid))


def linear_any(tri_v: np.ndarray, tri_id: np.ndarray, ray: Ray) -> bool:
    return bool(linear_any_one(
        tri_v, tri_id,
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.tmin, ray.tmax))
