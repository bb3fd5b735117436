"""Pure geometric math: vectors, rays, boxes, intersections, camera rays.

Everything here is stateless and operates in 64-bit floats so results are
bit-reproducible wherever they are computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

Vec3 = Tuple[float, float, float]

INF = float("inf")


def add(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def sub(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def scale(v: Vec3, s: float) -> Vec3:
    return (v[0] * s, v[1] * s, v[2] * s)


def mul(a: Vec3, b: Vec3) -> Vec3:
    """Componentwise product."""
    return (a[0] * b[0], a[1] * b[1], a[2] * b[2])


def dot(a: Vec3, b: Vec3) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def cross(a: Vec3, b: Vec3) -> Vec3:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def norm(v: Vec3) -> float:
    return math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


def normalize(v: Vec3) -> Vec3:
    n = norm(v)
    if n == 0.0 or not math.isfinite(n):
        raise ValueError(f"cannot normalize degenerate vector {v!r}")
    return (v[0] / n, v[1] / n, v[2] / n)


@dataclass(frozen=True)
class Ray:
    """Half-open ray segment; direction is expected to be normalized."""

    origin: Vec3
    direction: Vec3
    tmin: float = 0.0
    tmax: float = INF

    def at(self, t: float) -> Vec3:
        return add(self.origin, scale(self.direction, t))


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box. The empty box is lo=+inf, hi=-inf on every axis."""

    lo: Vec3
    hi: Vec3

    @staticmethod
    def empty() -> "Aabb":
        return Aabb((INF, INF, INF), (-INF, -INF, -INF))

    def is_empty(self) -> bool:
        return self.lo[0] > self.hi[0] or self.lo[1] > self.hi[1] or self.lo[2] > self.hi[2]

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(
            (min(self.lo[0], other.lo[0]), min(self.lo[1], other.lo[1]), min(self.lo[2], other.lo[2])),
            (max(self.hi[0], other.hi[0]), max(self.hi[1], other.hi[1]), max(self.hi[2], other.hi[2])),
        )

    def include_point(self, p: Vec3) -> "Aabb":
        return Aabb(
            (min(self.lo[0], p[0]), min(self.lo[1], p[1]), min(self.lo[2], p[2])),
            (max(self.hi[0], p[0]), max(self.hi[1], p[1]), max(self.hi[2], p[2])),
        )

    def contains(self, other: "Aabb") -> bool:
        if other.is_empty():
            return True
        return all(self.lo[i] <= other.lo[i] and self.hi[i] >= other.hi[i] for i in range(3))

    def diagonal(self) -> float:
        if self.is_empty():
            return 0.0
        return norm(sub(self.hi, self.lo))

    def longest_axis(self) -> int:
        if self.is_empty():
            return 0
        ext = sub(self.hi, self.lo)
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        return axis


@dataclass(frozen=True)
class Triangle:
    """Triangle with a globally unique, partition-independent id."""

    v0: Vec3
    v1: Vec3
    v2: Vec3
    global_id: int

    def centroid(self) -> Vec3:
        return (
            (self.v0[0] + self.v1[0] + self.v2[0]) / 3.0,
            (self.v0[1] + self.v1[1] + self.v2[1]) / 3.0,
            (self.v0[2] + self.v1[2] + self.v2[2]) / 3.0,
        )

    def bounds(self) -> Aabb:
        return Aabb.empty().include_point(self.v0).include_point(self.v1).include_point(self.v2)

    def geometric_normal(self) -> Vec3:
        """Unit normal of the supporting plane; (0,0,0) for degenerate triangles."""
        n = cross(sub(self.v1, self.v0), sub(self.v2, self.v0))
        ln = norm(n)
        if ln == 0.0:
            return (0.0, 0.0, 0.0)
        return (n[0] / ln, n[1] / ln, n[2] / ln)


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera; view_dir normalized, fov_y in degrees, aspect = width/height."""

    position: Vec3
    view_dir: Vec3
    up: Vec3
    fov_y: float
    aspect: float

    def __post_init__(self) -> None:
        if not (0.0 < self.fov_y < 180.0):
            raise ValueError(f"fov_y must be in (0, 180), got {self.fov_y}")
        if norm(cross(self.view_dir, self.up)) == 0.0:
            raise ValueError("view_dir and up must not be parallel")

    def basis(self) -> Tuple[Vec3, Vec3, Vec3]:
        """Orthonormal (forward, right, up) frame of the camera."""
        forward = normalize(self.view_dir)
        right = normalize(cross(forward, self.up))
        cam_up = cross(right, forward)
        return forward, right, cam_up


def ray_aabb_intersect(ray: Ray, box: Aabb) -> Optional[Tuple[float, float]]:
    """Slab interval (t0, t1) of the ray against the box, or None.

    A zero direction component makes the ray parallel to that slab: it
    contributes (-inf, +inf) when the origin lies inside, otherwise the
    result is a miss. The caller clips the interval against [tmin, tmax].
    """
    if box.is_empty():
        return None
    t0 = -INF
    t1 = INF
    for i in range(3):
        d = ray.direction[i]
        o = ray.origin[i]
        if d == 0.0:
            if o < box.lo[i] or o > box.hi[i]:
                return None
            continue
        inv = 1.0 / d
        ta = (box.lo[i] - o) * inv
        tb = (box.hi[i] - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t1 < t0:
            return None
    return (t0, t1)


def ray_aabb_hit(ray: Ray, box: Aabb) -> bool:
    """True when the slab interval overlaps the ray's [tmin, tmax]."""
    interval = ray_aabb_intersect(ray, box)
    if interval is None:
        return False
    t0, t1 = interval
    return t1 >= max(t0, ray.tmin) and t0 <= ray.tmax


def ray_triangle_intersect(ray: Ray, tri: Triangle) -> Optional[Tuple[float, float, float]]:
    """Moller-Trumbore test, double-sided. Returns (t, u, v) or None.

    Degenerate triangles never hit. Hits are reported only within
    [ray.tmin, ray.tmax].
    """
    e1 = sub(tri.v1, tri.v0)
    e2 = sub(tri.v2, tri.v0)
    pvec = cross(ray.direction, e2)
    det = dot(e1, pvec)
    if det == 0.0:
        return None
    inv_det = 1.0 / det
    tvec = sub(ray.origin, tri.v0)
    u = dot(tvec, pvec) * inv_det
    if u < 0.0 or u > 1.0:
        return None
    qvec = cross(tvec, e1)
    v = dot(ray.direction, qvec) * inv_det
    if v < 0.0 or u + v > 1.0:
        return None
    t = dot(e2, qvec) * inv_det
    # the chained comparison also rejects NaN; infinite t is never a hit
    if not (ray.tmin <= t <= ray.tmax and math.isfinite(t)):
        return None
    return (t, u, v)


def camera_primary_ray(cam: CameraSpec, px: int, py: int, width: int, height: int) -> Ray:
    """Ray through the center of pixel (px, py) on a width x height film.

    Image y grows downward while camera-space y grows upward. The film plane
    sits at distance 1 in front of the camera; its half-height is
    tan(fov_y/2) and its half-width is that times the camera aspect.
    """
    if not (0 <= px < width and 0 <= py < height):
        raise ValueError(f"pixel ({px}, {py}) outside {width}x{height} image")
    forward, right, cam_up = cam.basis()
    half_h = math.tan(math.radians(cam.fov_y) * 0.5)
    half_w = half_h * cam.aspect
    sx = ((px + 0.5) / width * 2.0 - 1.0) * half_w
    sy = (1.0 - (py + 0.5) / height * 2.0) * half_h
    d = (
        forward[0] + sx * right[0] + sy * cam_up[0],
        forward[1] + sx * right[1] + sy * cam_up[1],
        forward[2] + sx * right[2] + sy * cam_up[2],
    )
    return Ray(cam.position, normalize(d), 0.0, INF)


def scene_bounds(triangles) -> Aabb:
    """Union box over all triangle vertices."""
    box = Aabb.empty()
    for tri in triangles:
        box = box.union(tri.bounds())
    return box
