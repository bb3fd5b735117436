"""Shared fixtures and the scalar reference renderer used as an oracle.

The reference path deliberately avoids the engine's BVH, batching, and
vectorized shading: plain per-pixel loops over every triangle with the
scalar geometry routines, accumulating in the same wave order the engine
uses (ambient/background per bounce, then per-light direct terms).
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from dprt.geom import (CameraSpec, Ray, Triangle, add, camera_primary_ray, dot, mul,
                       normalize, norm, ray_triangle_intersect, scale, scene_bounds, sub)
from dprt.scene import Light, Material, SceneDesc

SHADOW_EPS_SCALE = 1e-4


def quad(gid0: int, corners) -> List[Triangle]:
    """Two triangles over four corner points (a, b, c, d)."""
    a, b, c, d = corners
    return [Triangle(a, b, c, gid0), Triangle(a, c, d, gid0 + 1)]


FIG2_ALBEDO = (0.8, 0.3, 0.2)


def fig2_scene() -> SceneDesc:
    """Receiver floor (rank 0) and an overhead occluder (rank 1).

    An oblique camera sees the whole floor; the directional light shines
    straight down, so the occluder casts a shadow onto floor pixels the
    camera has a clear view of. Quads are asymmetric so no test ray runs
    along a shared diagonal.
    """
    floor = quad(0, ((-2, 0, -2.1), (2.2, 0, -2.1), (2.2, 0, 2.4), (-2, 0, 2.4)))
    blocker = quad(2, ((-0.55, 1, -1.05), (0.45, 1, -1.05), (0.45, 1, -0.55), (-0.55, 1, -0.55)))
    return SceneDesc(
        triangles=floor + blocker,
        material_of_prim=[0, 0, 0, 0],
        materials=[Material(albedo=FIG2_ALBEDO)],
        lights=[Light("directional", intensity=(1.0, 1.0, 1.0), direction=(0.0, -1.0, 0.0))],
        background=(0.0, 0.0, 0.0),
        rank_of_prim=[0, 0, 1, 1],
    )


def fig2_floor_only() -> SceneDesc:
    """The fixture as rank 0 sees it alone: receiver without the occluder."""
    scene = fig2_scene()
    return SceneDesc(scene.triangles[:2], [0, 0], scene.materials, scene.lights,
                     scene.background)


def fig2_camera() -> CameraSpec:
    position = (0.03, 2.5, 2.5)
    return CameraSpec(position, normalize(sub((0.0, 0.0, 0.0), position)), (0.0, 1.0, 0.0),
                      40.0, 1.0)


def overhead_camera() -> CameraSpec:
    return CameraSpec((0.03, 2.0, 0.05), (0.0, -1.0, 0.0), (0.0, 0.0, -1.0), 60.0, 1.0)


def small_cloud_camera() -> CameraSpec:
    position = (1.8, 1.4, 2.2)
    return CameraSpec(position, normalize(sub((0.5, 0.5, 0.5), position)), (0.0, 1.0, 0.0),
                      45.0, 1.0)


def _nearest_brute(scene: SceneDesc, ray: Ray) -> Optional[Tuple[float, int]]:
    best = None
    for tri in scene.triangles:
        hit = ray_triangle_intersect(ray, tri)
        if hit is None:
            continue
        key = (hit[0], tri.global_id)
        if best is None or key < best:
            best = key
    return best


def _occluded_brute(scene: SceneDesc, origin, direction, tmax) -> bool:
    probe = Ray(origin, direction, 0.0, float("inf"))
    for tri in scene.triangles:
        hit = ray_triangle_intersect(probe, tri)
        if hit is not None and 0.0 < hit[0] < tmax:
            return True
    return False


def scalar_reference_render(scene: SceneDesc, cam: CameraSpec, width: int, height: int,
                            ambient: float = 0.1, max_depth: int = 1) -> np.ndarray:
    """Brute-force single-node render; float image before quantization."""
    diag = scene_bounds(scene.triangles).diagonal()
    eps = SHADOW_EPS_SCALE * diag
    by_gid = {t.global_id: i for i, t in enumerate(scene.triangles)}
    image = np.zeros((height, width, 3))

    def shade_eye(ray: Ray, throughput, depth: int, out: List):
        best = _nearest_brute(scene, ray)
        if best is None:
            out.append(mul(throughput, scene.background))
            return
        t, gid = best
        tri = scene.triangles[by_gid[gid]]
        mat = scene.materials[scene.material_of_prim[by_gid[gid]]]
        n_g = tri.geometric_normal()
        n_s = scale(n_g, -1.0) if dot(n_g, ray.direction) > 0.0 else n_g
        out.append(mul(scale(throughput, ambient), mat.albedo))
        p = ray.at(t)
        for light in scene.lights:
            if light.kind == "point":
                delta = sub(light.position, p)
                dist = norm(delta)
                # divide (not multiply by reciprocal) to match IEEE rounding
                l_dir = (delta[0] / dist, delta[1] / dist, delta[2] / dist) if dist > 0 else (0.0, 0.0, 1.0)
                tmax = dist
            else:
                l_dir = scale(light.direction, -1.0)
                tmax = float("inf")
            w = max(0.0, dot(n_s, l_dir))
            pending = scale(mul(mul(throughput, mat.albedo), light.intensity), w)
            toward = n_g if dot(n_g, l_dir) >= 0.0 else scale(n_g, -1.0)
            origin = add(p, scale(toward, eps))
            if not _occluded_brute(scene, origin, l_dir, tmax):
                out.append(pending)
            else:
                out.append((0.0, 0.0, 0.0))
        if depth < max_depth and any(c > 0 for c in mat.mirror):
            k = 2.0 * dot(ray.direction, n_s)
            rd = normalize(sub(ray.direction, scale(n_s, k)))
            r_org = add(p, scale(n_s, eps))
            shade_eye(Ray(r_org, rd), mul(throughput, mat.mirror), depth + 1, out)

    for py in range(height):
        for px in range(width):
            contributions: List = []
            shade_eye(camera_primary_ray(cam, px, py, width, height),
                      (1.0, 1.0, 1.0), 0, contributions)
            acc = (0.0, 0.0, 0.0)
            for c in contributions:
                acc = add(acc, c)
            image[py, px] = acc
    return image
