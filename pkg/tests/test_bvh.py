import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprt.bvh import (MISS_ID, HitKey, build_bvh, intersect_any, intersect_nearest,
                      linear_any, linear_nearest, triangles_to_arrays)
from dprt.geom import Ray, Triangle, ray_triangle_intersect


def random_triangles(rng, n, spread=2.0, size=0.35):
    cent = rng.uniform(-spread, spread, (n, 3))
    e0 = rng.normal(scale=size, size=(n, 3))
    e1 = rng.normal(scale=size, size=(n, 3))
    return [Triangle(tuple(cent[i] + e0[i]), tuple(cent[i] + e1[i]),
                     tuple(cent[i] - e0[i] - e1[i]), i) for i in range(n)]


def random_rays(rng, n, spread=3.0):
    org = rng.uniform(-spread, spread, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return [Ray(tuple(org[i]), tuple(d[i])) for i in range(n)]


def test_empty_scene_always_misses():
    accel = build_bvh([])
    ray = Ray((0, 0, 0), (1, 0, 0))
    assert intersect_nearest(accel, ray) is None
    assert not intersect_any(accel, ray)


def test_single_triangle_leaf_bounds():
    tri = Triangle((0, 0, 0), (2, 0, 0), (0, 3, 1), 5)
    accel = build_bvh([tri])
    assert accel.num_nodes == 1
    root = accel.node(0)
    assert root.is_leaf and root.count == 1
    assert root.bounds == tri.bounds()
    hit = intersect_nearest(accel, Ray((0.5, 0.5, 5.0), (0, 0, -1)))
    assert hit is not None and hit.global_id == 5


def test_nearer_of_two_parallel_triangles_wins():
    near = Triangle((-1, -1, -1), (1, -1, -1), (0, 1, -1), 0)
    far = Triangle((-1, -1, -2), (1, -1, -2), (0, 1, -2), 1)
    accel = build_bvh([far, near])
    hit = intersect_nearest(accel, Ray((0, 0, 0), (0, 0, -1)))
    assert hit == HitKey(1.0, 0)


def test_coincident_triangles_tie_break_by_global_id():
    a = Triangle((-1, -1, -1), (1, -1, -1), (0, 1, -1), 7)
    b = Triangle((-1, -1, -1), (1, -1, -1), (0, 1, -1), 3)
    for order in ([a, b], [b, a]):
        hit = intersect_nearest(build_bvh(order), Ray((0, 0, 0), (0, 0, -1)))
        assert hit is not None and hit.global_id == 3


def test_any_hit_respects_light_distance():
    occluder = Triangle((-1, -1, -5), (1, -1, -5), (0, 1, -5), 0)
    accel = build_bvh([occluder])
    assert not intersect_any(accel, Ray((0, 0, 0), (0, 0, -1), 0.0, 2.0))
    assert intersect_any(accel, Ray((0, 0, 0), (0, 0, -1), 0.0, 10.0))
    # strictly inside (tmin, tmax): a hit exactly at tmax does not occlude
    assert not intersect_any(accel, Ray((0, 0, 0), (0, 0, -1), 0.0, 5.0))


def test_traversal_matches_linear_scan_on_random_scene():
    rng = np.random.default_rng(7)
    prims = random_triangles(rng, 1024)
    accel = build_bvh(prims)
    tri_v, tri_id = triangles_to_arrays(prims)
    for ray in random_rays(rng, 2000):
        assert intersect_nearest(accel, ray) == linear_nearest(tri_v, tri_id, ray)
        shadow = Ray(ray.origin, ray.direction, 1e-3, 4.0)
        assert intersect_any(accel, shadow) == linear_any(tri_v, tri_id, shadow)


def test_results_independent_of_insertion_order():
    rng = np.random.default_rng(11)
    prims = random_triangles(rng, 300)
    rays = random_rays(rng, 300)
    baseline = [intersect_nearest(build_bvh(prims), r) for r in rays]
    for seed in (1, 2):
        shuffled = list(prims)
        np.random.default_rng(seed).shuffle(shuffled)
        accel = build_bvh(shuffled)
        assert [intersect_nearest(accel, r) for r in rays] == baseline


def walk_containment(accel, node_index):
    node = accel.node(node_index)
    if node.is_leaf:
        lo = accel.tri_v[node.first:node.first + node.count].reshape(-1, 3)
        assert (lo >= np.asarray(node.bounds.lo) - 1e-12).all()
        assert (lo <= np.asarray(node.bounds.hi) + 1e-12).all()
        return list(range(node.first, node.first + node.count))
    covered = walk_containment(accel, node.left) + walk_containment(accel, node.right)
    for child in (node.left, node.right):
        assert node.bounds.contains(accel.node(child).bounds)
    return covered


def test_node_bounds_contain_descendants_and_leaves_partition_prims():
    rng = np.random.default_rng(3)
    prims = random_triangles(rng, 777)
    accel = build_bvh(prims)
    covered = walk_containment(accel, accel.root)
    assert sorted(covered) == list(range(len(prims)))
    assert sorted(accel.prim_order.tolist()) == list(range(len(prims)))
    leaf_counts = accel.node_count[accel.node_count > 0]
    assert leaf_counts.max() <= 4 and leaf_counts.min() >= 1


def test_identical_centroids_still_split():
    # many triangles sharing one centroid: median split must terminate
    tris = [Triangle((0, 0, 0), (1, 0, 0), (0, 1, 0), gid) for gid in range(64)]
    accel = build_bvh(tris)
    hit = intersect_nearest(accel, Ray((0.2, 0.2, 1.0), (0, 0, -1)))
    assert hit is not None and hit.global_id == 0


def test_kernel_agrees_with_scalar_triangle_test():
    rng = np.random.default_rng(23)
    prims = random_triangles(rng, 64)
    tri_v, tri_id = triangles_to_arrays(prims)
    for ray in random_rays(rng, 128):
        lin = linear_nearest(tri_v, tri_id, ray)
        best = None
        for tri in prims:
            hit = ray_triangle_intersect(ray, tri)
            if hit is not None:
                key = HitKey(hit[0], tri.global_id)
                if best is None or (key.t, key.global_id) < (best.t, best.global_id):
                    best = key
        assert lin == best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 60))
def test_equivalence_property(seed, n):
    rng = np.random.default_rng(seed)
    prims = random_triangles(rng, n)
    accel = build_bvh(prims)
    tri_v, tri_id = triangles_to_arrays(prims)
    for ray in random_rays(rng, 40):
        assert intersect_nearest(accel, ray) == linear_nearest(tri_v, tri_id, ray)
        assert intersect_any(accel, ray) == linear_any(tri_v, tri_id, ray)


def test_degenerate_triangles_allowed_but_never_hit():
    degen = Triangle((0, 0, -1), (1, 0, -1), (2, 0, -1), 0)
    real = Triangle((-1, -1, -2), (1, -1, -2), (0, 1, -2), 1)
    accel = build_bvh([degen, real])
    hit = intersect_nearest(accel, Ray((0, 0, 0), (0, 0, -1)))
    assert hit is not None and hit.global_id == 1
