import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprt.errors import SceneFormatError, UsageError
from dprt.geom import Triangle
from dprt.refcount import RefCounted, refcount_release, refcount_retain
from dprt.scene import (Material, SceneDesc, TimestepCache, generate_uneven_cloud,
                        parse_scene, partition_scene, serialize_scene,
                        timestep_cache_for)

MINIMAL = {
    "triangles": [[0, 0, 0, 1, 0, 0, 0, 1, 0]],
    "materials": [{"albedo": [0.5, 0.5, 0.5], "mirror": [0, 0, 0]}],
    "lights": [{"kind": "directional", "direction": [0, -1, 0], "intensity": [1, 1, 1]}],
}


def doc(obj) -> bytes:
    return json.dumps(obj).encode("utf-8")


def test_parse_minimal_document():
    scene = parse_scene(doc(MINIMAL))
    assert (len(scene.triangles), len(scene.materials), len(scene.lights)) == (1, 1, 1)
    assert scene.triangles[0].global_id == 0
    assert scene.material_of_prim == [0]
    assert scene.background == (0.0, 0.0, 0.0)


def test_parse_rejects_out_of_range_material_index():
    bad = dict(MINIMAL, materialOfPrim=[5],
               materials=[{"albedo": [1, 0, 0]}, {"albedo": [0, 1, 0]}])
    with pytest.raises(SceneFormatError, match=r"materialOfPrim\[0\].*material index 5 out of range"):
        parse_scene(doc(bad))


def test_parse_rejects_malformed_triangle():
    bad = dict(MINIMAL, triangles=[[0, 0, 0, 1, 0, 0, 0, 1]])
    with pytest.raises(SceneFormatError, match=r"triangles\[0\]"):
        parse_scene(doc(bad))


def test_parse_rejects_bad_rank_assignment():
    bad = dict(MINIMAL, rankOfPrim=[-1])
    with pytest.raises(SceneFormatError, match=r"rankOfPrim\[0\]"):
        parse_scene(doc(bad))


def test_parse_rejects_unnormalizable_light():
    bad = dict(MINIMAL, lights=[{"kind": "directional", "direction": [0, 0, 0], "intensity": [1, 1, 1]}])
    with pytest.raises(SceneFormatError, match=r"lights\[0\].direction"):
        parse_scene(doc(bad))


def test_explicit_rank_assignment_honored():
    tri = [0, 0, 0, 1, 0, 0, 0, 1, 0]
    scene = parse_scene(doc({
        "triangles": [tri, tri, tri],
        "materials": [{"albedo": [1, 1, 1]}],
        "rankOfPrim": [0, 1, 0],
    }))
    part = partition_scene(scene, 2, "fromFile")
    assert [t.global_id for t in part.local_sets[0]] == [0, 2]
    assert [t.global_id for t in part.local_sets[1]] == [1]
    assert part.rank_of_gid == {0: 0, 1: 1, 2: 0}


def test_from_file_folds_excess_source_ranks():
    tri = [0, 0, 0, 1, 0, 0, 0, 1, 0]
    scene = parse_scene(doc({
        "triangles": [tri] * 4,
        "materials": [{"albedo": [1, 1, 1]}],
        "rankOfPrim": [0, 1, 2, 3],
    }))
    part = partition_scene(scene, 2, "fromFile")
    assert part.rank_of_gid == {0: 0, 1: 1, 2: 0, 3: 1}


def test_from_file_requires_assignment():
    scene = parse_scene(doc(MINIMAL))
    with pytest.raises(UsageError, match="rankOfPrim"):
        partition_scene(scene, 2, "fromFile")


def test_round_robin_assignment():
    scene = generate_uneven_cloud(3, 10, 2)
    part = partition_scene(scene, 2, "roundRobin")
    assert [t.global_id for t in part.local_sets[0]] == [0, 2, 4, 6, 8]
    assert [t.global_id for t in part.local_sets[1]] == [1, 3, 5, 7, 9]


def test_spatial_slab_on_a_line():
    tris = [[float(x), 0, 0, float(x), 1, 0, float(x), 0, 1] for x in (4, 0, 7, 2, 5, 1, 8, 3, 6)]
    scene = parse_scene(doc({"triangles": tris, "materials": [{"albedo": [1, 1, 1]}]}))
    part = partition_scene(scene, 3, "spatialSlab")
    by_rank = [sorted(t.centroid()[0] for t in s) for s in part.local_sets]
    assert by_rank == [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [6.0, 7.0, 8.0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 60), st.integers(1, 7),
       st.sampled_from(["roundRobin", "spatialSlab"]))
def test_partitions_never_drop_or_duplicate(seed, n, ranks, strategy):
    scene = generate_uneven_cloud(seed, max(n, 1), 1)
    part = partition_scene(scene, ranks, strategy)
    gathered = sorted(t.global_id for s in part.local_sets for t in s)
    assert gathered == [t.global_id for t in scene.triangles]
    assert len(part.rank_of_gid) == len(scene.triangles)


def test_serialize_round_trip():
    scene = generate_uneven_cloud(5, 50, 2)
    scene.rank_of_prim = [i % 3 for i in range(50)]
    assert parse_scene(serialize_scene(scene)) == scene


def test_generator_determinism():
    a = serialize_scene(generate_uneven_cloud(1, 100, 3))
    b = serialize_scene(generate_uneven_cloud(1, 100, 3))
    assert a == b
    c = serialize_scene(generate_uneven_cloud(2, 100, 3))
    assert a != c


def test_generator_counts_and_centroid_bound():
    scene = generate_uneven_cloud(9, 500, 4)
    assert len(scene.triangles) == 500
    # blob offsets are clipped below 4 sigma and sigma <= 0.08
    margin = 4 * 0.08
    cents = np.array([t.centroid() for t in scene.triangles])
    assert (cents >= -margin).all() and (cents <= 1 + margin).all()


def test_generated_cloud_is_spatially_uneven():
    scene = generate_uneven_cloud(1, 10_000, 4)
    part = partition_scene(scene, 4, "spatialSlab")
    volumes = []
    for local in part.local_sets:
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for t in local:
            for v in (t.v0, t.v1, t.v2):
                lo = np.minimum(lo, v)
                hi = np.maximum(hi, v)
        volumes.append(float(np.prod(hi - lo)))
    assert max(volumes) / min(volumes) > 1.5


def test_binary_sidecar(tmp_path):
    tris = np.arange(18, dtype="<f8")
    (tmp_path / "bulk.bin").write_bytes(tris.tobytes())
    scene = parse_scene(doc({
        "triangles": {"binary": "bulk.bin", "count": 2},
        "materials": [{"albedo": [1, 1, 1]}],
    }), base_dir=tmp_path)
    assert len(scene.triangles) == 2
    assert scene.triangles[1].v0 == (9.0, 10.0, 11.0)
    with pytest.raises(SceneFormatError, match="sidecar holds 18 floats, expected 27"):
        parse_scene(doc({"triangles": {"binary": "bulk.bin", "count": 3},
                         "materials": [{"albedo": [1, 1, 1]}]}), base_dir=tmp_path)


# -- reference counting


def test_refcount_counter_semantics():
    destroyed = []

    class Obj(RefCounted):
        def on_destroy(self):
            destroyed.append(self)

    obj = Obj()
    assert obj.refcount == 1
    assert refcount_retain(obj) == 2
    assert refcount_release(obj) == 1
    assert refcount_release(obj) == 0
    assert destroyed == [obj] and not obj.alive


def test_parent_held_reference_keeps_child_alive():
    world = RefCounted()
    surface = RefCounted()
    world.hold(surface)
    assert refcount_release(surface) == 1  # app handle gone, parent ref remains
    assert surface.alive
    refcount_release(world)
    assert not world.alive and not surface.alive


def test_double_release_reports_usage_error():
    obj = RefCounted()
    refcount_release(obj)
    with pytest.raises(UsageError):
        refcount_release(obj)
    with pytest.raises(UsageError):
        refcount_retain(obj)


# -- time-step cache


def make_cache(capacity, steps=8):
    loads = []

    def loader(i):
        loads.append(i)
        return SceneDesc([], [], [Material((1, 1, 1))], [], (0, 0, 0))

    return TimestepCache(loader, steps, capacity), loads


def test_lru_evicts_oldest():
    cache, _ = make_cache(2)
    for step in (0, 1, 2):
        cache.fetch(step)
    assert cache.residents() == [1, 2]
    assert (cache.hits, cache.misses, cache.evictions) == (0, 3, 1)


def test_lru_recency_update():
    cache, _ = make_cache(2)
    for step in (0, 1, 0, 2):
        cache.fetch(step)
    assert cache.residents() == [0, 2]  # step 1 was least recently used


def test_lru_hit_counting():
    cache, loads = make_cache(1)
    for _ in range(3):
        cache.fetch(0)
    assert (cache.hits, cache.misses, cache.evictions) == (2, 1, 0)
    assert loads == [0]


def test_cache_rejects_bad_step_and_capacity():
    cache, _ = make_cache(2, steps=3)
    with pytest.raises(UsageError):
        cache.fetch(3)
    with pytest.raises(UsageError):
        make_cache(0)


def test_timestep_cache_loads_documents(tmp_path):
    for i in range(3):
        step = dict(MINIMAL, background=[i / 10, 0, 0])
        (tmp_path / f"step{i}.json").write_bytes(doc(step))
    root = dict(MINIMAL, timeSteps=[f"step{i}.json" for i in range(3)])
    scene = parse_scene(doc(root), base_dir=tmp_path)
    cache = timestep_cache_for(scene, tmp_path, capacity=2)
    assert cache.fetch(1).background == (0.1, 0.0, 0.0)
    assert cache.fetch(2).background == (0.2, 0.0, 0.0)
    cache.fetch(0)
    assert cache.residents() == [2, 0]
