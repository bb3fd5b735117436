"""Scene content: document format, procedural generator, partitioning,
and a time-step cache with LRU eviction.

The scene document is UTF-8 JSON; bulk triangle data may live in a little-
endian float64 sidecar file referenced as {"binary": path, "count": n}.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import SceneFormatError, UsageError
from .geom import Aabb, Triangle, Vec3, normalize, scene_bounds

PARTITION_STRATEGIES = ("roundRobin", "spatialSlab", "fromFile")


@dataclass(frozen=True)
class Material:
    albedo: Vec3
    mirror: Vec3 = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Light:
    kind: str  # "point" or "directional"
    intensity: Vec3
    position: Optional[Vec3] = None  # point lights
    direction: Optional[Vec3] = None  # directional: normalized propagation direction


@dataclass
class SceneDesc:
    triangles: List[Triangle]
    material_of_prim: List[int]
    materials: List[Material]
    lights: List[Light]
    background: Vec3 = (0.0, 0.0, 0.0)
    rank_of_prim: Optional[List[int]] = None
    time_steps: Optional[List[str]] = None

    def bounds(self) -> Aabb:
        return scene_bounds(self.triangles)


@dataclass
class Partition:
    """Assignment of every triangle to exactly one rank."""

    num_ranks: int
    rank_of_gid: Dict[int, int]
    local_sets: List[List[Triangle]] = field(repr=False)


def _expect(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise SceneFormatError(f"{where}: {msg}")


def _vec3(value, where: str) -> Vec3:
    _expect(isinstance(value, (list, tuple)) and len(value) == 3, where, "expected 3 numbers")
    for c in value:
        _expect(isinstance(c, (int, float)) and not isinstance(c, bool), where, "expected 3 numbers")
    return (float(value[0]), float(value[1]), float(value[2]))


def _rgb01(value, where: str) -> Vec3:
    v = _vec3(value, where)
    _expect(all(0.0 <= c <= 1.0 for c in v), where, "components must be within [0, 1]")
    return v


def _load_triangle_array(spec, base_dir: Optional[Path], where: str) -> np.ndarray:
    if isinstance(spec, dict):
        _expect("binary" in spec and "count" in spec, where, 'binary reference needs "binary" and "count"')
        count = spec["count"]
        _expect(isinstance(count, int) and count >= 0, where, '"count" must be a non-negative integer')
        path = Path(spec["binary"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        try:
            flat = np.fromfile(path, dtype="<f8")
        except OSError as exc:
            raise SceneFormatError(f"{where}: cannot read binary sidecar {path}: {exc}") from exc
        _expect(len(flat) == count * 9, where,
                f"sidecar holds {len(flat)} floats, expected {count * 9}")
        return flat.reshape(count, 9)
    _expect(isinstance(spec, list), where, "expected an array of 9-number arrays or a binary reference")
    arr = np.empty((len(spec), 9), np.float64)
    for i, row in enumerate(spec):
        _expect(isinstance(row, (list, tuple)) and len(row) == 9, f"{where}[{i}]",
                f"expected 9 numbers, got {len(row) if isinstance(row, (list, tuple)) else type(row).__name__}")
        for c in row:
            _expect(isinstance(c, (int, float)) and not isinstance(c, bool), f"{where}[{i}]", "expected 9 numbers")
        arr[i] = row
    return arr


def parse_scene(document: bytes, base_dir=None) -> SceneDesc:
    """Parse and fully validate a scene document.

    `base_dir` resolves relative binary-sidecar paths; errors name the
    offending field.
    """
    try:
        doc = json.loads(document.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"document: not valid UTF-8 JSON: {exc}") from exc
    _expect(isinstance(doc, dict), "document", "top level must be an object")

    known = {"triangles", "materialOfPrim", "materials", "lights", "background",
             "rankOfPrim", "timeSteps", "globalIds"}
    for key in doc:
        _expect(key in known, key, "unknown key")

    tri_arr = _load_triangle_array(doc.get("triangles", []), base_dir, "triangles")
    n = len(tri_arr)

    gids = doc.get("globalIds")
    if gids is None:
        gids = list(range(n))
    else:
        _expect(isinstance(gids, list) and len(gids) == n, "globalIds", f"expected {n} entries")
        _expect(all(isinstance(g, int) and not isinstance(g, bool) and g >= 0 for g in gids),
                "globalIds", "entries must be non-negative integers")
        _expect(len(set(gids)) == n, "globalIds", "entries must be unique")
    triangles = [
        Triangle(tuple(tri_arr[i, 0:3]), tuple(tri_arr[i, 3:6]), tuple(tri_arr[i, 6:9]), gids[i])
        for i in range(n)
    ]

    materials = []
    for i, m in enumerate(doc.get("materials", [])):
        _expect(isinstance(m, dict), f"materials[{i}]", "expected an object")
        albedo = _rgb01(m.get("albedo", (0.0, 0.0, 0.0)), f"materials[{i}].albedo")
        mirror = _rgb01(m.get("mirror", (0.0, 0.0, 0.0)), f"materials[{i}].mirror")
        materials.append(Material(albedo, mirror))

    mat_of_prim = doc.get("materialOfPrim")
    if mat_of_prim is None:
        mat_of_prim = [0] * n
    _expect(isinstance(mat_of_prim, list) and len(mat_of_prim) == n,
            "materialOfPrim", f"expected one entry per triangle ({n})")
    for i, mi in enumerate(mat_of_prim):
        _expect(isinstance(mi, int) and not isinstance(mi, bool), f"materialOfPrim[{i}]", "expected an integer")
        _expect(0 <= mi < len(materials), f"materialOfPrim[{i}]",
                f"material index {mi} out of range ({len(materials)} materials)")
    _expect(n == 0 or len(materials) > 0, "materials", "scenes with triangles need at least one material")

    lights = []
    for i, l in enumerate(doc.get("lights", [])):
        where = f"lights[{i}]"
        _expect(isinstance(l, dict), where, "expected an object")
        kind = l.get("kind")
        _expect(kind in ("point", "directional"), f"{where}.kind", 'must be "point" or "directional"')
        intensity = _vec3(l.get("intensity", (1.0, 1.0, 1.0)), f"{where}.intensity")
        _expect(all(c >= 0.0 for c in intensity), f"{where}.intensity", "components must be >= 0")
        if kind == "point":
            _expect("position" in l, where, "point light needs a position")
            lights.append(Light("point", intensity, position=_vec3(l["position"], f"{where}.position")))
        else:
            _expect("direction" in l, where, "directional light needs a direction")
            d = _vec3(l["direction"], f"{where}.direction")
            try:
                d = normalize(d)
            except ValueError:
                raise SceneFormatError(f"{where}.direction: must be a nonzero vector") from None
            lights.append(Light("directional", intensity, direction=d))

    background = _vec3(doc.get("background", (0.0, 0.0, 0.0)), "background")

    rank_of_prim = doc.get("rankOfPrim")
    if rank_of_prim is not None:
        _expect(isinstance(rank_of_prim, list) and len(rank_of_prim) == n,
                "rankOfPrim", f"expected one entry per triangle ({n})")
        for i, r in enumerate(rank_of_prim):
            _expect(isinstance(r, int) and not isinstance(r, bool) and r >= 0,
                    f"rankOfPrim[{i}]", "expected a non-negative integer")

    time_steps = doc.get("timeSteps")
    if time_steps is not None:
        _expect(isinstance(time_steps, list) and all(isinstance(p, str) for p in time_steps),
                "timeSteps", "expected an array of document paths")

    return SceneDesc(triangles, list(mat_of_prim), materials, lights, background,
                     list(rank_of_prim) if rank_of_prim is not None else None,
                     list(time_steps) if time_steps is not None else None)


def serialize_scene(scene: SceneDesc) -> bytes:
    """Canonical inline-triangle document; parse(serialize(s)) == s."""
    doc: dict = {
        "triangles": [[*t.v0, *t.v1, *t.v2] for t in scene.triangles],
        "globalIds": [t.global_id for t in scene.triangles],
        "materialOfPrim": list(scene.material_of_prim),
        "materials": [{"albedo": list(m.albedo), "mirror": list(m.mirror)} for m in scene.materials],
        "lights": [
            {"kind": l.kind, "intensity": list(l.intensity),
             **({"position": list(l.position)} if l.kind == "point" else {"direction": list(l.direction)})}
            for l in scene.lights
        ],
        "background": list(scene.background),
    }
    if scene.rank_of_prim is not None:
        doc["rankOfPrim"] = list(scene.rank_of_prim)
    if scene.time_steps is not None:
        doc["timeSteps"] = list(scene.time_steps)
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def partition_scene(scene: SceneDesc, num_ranks: int, strategy: str) -> Partition:
    """Assign every triangle to exactly one rank; deterministic per strategy."""
    if num_ranks < 1:
        raise UsageError(f"num_ranks must be >= 1, got {num_ranks}")
    if strategy not in PARTITION_STRATEGIES:
        raise UsageError(f"unknown partition strategy {strategy!r}; choose from {PARTITION_STRATEGIES}")
    tris = scene.triangles
    n = len(tris)
    if strategy == "roundRobin":
        ranks = [t.global_id % num_ranks for t in tris]
    elif strategy == "spatialSlab":
        ranks = [0] * n
        if n:
            axis = scene.bounds().longest_axis()
            order = sorted(range(n), key=lambda i: (tris[i].centroid()[axis], tris[i].global_id))
            for r in range(num_ranks):
                a = r * n // num_ranks
                b = (r + 1) * n // num_ranks
                for k in range(a, b):
                    ranks[order[k]] = r
    else:  # fromFile
        if scene.rank_of_prim is None:
            raise UsageError("fromFile partitioning needs a rankOfPrim assignment in the scene")
        # Source runs may have used more ranks than we have; fold them.
        ranks = [r % num_ranks for r in scene.rank_of_prim]
    local_sets: List[List[Triangle]] = [[] for _ in range(num_ranks)]
    rank_of_gid: Dict[int, int] = {}
    for t, r in zip(tris, ranks):
        local_sets[r].append(t)
        rank_of_gid[t.global_id] = r
    return Partition(num_ranks, rank_of_gid, local_sets)


def generate_uneven_cloud(seed: int, n: int, clusters: int) -> SceneDesc:
    """Seeded cloud of small triangles drawn from unequal Gaussian blobs.

    Stand-in for simulation data whose spatial distribution is deliberately
    lopsided; identical seeds give bit-identical scenes.
    """
    if not (n >= clusters >= 1):
        raise UsageError(f"need n >= clusters >= 1, got n={n}, clusters={clusters}")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = rng.random((clusters, 3))
    sigma = rng.uniform(0.02, 0.08, clusters)
    weights = rng.uniform(0.5, 2.0, clusters) * (3.0 ** np.arange(clusters))
    weights /= weights.sum()
    which = rng.choice(clusters, size=n, p=weights)
    offsets = np.clip(rng.standard_normal((n, 3)), -3.9, 3.9)
    cent = centers[which] + sigma[which, None] * offsets
    edge = 0.012
    e0 = rng.standard_normal((n, 3)) * edge
    e1 = rng.standard_normal((n, 3)) * edge
    v0 = cent + e0
    v1 = cent + e1
    v2 = cent - e0 - e1
    mirror_prim = rng.random(n) < 0.1
    triangles = [
        Triangle(tuple(v0[i]), tuple(v1[i]), tuple(v2[i]), i)
        for i in range(n)
    ]
    materials = [
        Material(albedo=(0.78, 0.78, 0.80)),
        Material(albedo=(0.25, 0.25, 0.28), mirror=(0.6, 0.6, 0.6)),
    ]
    lights = [Light("directional", intensity=(1.0, 0.95, 0.9),
                    direction=normalize((-0.35, -1.0, -0.25)))]
    return SceneDesc(
        triangles=triangles,
        material_of_prim=[1 if m else 0 for m in mirror_prim],
        materials=materials,
        lights=lights,
        background=(0.05, 0.06, 0.08),
    )


class TimestepCache:
    """LRU cache over time-step scenes; loads on miss, evicts beyond capacity."""

    def __init__(self, loader: Callable[[int], SceneDesc], num_steps: int, capacity: int = 2):
        if capacity < 1:
            raise UsageError(f"capacity must be >= 1, got {capacity}")
        self._loader = loader
        self._num_steps = num_steps
        self._capacity = capacity
        self._resident: "OrderedDict[int, SceneDesc]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    @property
    def capacity(self) -> int:
        return self._capacity

    def residents(self) -> List[int]:
        """Resident step indices, least recently used first."""
        return list(self._resident.keys())

    def fetch(self, step: int) -> SceneDesc:
        if not (0 <= step < self._num_steps):
            raise UsageError(f"time step {step} out of range [0, {self._num_steps})")
        if step in self._resident:
            self.hits += 1
            self._resident.move_to_end(step)
            return self._resident[step]
        self.misses += 1
        scene = self._loader(step)
        self._resident[step] = scene
        while len(self._resident) > self._capacity:
            self._resident.popitem(last=False)
            self.evictions += 1
        return scene


def timestep_cache_for(scene: SceneDesc, base_dir, capacity: int = 2) -> TimestepCache:
    """Cache whose steps load the documents listed in `scene.time_steps`."""
    steps = scene.time_steps or []
    base = Path(base_dir) if base_dir is not None else None

    def load(i: int) -> SceneDesc:
        path = Path(steps[i])
        if not path.is_absolute() and base is not None:
            path = base / path
        return parse_scene(path.read_bytes(), base_dir=path.parent)

    return TimestepCache(load, len(steps), capacity)
