"""Collective render API: reference-counted objects, staged parameters,
local commits, and rank-synchronized frame rendering.

Worlds are distributed: each rank commits only its local surfaces, and the
compact shading table (global id, normal, material colors per triangle) is
gathered and re-broadcast at the start of every collective render so the
pixel owners can shade hits on remote geometry. Creating, parameterizing,
and committing objects never touches the transport.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import bvh as bvhmod
from . import engine, transport
from .bvh import Accel, build_bvh
from .engine import RenderOptions, RenderResult, ShadingContext, tone_map_rgb8
from .errors import UsageError
from .geom import Aabb, CameraSpec, Triangle, Vec3
from .refcount import RefCounted
from .scene import Light, Material
from .transport import RankEndpoint


class _NotRoot:
    def __repr__(self) -> str:
        return "NOT_ROOT"


NOT_ROOT = _NotRoot()

OBJECT_KINDS = ("world", "surface", "group", "instance", "camera", "renderer", "frame")

_PARAMS: Dict[str, Dict[str, object]] = {
    "world": {"surfaces": [], "instances": [], "lights": []},
    "surface": {"triangles": [], "material": Material((0.8, 0.8, 0.8))},
    "group": {"surfaces": []},
    "instance": {"group": None},
    "camera": {"position": (0.0, 0.0, 3.0), "direction": (0.0, 0.0, -1.0),
               "up": (0.0, 1.0, 0.0), "fovY": 60.0, "aspect": 1.0},
    "renderer": {"background": (0.0, 0.0, 0.0), "ambient": 0.1, "mode": "shaded",
                 "maxDepth": 1, "disableCycling": False},
    "frame": {"world": None, "camera": None, "renderer": None, "size": (256, 256)},
}


class ApiObject(RefCounted):
    """Render-graph object with staged and committed parameter sets."""

    def __init__(self, device: "Device", kind: str):
        super().__init__()
        self.device = device
        self.kind = kind
        self.staged: Dict[str, object] = dict(_PARAMS[kind])
        self.committed: Dict[str, object] = {}
        self.commit_epoch = 0

    def __repr__(self) -> str:
        return f"<{self.kind} refcount={self.refcount}>"

    def set_param(self, name: str, value) -> None:
        """Stage a parameter; takes effect only at the next commit."""
        self._check_alive()
        if name not in _PARAMS[self.kind]:
            valid = ", ".join(sorted(_PARAMS[self.kind]))
            raise UsageError(f"{self.kind} has no parameter {name!r}; valid names: {valid}")
        old = self.staged.get(name)
        for child in _handles(old):
            self.drop(child)
        for child in _handles(value):
            self.hold(child)
        self.staged[name] = value

    def commit(self) -> None:
        """Atomically publish the staged parameters; local, no communication."""
        self._check_alive()
        old = self.committed
        self.committed = dict(self.staged)
        for name, value in self.committed.items():
            for child in _handles(value):
                self.hold(child)
        for value in old.values():
            for child in _handles(value):
                self.drop(child)
        self.commit_epoch += 1
        self._on_commit()

    def _on_commit(self) -> None:
        pass


def _handles(value) -> List[ApiObject]:
    if isinstance(value, ApiObject):
        return [value]
    if isinstance(value, (list, tuple)):
        return [v for v in value if isinstance(v, ApiObject)]
    return []


class Surface(ApiObject):
    def _on_commit(self) -> None:
        tris = self.committed["triangles"]
        if not all(isinstance(t, Triangle) for t in tris):
            raise UsageError("surface 'triangles' must be Triangle values")
        if not isinstance(self.committed["material"], Material):
            raise UsageError("surface 'material' must be a Material value")


class World(ApiObject):
    """Distributed scene node; commit rebuilds this rank's BVH and the
    local slice of the shading table."""

    def __init__(self, device: "Device"):
        super().__init__(device, "world")
        self.accel: Accel = build_bvh([])
        self.local_ids = np.zeros(0, np.int64)
        self.local_normal = np.zeros((0, 3))
        self.local_albedo = np.zeros((0, 3))
        self.local_mirror = np.zeros((0, 3))
        self.local_bounds = Aabb.empty()

    def _flatten_surfaces(self) -> List[Surface]:
        surfaces: List[Surface] = []
        for s in self.committed.get("surfaces", []):
            if not (isinstance(s, ApiObject) and s.kind == "surface"):
                raise UsageError("world 'surfaces' entries must be surface objects")
            surfaces.append(s)
        for inst in self.committed.get("instances", []):
            if not (isinstance(inst, ApiObject) and inst.kind == "instance"):
                raise UsageError("world 'instances' entries must be instance objects")
            group = inst.committed.get("group")
            if not (isinstance(group, ApiObject) and group.kind == "group"):
                raise UsageError("instance 'group' must be a committed group object")
            for s in group.committed.get("surfaces", []):
                if not (isinstance(s, ApiObject) and s.kind == "surface"):
                    raise UsageError("group 'surfaces' entries must be surface objects")
                surfaces.append(s)
        return surfaces

    def _on_commit(self) -> None:
        lights = self.committed.get("lights", [])
        if not all(isinstance(l, Light) for l in lights):
            raise UsageError("world 'lights' must be Light values")
        tris: List[Triangle] = []
        albedo: List[Vec3] = []
        mirror: List[Vec3] = []
        for s in self._flatten_surfaces():
            mat = s.committed.get("material", _PARAMS["surface"]["material"])
            for t in s.committed.get("triangles", []):
                tris.append(t)
                albedo.append(mat.albedo)
                mirror.append(mat.mirror)
        ids = np.array([t.global_id for t in tris], np.int64)
        if len(np.unique(ids)) != len(ids):
            raise UsageError("world geometry has duplicate global ids")
        tri_v, _ = bvhmod.triangles_to_arrays(tris)
        self.accel = build_bvh(tris)
        self.local_ids = ids
        self.local_normal = engine._geometric_normals(tri_v)
        self.local_albedo = np.asarray(albedo, np.float64).reshape(-1, 3)
        self.local_mirror = np.asarray(mirror, np.float64).reshape(-1, 3)
        box = Aabb.empty()
        for t in tris:
            box = box.union(t.bounds())
        self.local_bounds = box


class Frame(ApiObject):
    """Virtual film: holds exactly one world, camera, and renderer."""

    def __init__(self, device: "Device"):
        super().__init__(device, "frame")
        self.sequence = 0
        self._result: Optional[FrameResult] = None
        self._complete = False

    def _on_commit(self) -> None:
        for name, kind in (("world", "world"), ("camera", "camera"), ("renderer", "renderer")):
            obj = self.committed.get(name)
            if not (isinstance(obj, ApiObject) and obj.kind == kind):
                raise UsageError(f"frame is missing a committed {name} object")
            if obj.commit_epoch == 0:
                raise UsageError(f"frame {name} was never committed")
        size = self.committed.get("size")
        if not (isinstance(size, (tuple, list)) and len(size) == 2
                and all(isinstance(v, int) and v > 0 for v in size)):
            raise UsageError("frame 'size' must be two positive integers")

    def render(self) -> None:
        render_frame_collective(self)

    def wait(self) -> None:
        """Block until the last render completes (synchronous backend: no-op)."""
        self._check_alive()
        if not self._complete:
            raise UsageError("wait_frame before any render")

    def map(self) -> Union["FrameResult", _NotRoot]:
        return map_frame(self)


class FrameResult:
    """Mapped pixel buffer; valid until the next render completes."""

    def __init__(self, width: int, height: int, pixels: bytes, sequence: int):
        self.width = width
        self.height = height
        self.sequence = sequence
        self._pixels = pixels
        self._valid = True

    @property
    def valid(self) -> bool:
        return self._valid

    @property
    def pixels(self) -> bytes:
        if not self._valid:
            raise UsageError("frame buffer was invalidated by a newer render")
        return self._pixels

    def _invalidate(self) -> None:
        self._valid = False


class Device:
    """Per-rank object factory bound to one transport endpoint."""

    def __init__(self, ep: RankEndpoint):
        self.ep = ep

    def create(self, kind: str) -> ApiObject:
        if kind not in OBJECT_KINDS:
            raise UsageError(f"unknown object kind {kind!r}; valid kinds: {', '.join(OBJECT_KINDS)}")
        if kind == "world":
            return World(self)
        if kind == "frame":
            return Frame(self)
        if kind == "surface":
            return Surface(self, "surface")
        return ApiObject(self, kind)


def create_object(device: Device, kind: str) -> ApiObject:
    return device.create(kind)


def set_param(obj: ApiObject, name: str, value) -> None:
    obj.set_param(name, value)


def commit(obj: ApiObject) -> None:
    obj.commit()


_ENTRY_HEADER = struct.Struct("<Q6d")


def _pack_entries(world: World) -> bytes:
    lo, hi = world.local_bounds.lo, world.local_bounds.hi
    head = _ENTRY_HEADER.pack(len(world.local_ids), *lo, *hi)
    return (head + world.local_ids.tobytes() + world.local_normal.tobytes()
            + world.local_albedo.tobytes() + world.local_mirror.tobytes())


def _unpack_entries(data: bytes):
    (count, lx, ly, lz, hx, hy, hz) = _ENTRY_HEADER.unpack_from(data, 0)
    off = _ENTRY_HEADER.size
    ids = np.frombuffer(data, np.int64, count, off).copy()
    off += count * 8
    arrays = []
    for _ in range(3):
        arrays.append(np.frombuffer(data, np.float64, count * 3, off).reshape(count, 3).copy())
        off += count * 24
    return ids, arrays[0], arrays[1], arrays[2], Aabb((lx, ly, lz), (hx, hy, hz))


def _sync_shading_table(ep: RankEndpoint, world: World, lights: Sequence[Light],
                        background: Vec3) -> ShadingContext:
    """All-gather every rank's shading entries so owners can shade any hit."""
    tiles = transport.gather_to_root(ep, _pack_entries(world))
    if ep.rank == 0:
        assembled = struct.pack("<I", len(tiles)) + b"".join(
            struct.pack("<Q", len(t)) + t for t in tiles)
    else:
        assembled = None
    assembled = transport.broadcast_from_root(ep, assembled)
    (nranks,) = struct.unpack_from("<I", assembled, 0)
    off = 4
    ids_parts, normal_parts, albedo_parts, mirror_parts, rank_parts = [], [], [], [], []
    box = Aabb.empty()
    for rank in range(nranks):
        (tlen,) = struct.unpack_from("<Q", assembled, off)
        off += 8
        ids, normal, albedo, mirror, rbox = _unpack_entries(assembled[off:off + tlen])
        off += tlen
        ids_parts.append(ids)
        normal_parts.append(normal)
        albedo_parts.append(albedo)
        mirror_parts.append(mirror)
        rank_parts.append(np.full(len(ids), rank, np.int64))
        box = box.union(rbox)
    ids = np.concatenate(ids_parts)
    order = np.argsort(ids, kind="stable")
    return ShadingContext(
        ids=ids[order],
        normal=np.concatenate(normal_parts)[order],
        albedo=np.concatenate(albedo_parts)[order],
        mirror=np.concatenate(mirror_parts)[order],
        prim_rank=np.concatenate(rank_parts)[order],
        lights=list(lights),
        background=background,
        scene_diag=box.diagonal(),
    )


def _camera_spec(camera: ApiObject, width: int, height: int) -> CameraSpec:
    c = camera.committed
    return CameraSpec(tuple(c["position"]), tuple(c["direction"]), tuple(c["up"]),
                      float(c["fovY"]), float(c["aspect"]))


def render_frame_collective(frame: Frame) -> RenderResult:
    """Collective: every rank renders the frame's committed state.

    Divergent committed camera/renderer/size/light parameters abort with a
    contract error on all ranks before any tracing round.
    """
    frame._check_alive()
    if frame.commit_epoch == 0:
        raise UsageError("frame must be committed before rendering")
    world: World = frame.committed["world"]
    camera: ApiObject = frame.committed["camera"]
    renderer: ApiObject = frame.committed["renderer"]
    width, height = frame.committed["size"]
    r = renderer.committed
    options = RenderOptions(
        max_depth=int(r["maxDepth"]), mode=str(r["mode"]), ambient=float(r["ambient"]),
        disable_cycling=bool(r["disableCycling"]), frame_index=frame.sequence)
    lights = list(world.committed.get("lights", []))
    background = tuple(r["background"])
    ep = frame.device.ep
    ctx = _sync_shading_table(ep, world, lights, background)
    cam = _camera_spec(camera, width, height)
    result = engine.render_with(ep, world.accel, ctx, cam, width, height, options)
    frame.sequence += 1
    if frame._result is not None:
        frame._result._invalidate()
        frame._result = None
    if ep.rank == 0:
        rgb8 = tone_map_rgb8(result.image)
        frame._result = FrameResult(width, height, rgb8.tobytes(), frame.sequence)
    frame._complete = True
    return result


def map_frame(frame: Frame) -> Union[FrameResult, _NotRoot]:
    """Rank 0 gets the pixel buffer of the last completed render."""
    frame._check_alive()
    if not frame._complete:
        raise UsageError("map_frame before any completed render")
    if frame.device.ep.rank != 0:
        return NOT_ROOT
    assert frame._result is not None
    return frame._result
