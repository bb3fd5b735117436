"""Wavefront renderer built on ray-queue cycling.

Each bounce generation (primary rays, then their shadow rays, then
reflections) is one batch per rank. A batch is traced against the local
BVH, handed to the next rank on the ring, and so on until every ray has
been tested on every rank; the final hop returns it to the rank that owns
its pixels, which alone shades and accumulates. The best hit is reduced
with the key (t, global_id), which makes the image independent of how the
triangles were distributed.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import bvh as bvhmod
from . import transport
from .bvh import Accel, MISS_ID, MISS_T, build_bvh, trace_any_batch, trace_nearest_batch
from .errors import ContractError
from .geom import CameraSpec, Vec3
from .scene import Light, Partition, SceneDesc
from .transport import RankEndpoint

PRIMARY = 0
SHADOW = 1
REFLECTION = 2

KIND_NAMES = {PRIMARY: "primary", SHADOW: "shadow", REFLECTION: "reflection"}

SHADOW_EPS_SCALE = 1e-4

# Distinct colors for rank-assignment visualization, one per rank modulo 8.
RANK_PALETTE = np.array([
    (0.90, 0.15, 0.15), (0.15, 0.55, 0.90), (0.95, 0.75, 0.10), (0.15, 0.80, 0.35),
    (0.60, 0.30, 0.85), (0.95, 0.45, 0.10), (0.20, 0.25, 0.95), (0.80, 0.80, 0.80),
], dtype=np.float64)

_BATCH_HEADER = struct.Struct("<BIQ")


@dataclass
class RayBatch:
    """Kind-homogeneous, order-preserving array-of-rays container."""

    kind: int
    rounds_completed: int
    org: np.ndarray  # (n, 3) float64
    dirn: np.ndarray  # (n, 3) float64
    tmin: np.ndarray  # (n,) float64
    tmax: np.ndarray  # (n,) float64
    pixel: np.ndarray  # (n,) int64 flat pixel index
    owner: np.ndarray  # (n,) int64 owning rank
    best_t: np.ndarray  # (n,) float64
    best_gid: np.ndarray  # (n,) int64, MISS_ID sentinel
    occluded: np.ndarray  # (n,) uint8
    throughput: np.ndarray  # (n, 3) float64
    light_index: np.ndarray  # (n,) int64, -1 unless shadow
    depth: np.ndarray  # (n,) int64 bounce count

    _FIELDS = ("org", "dirn", "tmin", "tmax", "pixel", "owner", "best_t",
               "best_gid", "occluded", "throughput", "light_index", "depth")

    def __len__(self) -> int:
        return len(self.tmin)

    @staticmethod
    def empty(kind: int, n: int = 0) -> "RayBatch":
        return RayBatch(
            kind=kind, rounds_completed=0,
            org=np.zeros((n, 3)), dirn=np.zeros((n, 3)),
            tmin=np.zeros(n), tmax=np.full(n, np.inf),
            pixel=np.zeros(n, np.int64), owner=np.zeros(n, np.int64),
            best_t=np.full(n, MISS_T), best_gid=np.full(n, MISS_ID, np.int64),
            occluded=np.zeros(n, np.uint8), throughput=np.ones((n, 3)),
            light_index=np.full(n, -1, np.int64), depth=np.zeros(n, np.int64),
        )

    def serialize(self) -> bytes:
        """Little-endian fixed-width layout; preserves ray order and float bits."""
        parts = [_BATCH_HEADER.pack(self.kind, self.rounds_completed, len(self))]
        for name in self._FIELDS:
            parts.append(np.ascontiguousarray(getattr(self, name)).tobytes())
        return b"".join(parts)

    @staticmethod
    def deserialize(data: bytes) -> "RayBatch":
        kind, rounds, n = _BATCH_HEADER.unpack_from(data, 0)
        off = _BATCH_HEADER.size
        specs = {
            "org": (np.float64, (n, 3)), "dirn": (np.float64, (n, 3)),
            "tmin": (np.float64, (n,)), "tmax": (np.float64, (n,)),
            "pixel": (np.int64, (n,)), "owner": (np.int64, (n,)),
            "best_t": (np.float64, (n,)), "best_gid": (np.int64, (n,)),
            "occluded": (np.uint8, (n,)), "throughput": (np.float64, (n, 3)),
            "light_index": (np.int64, (n,)), "depth": (np.int64, (n,)),
        }
        fields = {}
        for name in RayBatch._FIELDS:
            dtype, shape = specs[name]
            count = int(np.prod(shape))
            nbytes = count * np.dtype(dtype).itemsize
            fields[name] = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape).copy()
            off += nbytes
        return RayBatch(kind=kind, rounds_completed=rounds, **fields)


@dataclass
class ShadingContext:
    """Replicated per-triangle shading attributes plus scene-wide lighting.

    Holds what an owner rank needs to shade a hit on any rank's geometry:
    geometric normal, material colors, and the rank that stores the
    triangle (for rank-color visualization).
    """

    ids: np.ndarray  # (m,) int64, sorted ascending
    normal: np.ndarray  # (m, 3) float64 geometric normals
    albedo: np.ndarray  # (m, 3) float64
    mirror: np.ndarray  # (m, 3) float64
    prim_rank: np.ndarray  # (m,) int64
    lights: List[Light]
    background: Vec3
    scene_diag: float

    @staticmethod
    def from_scene(scene: SceneDesc, partition: Partition) -> "ShadingContext":
        tri_v, tri_id = bvhmod.triangles_to_arrays(scene.triangles)
        normal = _geometric_normals(tri_v)
        mats = np.array([[*m.albedo, *m.mirror] for m in scene.materials], np.float64).reshape(-1, 6)
        mat_idx = np.asarray(scene.material_of_prim, np.int64)
        albedo = mats[mat_idx, 0:3].reshape(-1, 3)
        mirror = mats[mat_idx, 3:6].reshape(-1, 3)
        prim_rank = np.array([partition.rank_of_gid[t.global_id] for t in scene.triangles], np.int64)
        order = np.argsort(tri_id, kind="stable")
        return ShadingContext(
            ids=tri_id[order], normal=normal[order], albedo=albedo[order],
            mirror=mirror[order], prim_rank=prim_rank[order],
            lights=list(scene.lights), background=scene.background,
            scene_diag=scene.bounds().diagonal(),
        )

    def index_of(self, gids: np.ndarray) -> np.ndarray:
        """Map global ids to rows; ids must all be present."""
        idx = np.searchsorted(self.ids, gids)
        return idx


def _geometric_normals(tri_v: np.ndarray) -> np.ndarray:
    e1 = tri_v[:, 3:6] - tri_v[:, 0:3]
    e2 = tri_v[:, 6:9] - tri_v[:, 0:3]
    n = np.cross(e1, e2)
    ln = np.sqrt(n[:, 0] * n[:, 0] + n[:, 1] * n[:, 1] + n[:, 2] * n[:, 2])
    safe = np.where(ln == 0.0, 1.0, ln)
    n = n / safe[:, None]
    n[ln == 0.0] = 0.0  # degenerate triangles never report hits anyway
    return n


@dataclass(frozen=True)
class RenderOptions:
    max_depth: int = 1
    mode: str = "shaded"  # "shaded" or "rankcolor"
    ambient: float = 0.1
    disable_cycling: bool = False  # debug: skip ring hops, trace locally only
    frame_index: int = 0
    collect_shadow_debug: bool = False


@dataclass
class RankStats:
    """Per-rank counters plus line-delimited per-round records."""

    nearest_calls: int = 0
    nearest_calls_primary: int = 0
    any_calls: int = 0
    rays_traced: int = 0
    bytes_exchanged: int = 0
    rounds: int = 0
    records: List[str] = field(default_factory=list)

    def record(self, frame: int, rays: int, nbytes: int, millis: float) -> None:
        self.records.append(
            f"frame={frame} round={self.rounds} raysTraced={rays} "
            f"bytesExchanged={nbytes} millis={millis:.3f}")
        self.rounds += 1


@dataclass
class ShadowDebugWave:
    """Snapshot of a fully cycled shadow wave, for occlusion auditing."""

    org: np.ndarray
    dirn: np.ndarray
    tmin: np.ndarray
    tmax: np.ndarray
    pixel: np.ndarray
    light_index: np.ndarray
    occluded: np.ndarray


@dataclass
class RenderResult:
    image: Optional[np.ndarray]  # rank 0: (H, W, 3) float64; None elsewhere
    stats: RankStats
    shadow_debug: Optional[List[ShadowDebugWave]] = None


def assign_pixels(width: int, height: int, num_ranks: int) -> List[Tuple[int, int]]:
    """Contiguous row blocks: rank r owns rows [r*H//R, (r+1)*H//R)."""
    if num_ranks < 1:
        raise ValueError(f"num_ranks must be >= 1, got {num_ranks}")
    return [(r * height // num_ranks, (r + 1) * height // num_ranks)
            for r in range(num_ranks)]


def gen_primary_batch(ep: RankEndpoint, cam: CameraSpec, width: int, height: int) -> RayBatch:
    """One primary ray per owned pixel, in row-major pixel order.

    The vectorized math mirrors `geom.camera_primary_ray` operation for
    operation so each batch ray is bit-identical to the scalar path.
    """
    row0, row1 = assign_pixels(width, height, ep.R)[ep.rank]
    n = (row1 - row0) * width
    batch = RayBatch.empty(PRIMARY, n)
    if n == 0:
        return batch
    forward, right, cam_up = cam.basis()
    half_h = math.tan(math.radians(cam.fov_y) * 0.5)
    half_w = half_h * cam.aspect
    py, px = np.divmod(np.arange(row0 * width, row1 * width, dtype=np.int64), width)
    sx = ((px + 0.5) / width * 2.0 - 1.0) * half_w
    sy = (1.0 - (py + 0.5) / height * 2.0) * half_h
    dx = forward[0] + sx * right[0] + sy * cam_up[0]
    dy = forward[1] + sx * right[1] + sy * cam_up[1]
    dz = forward[2] + sx * right[2] + sy * cam_up[2]
    ln = np.sqrt(dx * dx + dy * dy + dz * dz)
    batch.org[:] = cam.position
    batch.dirn[:, 0] = dx / ln
    batch.dirn[:, 1] = dy / ln
    batch.dirn[:, 2] = dz / ln
    batch.pixel[:] = py * width + px
    batch.owner[:] = ep.rank
    return batch


def trace_local_round(batch: RayBatch, accel: Accel, stats: Optional[RankStats] = None) -> RayBatch:
    """Test every ray in the batch against the local geometry, in place."""
    n = len(batch)
    if batch.kind == SHADOW:
        if n:
            trace_any_batch(accel.node_lo, accel.node_hi, accel.node_left, accel.node_right,
                            accel.node_first, accel.node_count, accel.root,
                            accel.tri_v, accel.tri_id,
                            batch.org, batch.dirn, batch.tmin, batch.tmax, batch.occluded)
        if stats:
            stats.any_calls += n
    else:
        if n:
            trace_nearest_batch(accel.node_lo, accel.node_hi, accel.node_left, accel.node_right,
                                accel.node_first, accel.node_count, accel.root,
                                accel.tri_v, accel.tri_id,
                                batch.org, batch.dirn, batch.tmin, batch.tmax,
                                batch.best_t, batch.best_gid)
        if stats:
            stats.nearest_calls += n
            if batch.kind == PRIMARY:
                stats.nearest_calls_primary += n
    if stats:
        stats.rays_traced += n
    batch.rounds_completed += 1
    return batch


def cycle_batch(ep: RankEndpoint, batch: RayBatch, accel: Accel,
                options: RenderOptions = RenderOptions(),
                stats: Optional[RankStats] = None) -> RayBatch:
    """Trace the batch on every rank and bring it home.

    R trace rounds with a ring hop after each; the last hop closes the ring
    so the batch ends on its origin rank. With one rank (or cycling
    disabled for the negative test) there is nothing to exchange.
    """
    rounds = 1 if options.disable_cycling else ep.R
    for _ in range(rounds):
        t0 = time.perf_counter()
        trace_local_round(batch, accel, stats)
        nbytes = 0
        if rounds > 1:
            wire = batch.serialize()
            nbytes = len(wire)
            incoming = transport.ring_exchange(ep, wire)
            batch = RayBatch.deserialize(incoming)
        if stats:
            stats.bytes_exchanged += nbytes
            stats.record(options.frame_index, len(batch), nbytes,
                         (time.perf_counter() - t0) * 1e3)
    if batch.rounds_completed != rounds:
        raise AssertionError(
            f"rank {ep.rank}: batch completed {batch.rounds_completed} rounds, expected {rounds}")
    if len(batch) and not options.disable_cycling and batch.owner[0] != ep.rank:
        raise AssertionError(f"cycled batch did not return home (rank {ep.rank})")
    return batch


def shade_and_spawn(batch: RayBatch, ctx: ShadingContext,
                    options: RenderOptions = RenderOptions()
                    ) -> Tuple[Tuple[np.ndarray, np.ndarray], RayBatch, RayBatch]:
    """Shade a fully cycled eye-wave batch on its owner rank.

    Returns ((pixels, rgb) immediate contributions, shadow batch carrying
    pending direct terms in its throughput, reflection batch).
    """
    n = len(batch)
    contrib = np.zeros((n, 3))
    hit = batch.best_gid != MISS_ID
    miss = ~hit
    bg = np.asarray(ctx.background)

    if options.mode == "rankcolor":
        contrib[miss] = bg
        if hit.any():
            idx = ctx.index_of(batch.best_gid[hit])
            contrib[hit] = RANK_PALETTE[ctx.prim_rank[idx] % len(RANK_PALETTE)]
        return (batch.pixel.copy(), contrib), RayBatch.empty(SHADOW), RayBatch.empty(REFLECTION)

    contrib[miss] = batch.throughput[miss] * bg
    h = int(hit.sum())
    if h == 0:
        return (batch.pixel.copy(), contrib), RayBatch.empty(SHADOW), RayBatch.empty(REFLECTION)

    idx = ctx.index_of(batch.best_gid[hit])
    n_g = ctx.normal[idx]
    albedo = ctx.albedo[idx]
    mirror = ctx.mirror[idx]
    d = batch.dirn[hit]
    thr = batch.throughput[hit]
    # shading normal faces the incoming ray; triangles are double-sided
    facing = np.sum(n_g * d, axis=1)
    n_s = np.where((facing > 0.0)[:, None], -n_g, n_g)
    contrib[hit] = thr * options.ambient * albedo
    p = batch.org[hit] + batch.best_t[hit][:, None] * d
    eps = SHADOW_EPS_SCALE * ctx.scene_diag

    num_lights = len(ctx.lights)
    shadow = RayBatch.empty(SHADOW, h * num_lights)
    for li, light in enumerate(ctx.lights):
        if light.kind == "point":
            delta = np.asarray(light.position) - p
            dist = np.sqrt(np.sum(delta * delta, axis=1))
            safe = np.where(dist == 0.0, 1.0, dist)
            l_dir = delta / safe[:, None]
            l_dir[dist == 0.0] = (0.0, 0.0, 1.0)
            tmax = dist
        else:
            l_dir = np.broadcast_to(-np.asarray(light.direction), (h, 3)).copy()
            tmax = np.full(h, np.inf)
        n_dot_l = np.maximum(0.0, np.sum(n_s * l_dir, axis=1))
        pending = thr * albedo * np.asarray(light.intensity) * n_dot_l[:, None]
        toward = np.where((np.sum(n_g * l_dir, axis=1) >= 0.0)[:, None], n_g, -n_g)
        sl = slice(li, h * num_lights, num_lights)  # parent-major, light-minor order
        shadow.org[sl] = p + eps * toward
        shadow.dirn[sl] = l_dir
        shadow.tmax[sl] = tmax
        shadow.throughput[sl] = pending
        shadow.light_index[sl] = li
    hit_pix = batch.pixel[hit]
    hit_owner = batch.owner[hit]
    hit_depth = batch.depth[hit]
    shadow.pixel[:] = np.repeat(hit_pix, num_lights)
    shadow.owner[:] = np.repeat(hit_owner, num_lights)
    shadow.depth[:] = np.repeat(hit_depth, num_lights)

    refl_mask = (np.any(mirror > 0.0, axis=1)) & (hit_depth < options.max_depth)
    r = int(refl_mask.sum())
    refl = RayBatch.empty(REFLECTION, r)
    if r:
        rd = d[refl_mask] - 2.0 * np.sum(d[refl_mask] * n_s[refl_mask], axis=1)[:, None] * n_s[refl_mask]
        ln = np.sqrt(np.sum(rd * rd, axis=1))
        refl.org[:] = p[refl_mask] + eps * n_s[refl_mask]
        refl.dirn[:] = rd / ln[:, None]
        refl.pixel[:] = hit_pix[refl_mask]
        refl.owner[:] = hit_owner[refl_mask]
        refl.throughput[:] = thr[refl_mask] * mirror[refl_mask]
        refl.depth[:] = hit_depth[refl_mask] + 1
    return (batch.pixel.copy(), contrib), shadow, refl


def apply_shadow_contribs(fb: np.ndarray, pixel_base: int, shadow: RayBatch,
                          num_lights: int) -> None:
    """Add pending direct terms of unoccluded shadow rays, light by light.

    Per wave each (pixel, light) pair occurs at most once, so the adds
    within one light are collision-free; looping lights in index order
    fixes the per-pixel accumulation order.
    """
    for li in range(num_lights):
        m = (shadow.light_index == li) & (shadow.occluded == 0)
        if m.any():
            fb[shadow.pixel[m] - pixel_base] += shadow.throughput[m]


def render_digest(cam: CameraSpec, width: int, height: int, options: RenderOptions,
                  lights: Sequence[Light], background: Vec3) -> bytes:
    """Content digest of every render-relevant collective parameter."""
    doc = {
        "cam": [list(cam.position), list(cam.view_dir), list(cam.up), cam.fov_y, cam.aspect],
        "size": [width, height],
        "maxDepth": options.max_depth,
        "mode": options.mode,
        "ambient": options.ambient,
        "disableCycling": options.disable_cycling,
        "lights": [[l.kind, list(l.position or ()), list(l.direction or ()), list(l.intensity)]
                   for l in lights],
        "background": list(background),
    }
    return hashlib.sha256(json.dumps(doc, separators=(",", ":")).encode("utf-8")).digest()


def verify_collective_digest(ep: RankEndpoint, digest: bytes) -> None:
    """Fail on every rank, before any tracing, if digests diverge."""
    root_digest = transport.broadcast_from_root(ep, digest if ep.rank == 0 else None)
    ok = b"\x01" if root_digest == digest else b"\x00"
    votes = transport.gather_to_root(ep, ok)
    if ep.rank == 0:
        bad = [r for r, v in enumerate(votes) if v != b"\x01"]
        verdict = json.dumps(bad).encode("utf-8")
    else:
        verdict = None
    bad = json.loads(transport.broadcast_from_root(ep, verdict))
    if bad:
        raise ContractError(
            f"collective render parameters diverge from rank 0 on ranks {bad}")


_TILE_HEADER = struct.Struct("<QQ")


def _tile_bytes(row0: int, row1: int, fb: np.ndarray) -> bytes:
    return _TILE_HEADER.pack(row0, row1) + fb.tobytes()


def _assemble_tiles(tiles: List[bytes], width: int, height: int) -> np.ndarray:
    image = np.zeros((height, width, 3))
    for tile in tiles:
        row0, row1 = _TILE_HEADER.unpack_from(tile, 0)
        data = np.frombuffer(tile, np.float64, offset=_TILE_HEADER.size)
        image[row0:row1] = data.reshape(row1 - row0, width, 3)
    return image


def render_with(ep: RankEndpoint, accel: Accel, ctx: ShadingContext, cam: CameraSpec,
                width: int, height: int,
                options: RenderOptions = RenderOptions()) -> RenderResult:
    """Collective render given this rank's BVH and the replicated shading data."""
    stats = RankStats()
    verify_collective_digest(ep, render_digest(cam, width, height, options,
                                               ctx.lights, ctx.background))
    row0, row1 = assign_pixels(width, height, ep.R)[ep.rank]
    pixel_base = row0 * width
    fb = np.zeros(((row1 - row0) * width, 3))
    shadow_debug: Optional[List[ShadowDebugWave]] = [] if options.collect_shadow_debug else None

    eye = gen_primary_batch(ep, cam, width, height)
    for _ in range(options.max_depth + 1):
        eye = cycle_batch(ep, eye, accel, options, stats)
        (pixels, rgb), shadow, refl = shade_and_spawn(eye, ctx, options)
        fb[pixels - pixel_base] += rgb  # one eye ray per pixel: collision-free
        shadow = cycle_batch(ep, shadow, accel, options, stats)
        if shadow_debug is not None:
            shadow_debug.append(ShadowDebugWave(
                shadow.org.copy(), shadow.dirn.copy(), shadow.tmin.copy(),
                shadow.tmax.copy(), shadow.pixel.copy(), shadow.light_index.copy(),
                shadow.occluded.copy()))
        apply_shadow_contribs(fb, pixel_base, shadow, len(ctx.lights))
        eye = refl

    tiles = transport.gather_to_root(ep, _tile_bytes(row0, row1, fb))
    if ep.rank == 0:
        return RenderResult(_assemble_tiles(tiles, width, height), stats, shadow_debug)
    return RenderResult(None, stats, shadow_debug)


def render_frame(ep: RankEndpoint, scene: SceneDesc, partition: Partition,
                 cam: CameraSpec, width: int, height: int,
                 options: RenderOptions = RenderOptions()) -> RenderResult:
    """Collective render of a partitioned scene; image lands on rank 0."""
    ctx = ShadingContext.from_scene(scene, partition)
    accel = build_bvh(partition.local_sets[ep.rank])
    return render_with(ep, accel, ctx, cam, width, height, options)


def tone_map_rgb8(image: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] then quantize to 8 bits, rounding half up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
