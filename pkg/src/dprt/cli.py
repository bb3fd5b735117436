"""Command-line harness: offline rendering, benchmarking, rank-color
visualization, and the remote rendering service."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import engine, ppm, service, transport
from .engine import RankStats, RenderOptions, tone_map_rgb8
from .errors import DprtError
from .geom import CameraSpec, add, normalize, scale, sub
from .scene import (SceneDesc, parse_scene, partition_scene, timestep_cache_for)

PARTITION_FLAG = {"roundrobin": "roundRobin", "slab": "spatialSlab", "fromfile": "fromFile"}


def default_camera(scene: SceneDesc, width: int, height: int, fov_y: float = 45.0) -> CameraSpec:
    """Deterministic auto-framing: back off along a fixed diagonal."""
    box = scene.bounds()
    if box.is_empty():
        center, radius = (0.0, 0.0, 0.0), 1.0
    else:
        center = scale(add(box.lo, box.hi), 0.5)
        radius = max(box.diagonal() * 0.5, 1e-6)
    offset = scale(normalize((0.75, 0.55, 1.0)), 2.2 * radius)
    position = add(center, offset)
    return CameraSpec(position, normalize(sub(center, position)), (0.0, 1.0, 0.0),
                      fov_y, width / height)


def camera_from_flag(spec: str, width: int, height: int, fov_y: float) -> CameraSpec:
    vals = [float(v) for v in spec.split(",")]
    if len(vals) != 6:
        raise DprtError("--camera needs 6 numbers: px,py,pz,tx,ty,tz")
    position = tuple(vals[0:3])
    target = tuple(vals[3:6])
    return CameraSpec(position, normalize(sub(target, position)), (0.0, 1.0, 0.0),
                      fov_y, width / height)


def load_scene(args) -> SceneDesc:
    path = Path(args.scene)
    scene = parse_scene(path.read_bytes(), base_dir=path.parent)
    if args.timestep is not None:
        cache = timestep_cache_for(scene, path.parent, capacity=args.timestep_cache)
        scene = cache.fetch(args.timestep)
    return scene


def aggregate_records(all_stats: List[RankStats]) -> List[str]:
    """Merge per-rank round records: sum rays/bytes, keep the slowest rank."""
    merged = {}
    for st in all_stats:
        for line in st.records:
            fields = dict(kv.split("=") for kv in line.split())
            key = (int(fields["frame"]), int(fields["round"]))
            rays, nbytes, ms = (int(fields["raysTraced"]), int(fields["bytesExchanged"]),
                                float(fields["millis"]))
            if key in merged:
                r0, b0, m0 = merged[key]
                merged[key] = (r0 + rays, b0 + nbytes, max(m0, ms))
            else:
                merged[key] = (rays, nbytes, ms)
    return [f"frame={f} round={r} raysTraced={rays} bytesExchanged={nbytes} millis={ms:.3f}"
            for (f, r), (rays, nbytes, ms) in sorted(merged.items())]


def _emit_records(lines: List[str], stats_log: Optional[str]) -> None:
    if stats_log:
        with open(stats_log, "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    else:
        for line in lines:
            print(line)


def _render_options(args, frame_index: int = 0) -> RenderOptions:
    return RenderOptions(max_depth=args.max_depth, mode=args.mode, ambient=args.ambient,
                         disable_cycling=args.disable_cycling, frame_index=frame_index)


def cmd_render(args) -> int:
    scene = load_scene(args)
    partition = partition_scene(scene, args.ranks, PARTITION_FLAG[args.partition])
    if args.camera:
        cam = camera_from_flag(args.camera, args.width, args.height, args.fovy)
    else:
        cam = default_camera(scene, args.width, args.height, args.fovy)
    options = _render_options(args)

    def body(ep):
        return engine.render_frame(ep, scene, partition, cam, args.width, args.height, options)

    results = transport.run_collective(args.ranks, body, backend=args.backend)
    image = tone_map_rgb8(results[0].image)
    ppm.write_ppm(args.out, image)
    _emit_records(aggregate_records([r.stats for r in results]), args.stats_log)
    print(f"wrote {args.out} ({args.width}x{args.height}, {args.ranks} ranks, {args.partition})")
    return 0


def cmd_bench(args) -> int:
    scene = load_scene(args)
    partition = partition_scene(scene, args.ranks, PARTITION_FLAG[args.partition])
    cam = default_camera(scene, args.width, args.height, args.fovy)
    lines: List[str] = []
    pixels = args.width * args.height
    for frame_index in range(args.frames):
        options = _render_options(args, frame_index)

        def body(ep):
            return engine.render_frame(ep, scene, partition, cam, args.width, args.height, options)

        t0 = time.perf_counter()
        results = transport.run_collective(args.ranks, body, backend=args.backend)
        wall_ms = (time.perf_counter() - t0) * 1e3
        stats = [r.stats for r in results]
        primary_calls = sum(s.nearest_calls_primary for s in stats)
        if primary_calls != pixels * args.ranks:
            raise DprtError(
                f"work accounting violated: primary intersect calls {primary_calls}, "
                f"expected pixels*R = {pixels * args.ranks}")
        lines.extend(aggregate_records(stats))
        lines.append(
            f"frame={frame_index} round=-1 raysTraced={sum(s.rays_traced for s in stats)} "
            f"bytesExchanged={sum(s.bytes_exchanged for s in stats)} millis={wall_ms:.3f}")
    _emit_records(lines, args.stats_log)
    print(f"bench ok: {args.frames} frames, {args.ranks} ranks, "
          f"work accounting primary={pixels * args.ranks} verified")
    return 0


def cmd_serve(args) -> int:
    scene = load_scene(args)
    partition = partition_scene(scene, args.ranks, PARTITION_FLAG[args.partition])
    options = service.ServeOptions(
        host=args.host, port=args.port, stats_path=args.stats_log,
        ambient=args.ambient, max_depth=args.max_depth, mode=args.mode,
        on_listening=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", flush=True))

    def body(ep):
        return service.serve_session(ep, scene, partition, options)

    results = transport.run_collective(args.ranks, body, backend=args.backend)
    report = results[0]
    print(f"session ended after {report.frames_sent} frames")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dprt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required: bool):
        p.add_argument("--scene", required=True, help="scene document path")
        p.add_argument("--ranks", type=int, default=1)
        p.add_argument("--backend", choices=("inproc", "socket"), default="inproc")
        p.add_argument("--partition", choices=tuple(PARTITION_FLAG), default="roundrobin")
        p.add_argument("--width", type=int, default=256)
        p.add_argument("--height", type=int, default=256)
        p.add_argument("--max-depth", type=int, default=1)
        p.add_argument("--ambient", type=float, default=0.1)
        p.add_argument("--fovy", type=float, default=45.0)
        p.add_argument("--camera", help="px,py,pz,tx,ty,tz override of the auto camera")
        p.add_argument("--timestep", type=int, default=None, help="render this time step")
        p.add_argument("--timestep-cache", type=int, default=2, help="resident time steps")
        p.add_argument("--disable-cycling", action="store_true",
                       help="debug: trace rays only on their origin rank")
        p.add_argument("--stats-log", help="append per-round stats records to this file")
        if out_required:
            p.add_argument("--out", required=True, help="output PPM path")

    render = sub.add_parser("render", help="render one frame to a binary PPM")
    common(render, out_required=True)
    render.add_argument("--mode", choices=("shaded", "rankcolor"), default="shaded")
    render.set_defaults(fn=cmd_render)

    rankviz = sub.add_parser("rankviz", help="render colored by rank assignment")
    common(rankviz, out_required=True)
    rankviz.set_defaults(fn=cmd_render, mode="rankcolor")

    bench = sub.add_parser("bench", help="render repeatedly and emit stats records")
    common(bench, out_required=False)
    bench.add_argument("--mode", choices=("shaded", "rankcolor"), default="shaded")
    bench.add_argument("--frames", type=int, default=3)
    bench.set_defaults(fn=cmd_bench)

    serve = sub.add_parser("serve", help="run the thin-client rendering service")
    common(serve, out_required=False)
    serve.add_argument("--mode", choices=("shaded", "rankcolor"), default="shaded")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    serve.set_defaults(fn=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DprtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
