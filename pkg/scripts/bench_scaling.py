#!/usr/bin/env python3
"""Measure per-frame wall time as the rank count grows on fixed data.

Data-parallel ray tracing adds a full ring cycle per wave, so adding ranks
to a fixed-size problem does not reduce frame time; this script records
that behavior. Report only: nothing here asserts.
"""

import argparse
import time

from dprt.engine import RenderOptions, render_frame
from dprt.cli import default_camera
from dprt.scene import generate_uneven_cloud, partition_scene
from dprt.transport import run_collective


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--triangles", type=int, default=10_000)
    parser.add_argument("--size", type=int, default=256, help="image width and height")
    parser.add_argument("--frames", type=int, default=3, help="frames per rank count")
    parser.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 3, 4, 6, 8])
    parser.add_argument("--partition", default="spatialSlab",
                        choices=("roundRobin", "spatialSlab"))
    args = parser.parse_args()

    scene = generate_uneven_cloud(1, args.triangles, 4)
    cam = default_camera(scene, args.size, args.size)
    print(f"# {args.triangles} triangles, {args.size}x{args.size}, "
          f"{args.partition}, best of {args.frames} frames")
    print(f"{'R':>3} {'ms/frame':>10} {'rays':>12} {'MB exchanged':>13}")
    for ranks in args.ranks:
        partition = partition_scene(scene, ranks, args.partition)

        def body(ep):
            return render_frame(ep, scene, partition, cam, args.size, args.size,
                                RenderOptions(max_depth=1))

        run_collective(ranks, body)  # warm compile caches
        best = float("inf")
        stats = None
        for _ in range(args.frames):
            t0 = time.perf_counter()
            results = run_collective(ranks, body)
            best = min(best, (time.perf_counter() - t0) * 1e3)
            stats = results
        rays = sum(r.stats.rays_traced for r in stats)
        nbytes = sum(r.stats.bytes_exchanged for r in stats)
        print(f"{ranks:>3} {best:>10.1f} {rays:>12} {nbytes / 1e6:>13.1f}")


if __name__ == "__main__":
    main()
