#!/usr/bin/env python3
"""Generate an unevenly clustered triangle-cloud scene document.

The output is the stand-in for simulation data whose elements are
lopsidedly distributed in space, which is what makes arbitrary rank
assignments interesting to render.
"""

import argparse
from pathlib import Path

from dprt.scene import generate_uneven_cloud, serialize_scene


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--count", type=int, default=10_000, help="number of triangles")
    parser.add_argument("--clusters", type=int, default=4)
    parser.add_argument("--out", type=Path, default=Path("cloud.json"))
    args = parser.parse_args()
    scene = generate_uneven_cloud(args.seed, args.count, args.clusters)
    args.out.write_bytes(serialize_scene(scene))
    print(f"wrote {args.out} ({args.count} triangles, {args.clusters} clusters, seed {args.seed})")


if __name__ == "__main__":
    main()
