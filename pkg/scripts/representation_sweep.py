#!/usr/bin/env python3
"""Sweep displacement-map resolution and report reconstruction error vs size.

Bakes one synthetic wrinkled head at several map resolutions and prints the
mae / p95 / storage-ratio table used to pick the default resolution.
"""
import argparse
import time

from facekit.displacement import bake_displacement, representation_error
from facekit.synthetic import SyntheticSpec, generate_subject


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tier", default="default", choices=("tiny", "small", "default"))
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--subdiv", type=int, default=2)
    ap.add_argument("--resolutions", default="256,512,1024,2048")
    args = ap.parse_args()

    subj = generate_subject(SyntheticSpec(id_seed=args.seed, tier=args.tier), 2)
    base = subj.base_mesh(1)
    raw = subj.raw_mesh(1)
    print(f"base {base.n_vertices} verts, raw {raw.n_vertices} verts")
    print(f"{'res':>6} {'mae mm':>9} {'p95 mm':>9} {'ratio':>8} {'map KB':>8} {'secs':>6}")
    for res in (int(r) for r in args.resolutions.split(",")):
        t0 = time.monotonic()
        dmap = bake_displacement(base, raw, res, smooth_raw=False)
        stats = representation_error(raw, base, dmap, args.subdiv)
        dt = time.monotonic() - t0
        print(f"{res:>6} {stats['mae']:>9.4f} {stats['p95']:>9.4f} "
              f"{stats['size_ratio']:>8.4f} {stats['map_bytes'] // 1024:>8} {dt:>6.1f}")


if __name__ == "__main__":
    main()
