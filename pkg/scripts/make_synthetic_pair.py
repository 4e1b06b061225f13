#!/usr/bin/env python3
"""Generate a synthetic deformable pair (lumpy sheet + analytic bend) with ground truth.

Writes source.xyz, target.xyz and gt.txt (identity map by construction) into
the output directory, ready for `dvmatch match`.
"""

import argparse
from pathlib import Path

import numpy as np

from dvmatch.core import PointCloud
from dvmatch.io_formats import write_dense_map, write_xyz


def lumpy_sheet(rng, n, r0=0.25, length=2.0, width=2.2):
    s = rng.uniform(0, length, n)
    y = rng.uniform(0, width, n)
    r = r0 * (1.0 + 0.3 * np.sin(3.0 * s) + 0.2 * np.cos(7.0 * s))
    z = r * (0.6 + 0.4 * np.sin(np.pi * y / width))
    return np.column_stack([s, y, z])


def bend_sheet(pts, curvature):
    rb = 1.0 / curvature
    s, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    beta = s * curvature
    return np.column_stack([(rb - z) * np.sin(beta), y, rb - (rb - z) * np.cos(beta)])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--points", type=int, default=1000)
    ap.add_argument("--curvature", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--crop", type=float, default=None,
                    help="keep only the source points with s <= crop (partial setup)")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    source = lumpy_sheet(rng, args.points)
    target = bend_sheet(source, args.curvature)
    gt = np.arange(args.points)
    if args.crop is not None:
        keep = source[:, 0] <= args.crop
        source, gt = source[keep], gt[keep]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_xyz(out / "source.xyz", PointCloud(source))
    write_xyz(out / "target.xyz", PointCloud(target))
    write_dense_map(out / "gt.txt", gt)
    print(f"wrote {len(source)} source / {len(target)} target points to {out}")


if __name__ == "__main__":
    main()
