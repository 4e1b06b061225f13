"""Command-line surface: project, geodesics, register, match, eval."""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import io_formats as io
from .core import normalize_cloud
from .geodesics import build_laplacian, heat_geodesic_matrix
from .matching import hard_match
from .metrics import accuracy, euclidean_error, geodesic_error
from .projection import AXES, project_depth, smooth_and_colorize
from .runconfig import ConfigError, load_config, build_solver_config
from .solver import SolverError, match_pair


def _thread_cap():
    raw = os.environ.get("DVM_THREADS", "")
    try:
        return max(1, int(raw)) if raw else None
    except ValueError:
        return None


def _write_history_log(path, report):
    deform_name = "L_deform_unilateral" if report.mode == "partial" else "L_deform"
    with open(path, "w") as fh:
        for h in report.history:
            fh.write(
                f"iter {h['iter']}: {deform_name}={h['deform']:.9g} "
                f"L_arap={h['arap']:.9g} L_smooth={h['smooth']:.9g} "
                f"L_geo={h['geo']:.9g} total={h['total']:.9g}\n"
            )
        fh.write(f"converged={report.converged} wall_time={report.wall_time:.3f}s\n")


def cmd_project(args):
    cloud = io.read_cloud(args.cloud)
    cloud, _ = normalize_cloud(cloud)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(axis):
        img, rec = project_depth(cloud, axis, args.height, args.width)
        color = smooth_and_colorize(img)
        return axis, color, rec

    cap = _thread_cap()
    workers = min(3, cap) if cap else 3
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, AXES))
    else:
        results = [one(axis) for axis in AXES]
    for axis, color, rec in sorted(results, key=lambda r: AXES.index(r[0])):
        io.write_png(out / f"{axis}.png", color)
        io.write_dvpr(out / f"{axis}.dvpr", rec)
    print(f"wrote {len(AXES)} views to {out}")
    return 0


def cmd_geodesics(args):
    cloud = io.read_cloud(args.cloud)
    lap = build_laplacian(cloud, k=args.k)
    geo = heat_geodesic_matrix(lap, cloud, time_multiplier=args.time_multiplier)
    io.write_dvgm(args.out, geo)
    print(f"wrote {len(geo)}x{len(geo)} geodesic matrix to {args.out}")
    return 0


def _run_match(args):
    source = io.read_cloud(args.source)
    target = io.read_cloud(args.target)
    values = load_config(args.config, overrides={
        "mode": args.mode, "seed": args.seed,
    })
    cfg = build_solver_config(values)
    feats_s, feats_t = args.features_source, args.features_target
    for label, feats in (("source", feats_s), ("target", feats_t)):
        if feats is not None and not Path(feats).is_dir():
            print(f"notice: {label} feature directory {feats} not found; "
                  f"falling back to positional encoding only", file=sys.stderr)
            if label == "source":
                feats_s = None
            else:
                feats_t = None
    dense_map, report = match_pair(
        source, target, config=cfg,
        features_source=feats_s, features_target=feats_t,
        compute_geodesics=values["compute_geodesics"],
        laplacian_k=values["laplacian_k"],
        heat_time_multiplier=values["heat_time_multiplier"],
    )
    return source, target, dense_map, report


def cmd_register(args):
    source, target, dense_map, report = _run_match(args)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_dense_map(f"{prefix}.map", dense_map)
    io.write_dvtx(f"{prefix}.dvtx", report.transforms)
    _write_history_log(f"{prefix}.log", report)
    print(f"wrote {prefix}.map, {prefix}.dvtx, {prefix}.log")
    return 0


def _metric_rows(dense_map, gt, target, geo, tolerances):
    rows = [("euclidean_error", euclidean_error(dense_map, gt, target))]
    for eps in tolerances:
        rows.append((f"accuracy({eps:g})", accuracy(dense_map, gt, target, eps)))
    if geo is not None:
        rows.append(("geodesic_error", geodesic_error(dense_map, gt, geo, target=target)))
    return rows


def _print_metrics(rows, fmt):
    if fmt == "tsv":
        print("metric\tvalue")
        for name, val in rows:
            print(f"{name}\t{val:.9g}")
    else:
        width = max(len(name) for name, _ in rows)
        for name, val in rows:
            print(f"{name:<{width}}  {val:.6f}")


def cmd_eval(args):
    dense_map = io.read_dense_map(args.map)
    gt = io.read_dense_map(args.ground_truth)
    target = io.read_cloud(args.target)
    geo = io.read_dvgm(args.geodesics) if args.geodesics else None
    rows = _metric_rows(dense_map, gt, target, geo,
                        [float(t) for t in args.tolerances])
    _print_metrics(rows, args.format)
    return 0


def cmd_match(args):
    source, target, dense_map, report = _run_match(args)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_dense_map(f"{prefix}.map", dense_map)
    io.write_dvtx(f"{prefix}.dvtx", report.transforms)
    _write_history_log(f"{prefix}.log", report)
    gt = io.read_dense_map(args.ground_truth) if args.ground_truth else None
    if gt is not None:
        norm_target, _ = normalize_cloud(target)
        geo = io.read_dvgm(args.geodesics) if args.geodesics else None
        rows = _metric_rows(dense_map, gt, norm_target, geo,
                            [float(t) for t in args.tolerances])
        baseline = hard_match(normalize_cloud(source)[0].points, norm_target.points)
        rows.append(("baseline_euclidean_error",
                     euclidean_error(baseline, gt, norm_target)))
        _print_metrics(rows, args.format)
    print(f"wrote {prefix}.map, {prefix}.dvtx, {prefix}.log")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dvmatch",
        description="Dense correspondence between non-rigidly deforming point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="write multi-view depth projections")
    p.add_argument("cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=224)
    p.add_argument("--width", type=int, default=224)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("geodesics", help="write the all-pairs geodesic matrix")
    p.add_argument("cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--time-multiplier", type=float, default=1.0)
    p.set_defaults(func=cmd_geodesics)

    def matching_args(p):
        p.add_argument("source")
        p.add_argument("target")
        p.add_argument("--out", required=True, help="output prefix")
        p.add_argument("--config", default=None)
        p.add_argument("--mode", choices=["full", "partial"], default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--features-source", default=None,
                       help="directory holding {z,x,y}.dvfm view features")
        p.add_argument("--features-target", default=None)

    p = sub.add_parser("register", help="estimate the dense map for one pair")
    matching_args(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("match", help="register and evaluate in one run")
    matching_args(p)
    p.add_argument("--ground-truth", default=None)
    p.add_argument("--geodesics", default=None, help="target DVGM for geodesic error")
    p.add_argument("--tolerances", nargs="*", default=["0.01"])
    p.add_argument("--format", choices=["text", "tsv"], default="text")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score a dense map against ground truth")
    p.add_argument("map")
    p.add_argument("ground_truth")
    p.add_argument("target")
    p.add_argument("--geodesics", default=None)
    p.add_argument("--tolerances", nargs="*", default=["0.01"])
    p.add_argument("--format", choices=["text", "tsv"], default="text")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (io.FormatError, ConfigError, SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
