"""Sidecar CLI: extract feature maps from projected views, or self-check a backbone."""

from __future__ import annotations

import argparse
import sys

from .extract import ExtractorConfig, ExtractorError, extract, selfcheck


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dvm-sidecar",
        description="Per-pixel feature map producer (writes DVFM files)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write one DVFM per input image")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", default="pyramid-stat")
    p.add_argument("--upsampler", default="none")
    p.add_argument("--device", default="cpu")
    p.add_argument("--channels", type=int, default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("selfcheck", help="run a fixed synthetic image, print a report")
    p.add_argument("--backbone", default="pyramid-stat")
    p.add_argument("--upsampler", default="none")
    p.add_argument("--device", default="cpu")
    p.add_argument("--channels", type=int, default=None)
    p.set_defaults(func=cmd_selfcheck)
    return parser


def cmd_extract(args):
    cfg = ExtractorConfig(backbone=args.backbone, upsampler=args.upsampler,
                          device=args.device, channels=args.channels)
    written = extract(args.images, args.out, cfg)
    for path in written:
        print(path)
    return 0


def cmd_selfcheck(args):
    cfg = ExtractorConfig(backbone=args.backbone, upsampler=args.upsampler,
                          device=args.device, channels=args.channels)
    report = selfcheck(cfg)
    for key, val in report.items():
        print(f"{key}: {val}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExtractorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
