"""plotkit command line: render one figure or a whole export directory."""

from __future__ import annotations

import argparse
import logging
import sys

from .io import FigureSpec, KINDS, PlotkitError, default_sidecar
from .render import render, render_all


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plotkit", description="render exported artifacts")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render one CSV export")
    r.add_argument("--kind", required=True, choices=KINDS)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--sidecar", default=None)
    r.add_argument("--title", default=None)

    a = sub.add_parser("render-all", help="render every export in a directory")
    a.add_argument("--dir", required=True)
    a.add_argument("--out-dir", default=None)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "render":
            spec = FigureSpec(
                input_csv=args.input,
                sidecar=args.sidecar or default_sidecar(args.input),
                kind=args.kind,
                output=args.out,
                title=args.title,
            )
            render(spec)
            print(f"wrote {args.out}")
        else:
            images = render_all(args.dir, args.out_dir)
            print(f"rendered {len(images)} figures")
        return 0
    except PlotkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
