"""Command line entry point.

Single file:    heatmap-viewer render --in epoch1_attn_flow.csv --out flow.png
Run directory:  heatmap-viewer render --in runs/smoke --out plots/ [--shared-scale]
"""

import argparse
import sys
from pathlib import Path

from heatmap_viewer.matrices import ParseError
from heatmap_viewer.render import render, render_run

EXIT_PARSE = 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="heatmap-viewer",
        description="Render flow/cost matrix CSV exports as heatmap images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one CSV or every export in a run")
    p.add_argument("--in", dest="source", required=True,
                   help="a matrix CSV, or a run directory for batch mode")
    p.add_argument("--out", dest="out", required=True,
                   help="output image path (single file) or directory (batch)")
    p.add_argument("--shared-scale", action="store_true",
                   help="batch mode: share one color range per matrix kind "
                        "across epochs instead of normalizing per matrix")
    args = parser.parse_args(argv)

    source = Path(args.source)
    try:
        if source.is_dir():
            outputs = render_run(source, args.out, shared_scale=args.shared_scale)
        else:
            outputs = [render(source, args.out)]
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
