"""Entry point: plots <kind> --run DIR --out FILE.

Reads one CSV out of the run directory (read-only) and writes the figure
as both PNG and SVG next to the requested output path. Exit codes: 0 on
success, 2 on a schema or argument problem (diagnostic on stderr), 3
when the needed CSV is missing.
"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, render, spec_for_run
from .schemas import MissingInput, SchemaError


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plots", description=__doc__.split("\n\n")[0])
    parser.add_argument("kind", choices=KINDS, help="figure kind")
    parser.add_argument("--run", required=True, help="run directory holding the CSVs")
    parser.add_argument("--out", required=True, help="output image path (.png or .svg)")
    parser.add_argument("--title", default="", help="optional figure title")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        spec = spec_for_run(args.kind, args.run, args.out, title=args.title)
        png, svg = render(spec)
    except SchemaError as exc:
        print(f"plots: schema error: {exc}", file=sys.stderr)
        return 2
    except MissingInput as exc:
        print(f"plots: missing input: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {png} and {svg}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
