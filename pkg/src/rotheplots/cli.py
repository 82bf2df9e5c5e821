"""Command-line figure rendering: one spec file, or a whole bundle.

    plots render --spec figure.json
    plots all --bundle <diagnostics output dir> [--out <figure dir>]

A spec file is a JSON object with the FigureSpec fields (`inputs`, `kind`,
`out`, and optionally `xlabel`, `ylabel`, `title`, `guides`, `report`,
`annotate`).  Exit codes: 0 all figures rendered, 2 bad inputs.
"""

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .figures import FigureError, FigureSpec, bundle_specs, render


def _fail(msg):
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _cmd_render(args):
    path = Path(args.spec)
    if not path.is_file():
        return _fail(f"no such spec file: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        return _fail(f"spec file is not valid JSON: {e}")
    if not isinstance(payload, dict):
        return _fail("spec file must hold a JSON object")
    try:
        spec = FigureSpec(**payload)
    except (TypeError, FigureError) as e:
        return _fail(str(e))
    try:
        out = render(spec)
    except FigureError as e:
        return _fail(str(e))
    print(out)
    return 0


def _cmd_all(args):
    bundle = Path(args.bundle)
    if not bundle.is_dir():
        return _fail(f"no such bundle directory: {bundle}")
    specs = bundle_specs(bundle, out_dir=args.out)
    if not specs:
        return _fail(f"no known CSV tables under {bundle}")
    failures = 0
    for spec in specs:
        try:
            print(render(spec))
        except FigureError as e:
            failures += 1
            print(f"error: {spec.inputs[0]}: {e}", file=sys.stderr)
    return 2 if failures else 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Render the flow lab's CSV tables into figures.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_render = sub.add_parser("render", help="render one figure spec")
    p_render.add_argument("--spec", required=True,
                          help="JSON file with FigureSpec fields")
    p_render.set_defaults(func=_cmd_render)

    p_all = sub.add_parser("all", help="render every known CSV in a bundle")
    p_all.add_argument("--bundle", required=True,
                       help="diagnostics output directory")
    p_all.add_argument("--out", default=None,
                       help="figure directory (default: <bundle>/figures)")
    p_all.set_defaults(func=_cmd_all)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
