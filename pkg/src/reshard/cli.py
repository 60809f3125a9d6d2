"""Command line: replay scenario scripts, print plans, generate model presets."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ReshardError, ScriptError
from .scenario import PRESETS, dry_run, gen_synthetic, load_script, run


def _cmd_run(args) -> int:
    script = load_script(args.script)
    metrics, code = run(script, verify=args.verify, mode=args.mode, workers=args.workers, seed=args.seed,
                        figures=args.figures)
    for rec in metrics.records:
        print(f"[event {rec.index}] {rec.event}")
        for k, v in rec.row().items():
            print(f"{k}={v}")
        if rec.report is not None:
            sys.stdout.write(rec.report.to_text())
    print(f"cumulative_bytes={metrics.cumulative_bytes}")
    for v in metrics.violations:
        print(f"violation: {v}", file=sys.stderr)
    print(f"status={'ok' if code == 0 else 'violation'}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(metrics.to_tsv())
    return code


def _cmd_dry_run(args) -> int:
    sys.stdout.write(dry_run(load_script(args.script)))
    return 0


def _cmd_gen(args) -> int:
    sizes = {}
    for kv in args.sizes:
        k, sep, v = kv.partition("=")
        if not sep:
            raise ScriptError(f"size arguments look like L=4, got {kv!r}")
        sizes[k] = v
    tensors = gen_synthetic(args.preset, **sizes)["model"]["tensors"]
    # one tensor per line keeps the catalog readable and diffable
    rows = ",\n".join("  " + json.dumps(t) for t in tensors)
    sys.stdout.write('{"model": {"tensors": [\n' + rows + "\n]}}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reshard", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="replay a scenario script on a simulated cluster")
    r.add_argument("script")
    r.add_argument("--verify", action="store_true", help="check state digests after every reconfiguration")
    r.add_argument("--mode", choices=("distributed", "central"), default="distributed")
    r.add_argument("--workers", choices=("processes", "inprocess"), default="inprocess")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", help="write per-event metrics as TSV")
    r.add_argument("--figures", metavar="DIR", help="write traffic figures (PNG) into DIR")
    r.set_defaults(func=_cmd_run)

    d = sub.add_parser("dry-run", help="print plans and cost tables without running anything")
    d.add_argument("script")
    d.set_defaults(func=_cmd_dry_run)

    g = sub.add_parser("gen", help="emit a synthetic model catalog")
    g.add_argument("preset", help=f"one of {', '.join(PRESETS)}")
    g.add_argument("sizes", nargs="*", help="overrides such as L=4 d=8")
    g.set_defaults(func=_cmd_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ReshardError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
