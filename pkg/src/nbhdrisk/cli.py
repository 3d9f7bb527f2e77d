"""Command line entry point: ``nbhdrisk <stage> --config run.json``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import pipeline
from .ingest import SyntheticSpec, generate_synthetic, write_factor_table

log = logging.getLogger("nbhdrisk")

STAGES = ("ingest", "pollution", "scan", "cluster", "fit", "select")


def _add_common(p):
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="nbhdrisk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run every stage and write report.json"))
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage only")
        _add_common(p)
        if name == "fit":
            p.add_argument("--factors", default=None,
                           help="comma-separated smooth terms (default: selected group)")
    syn = sub.add_parser("synth", help="write a synthetic neighborhoods.csv from a spec JSON")
    syn.add_argument("spec")
    syn.add_argument("--out", required=True, help="CSV path to write")
    ex = sub.add_parser("example-config", help="print the bundled synthetic run config")
    ex.add_argument("--write", default=None, help="write config to this path instead")
    return parser


def _example_config():
    return resources.files("nbhdrisk").joinpath("data/synthetic_run.json").read_text()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "synth":
        table, _, _ = generate_synthetic(SyntheticSpec.from_json(args.spec))
        write_factor_table(table, args.out)
        return 0
    if args.command == "example-config":
        text = _example_config()
        if args.write:
            Path(args.write).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return pipeline.EXIT_CODES["config"]
    out = Path(args.out) if args.out else cfg.out
    try:
        if args.command == "run":
            report = pipeline.run_pipeline(cfg, out)
            log.info("classes: %s", report["clustering"]["class_sizes"])
        else:
            out.mkdir(parents=True, exist_ok=True)
            fn = getattr(pipeline, f"stage_{args.command}")
            if args.command == "fit" and args.factors:
                fn(cfg, out, factors=[f.strip() for f in args.factors.split(",") if f.strip()])
            else:
                fn(cfg, out)
    except pipeline.StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
