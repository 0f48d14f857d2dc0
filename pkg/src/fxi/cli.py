"""Command line entry point: ``fxi simulate|classify|emc|phase|post|all|inspect``.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or
malformed inputs), 3 numerical failure (EMC divergence, phasing breakdown).
"""

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import __version__, io
from .config import ConfigError, PipelineConfig, load_config
from .pipeline import EXIT_CONFIG, EXIT_DATA, EXIT_OK, STAGES, StageError, run_stage


def _parser():
    ap = argparse.ArgumentParser(prog="fxi", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in (*STAGES, "all"):
        p = sub.add_parser(verb, help=f"run the {verb} stage" if verb != "all"
                           else "run every stage in order")
        p.add_argument("--config", help="TOML configuration (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="override the configured output directory")
    p = sub.add_parser("inspect", help="print FXD/FXV container headers")
    p.add_argument("files", nargs="+")
    return ap


def _config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig().validate()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "inspect":
        code = EXIT_OK
        for path in args.files:
            try:
                print(json.dumps({"file": path, **io.inspect_file(path)}, sort_keys=True))
            except (OSError, io.FormatError) as exc:
                print(f"fxi: {exc}", file=sys.stderr)
                code = EXIT_DATA
        return code
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"fxi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stages = STAGES if args.verb == "all" else (args.verb,)
    for stage in stages:
        try:
            m = run_stage(cfg, stage)
        except StageError as exc:
            print(f"fxi: {exc}", file=sys.stderr)
            return exc.code
        print(f"{stage}: {len(m['outputs'])} artifact(s) in {cfg.output_dir} "
              f"({m['wall_time_s']:.1f} s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
