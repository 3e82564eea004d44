"""Command-line entry point: ``scaledrop <command> --config PATH [--seed N] [--out DIR] [--threads N]``.

Exit status: 0 on success, 2 for usage or configuration errors, 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from threadpoolctl import threadpool_limits

from .config import ConfigError, load_config, parse_config
from .data import export_digits_idx
from .experiments import COMMANDS, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaledrop", description="Scale-Dropout BNN experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, help="BLAS thread limit")
    p = sub.add_parser("export-digits", help="write the 28x28 digits set as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "export-digits":
        paths = export_digits_idx(args.out, args.n_train, args.seed)
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        updates = {k: v for k, v in (("seed", args.seed), ("output_dir", args.out), ("threads", args.threads))
                   if v is not None}
        if updates:
            cfg = parse_config({**cfg.model_dump(), **updates})
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=cfg.threads):
            summary = run_experiment(cfg, args.command)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure mid-run maps to one exit status
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({k: summary[k] for k in ("command", "config_hash", "seed")}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
