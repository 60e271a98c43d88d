"""Command-line front end: ``honeymark <subcommand> --config <path> [--out DIR] [--seed U64]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

from .config import DESK_DEFAULTS, ExperimentConfig
from .errors import HoneymarkError
from .pipeline import STAGES, Pipeline, output_lock, run_experiment, write_json

log = logging.getLogger("honeymark")


def _thread_limit():
    n = os.environ.get("HONEYMARK_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="honeymark", description="Dataset ownership verification with honey images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory, overrides output_dir")
        p.add_argument("--seed", type=int, help="master seed, overrides seed")
        p.add_argument("--force", action="store_true", help="rerun even when artifacts are up to date")

    common(sub.add_parser("run", help="run every stage"))
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        common(p)
        if stage == "verify":
            p.add_argument("--suspicious", help="verify one checkpoint instead of the trained pairs")
            p.add_argument("--replay", action="store_true", help="answer queries from recorded responses")
    p = sub.add_parser("default-config", help="print the desk config")
    p.add_argument("--out", help="write to this file instead of stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    if args.command == "default-config":
        text = json.dumps(DESK_DEFAULTS, indent=2)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        else:
            print(text)
        return 0
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed, output_dir=args.out)
        with _thread_limit():
            if args.command == "run":
                path = run_experiment(cfg, force=args.force)
                print(path)
                return 0
            pipe = Pipeline(cfg)
            with output_lock(pipe.out):
                try:
                    if args.command == "verify" and args.suspicious:
                        report = pipe.verify_checkpoint(args.suspicious)
                        print(json.dumps(report.summary(), indent=2, sort_keys=True))
                    else:
                        kwargs = {"replay": True} if getattr(args, "replay", False) else {}
                        pipe.run_stage(args.command, force=args.force, **kwargs)
                except Exception as exc:
                    write_json(pipe.out / "error.json", {"stage": args.command, "type": type(exc).__name__, "message": str(exc)})
                    raise
    except HoneymarkError as exc:
        print(f"honeymark: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
