"""Command line entry point: chanrep gen|train|eval|project2d|verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..chanmodel import DatasetFormatError
from .config import ConfigError, load_config
from .evaluate import cmd_eval, cmd_project2d
from .pipeline import STAGES, MissingArtifactError, cmd_gen_dataset, cmd_train, single_thread
from .verify import cmd_verify

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_VERIFY, EXIT_ERROR = 0, 2, 3, 4, 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chanrep", description="channel representation pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "eval", "project2d", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML experiment config (default: desk preset)")
        p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
        p.add_argument("--out", default="runs/default", help="artifact directory")
        if name == "train":
            p.add_argument("--stage", choices=STAGES + ("all",), default="all")
        if name == "eval":
            p.add_argument("--methods", default=None, help="comma-separated method list")
    return ap


def _fail(code: int, kind: str, msg: str) -> int:
    print(f"error={kind} reason={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    single_thread()
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "gen":
            print(cmd_gen_dataset(cfg, args.out))
        elif args.command == "train":
            for stage in (STAGES if args.stage == "all" else (args.stage,)):
                print(cmd_train(stage, cfg, args.out))
        elif args.command == "eval":
            methods = args.methods.split(",") if args.methods else None
            report = cmd_eval(cfg, args.out, methods)
            print(json.dumps(report.summary, sort_keys=True))
        elif args.command == "project2d":
            print(cmd_project2d(cfg, args.out))
        else:
            report = cmd_verify(cfg, args.out)
            for r in report["suites"]:
                print(f"{r['name']}: {'PASS' if r['passed'] else 'FAIL'} max_error={r['max_error']:.3e}")
            if not report["passed"]:
                failed = ",".join(r["name"] for r in report["suites"] if not r["passed"])
                return _fail(EXIT_VERIFY, "verification", f"failed suites: {failed}")
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (MissingArtifactError, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING, "missing_artifact", str(exc))
    except DatasetFormatError as exc:
        return _fail(EXIT_MISSING, "bad_artifact", str(exc))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
