"""Command-line entry point.

    marl <stage> --config run.json [--override section.key=value] ...

Stages run one at a time per output directory (lock file). Progress goes to
stderr as JSONL; evaluate prints its report on stdout. Expected failures exit
nonzero with a single machine-readable error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from .artifacts import StageLock, log_event
from .config import RunConfig
from .errors import MarlError
from .stages import STAGES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marl",
        description="Footprint representation learning and archetype-based energy estimation.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. training.epochs=5")
    return parser


def _fail(stage: str, err: Exception, with_traceback: bool = False) -> int:
    record = {"error": type(err).__name__, "message": str(err), "stage": stage}
    if with_traceback:
        record["traceback"] = traceback.format_exc()
    print(json.dumps(record, sort_keys=True), file=sys.stderr, flush=True)
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.stage
    try:
        cfg = RunConfig.load(args.config, args.override)
        with StageLock(cfg.out_dir()):
            log_event(stage, "start", config=str(args.config), out=str(cfg.out_dir()))
            result = STAGES[stage](cfg)
            log_event(stage, "done")
        if stage == "evaluate":
            print(json.dumps(result, indent=1, sort_keys=True))
    except MarlError as e:
        return _fail(stage, e)
    except Exception as e:  # noqa: BLE001 - report, then nonzero exit
        return _fail(stage, e, with_traceback=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
