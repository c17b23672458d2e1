"""``vistra`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .stages import (
    ANALYSES,
    LAYOUTS,
    Filters,
    Run,
    StageFailure,
    UsageError,
    stage_ablate,
    stage_analyze,
    stage_demo,
    stage_montage,
    stage_prior,
    stage_pretrain,
    stage_transfer,
    stage_visualize,
)

COMMANDS = ("pretrain", "transfer", "visualize", "prior", "ablate", "analyze", "montage", "demo")


def _split(values):
    if not values:
        return None
    out = []
    for v in values:
        out += [p for p in v.split(",") if p] if ".." not in v else [v]
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (YAML); built-in defaults when omitted")
    common.add_argument("--out", type=Path, help="output root (overrides the config's 'output')")
    common.add_argument("--seed", type=int, help="global seed (overrides the config's 'seed')")
    common.add_argument("--force", action="store_true", help="recompute artifacts that already exist")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker threads for cell-parallel stages")
    common.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")

    filt = argparse.ArgumentParser(add_help=False)
    filt.add_argument("--layers", action="append", metavar="GLOB", help="layer name globs (repeatable or comma-separated)")
    filt.add_argument("--channels", action="append", metavar="GLOB", help="channel index globs or ranges like 0..5")
    filt.add_argument("--iterations", action="append", metavar="GLOB", help="snapshot iteration globs")

    p = argparse.ArgumentParser(prog="vistra", description="Feature visualization over transfer-learning snapshots.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the recognition net on the source task")
    sub.add_parser("transfer", parents=[common], help="fine-tune on the target task, taking scheduled snapshots")
    v = sub.add_parser("visualize", parents=[common, filt], help="channel visualizations for snapshots")
    v.add_argument("--no-transforms", action="store_true", help="disable jitter/scale robustness transforms")
    sub.add_parser("prior", parents=[common, filt], help="visualizations under the generative prior")
    a = sub.add_parser("ablate", parents=[common, filt], help="weight-ablation sweep through the prior")
    a.add_argument("--ablate-k", metavar="RANGE", help="k values, e.g. 0..39")
    an = sub.add_parser("analyze", parents=[common], help="period, redundancy and adaptation reports")
    an.add_argument("--only", action="append", metavar="NAME", help=f"subset of {', '.join(ANALYSES)}")
    m = sub.add_parser("montage", parents=[common], help="labeled image grids")
    m.add_argument("--layout", action="append", metavar="NAME", help=f"one of {', '.join(LAYOUTS)} (default: both)")
    m.add_argument("--allow-gaps", action="store_true", help="draw placeholders for missing cells")
    d = sub.add_parser("demo", parents=[common], help="run the whole pipeline end to end")
    d.add_argument("--no-transforms", action="store_true", help=argparse.SUPPRESS)
    return p


def _run_for(args) -> Run:
    if args.config is not None:
        cfg = load_config(args.config)
        base = args.config.parent
    else:
        cfg, base = RunConfig(), Path.cwd()
    root = args.out if args.out is not None else base / cfg.output
    return Run(
        cfg,
        root,
        seed=args.seed,
        force=args.force,
        jobs=args.jobs,
        transforms=not getattr(args, "no_transforms", False),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="[vistra] %(message)s",
        stream=sys.stderr,
        force=True,
    )
    log = logging.getLogger("vistra")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        run = _run_for(args)
        filters = Filters(_split(getattr(args, "layers", None)), _split(getattr(args, "channels", None)), _split(getattr(args, "iterations", None)))
        cmd = args.command
        if cmd == "pretrain":
            stage_pretrain(run)
        elif cmd == "transfer":
            stage_transfer(run)
        elif cmd == "visualize":
            stage_visualize(run, filters)
        elif cmd == "prior":
            stage_prior(run, filters)
        elif cmd == "ablate":
            stage_ablate(run, filters, args.ablate_k)
        elif cmd == "analyze":
            stage_analyze(run, _split(args.only))
        elif cmd == "montage":
            stage_montage(run, _split(args.layout), args.allow_gaps)
        elif cmd == "demo":
            stage_demo(run)
    except (ConfigError, UsageError) as e:
        print(f"vistra {args.command}: {e}", file=sys.stderr)
        return 2
    except StageFailure as e:
        print(f"vistra {args.command}: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report, keep partial artifacts
        log.debug("traceback", exc_info=True)
        print(f"vistra {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0

