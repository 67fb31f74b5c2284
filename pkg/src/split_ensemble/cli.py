"""Command line entry point: ``split-ensemble {train,eval,ablate,export-arch,gen-ood}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .config import ConfigError, apply_overrides, parse_config


def _config(args) -> "harness.ExperimentConfig":
    raw = {}
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
    return parse_config(apply_overrides(raw, args.set))


def _train(args) -> int:
    cfg = _config(args)
    run = harness.cmd_train(cfg, args.out)
    out = run.out_dir
    print(f"wrote {out}  (flops {[m.flops() for m in run.models]}, "
          f"splits {sum(len(h.splits) for h in run.histories)}, "
          f"prunes {sum(len(h.prunes) for h in run.histories)})")
    return 0


def _eval(args) -> int:
    cfg = _config(args) if (args.config or args.set) else None
    rows = harness.cmd_eval(args.run_dir, cfg, args.out)
    sys.stdout.write(harness.rows_to_csv(rows))
    return 0


def _ablate(args) -> int:
    grid = yaml.safe_load(Path(args.grid).read_text()) or {}
    table = harness.cmd_ablate(grid, args.out, args.workers)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 1 if any(r["n_ok"] == 0 for r in table) else 0


def _export(args) -> int:
    for p in harness.cmd_export_arch(args.checkpoint, args.out):
        print(p)
    return 0


def _gen_ood(args) -> int:
    shape = tuple(int(s) for s in args.shape.split(","))
    print(harness.cmd_gen_ood(args.kind, shape, args.count, args.seed, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="split-ensemble", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("-c", "--config", help="experiment YAML file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=5 (repeatable)")

    t = sub.add_parser("train", help="train one experiment")
    config_args(t)
    t.add_argument("-o", "--out", help="run directory (default: $SPLIT_ENSEMBLE_OUTPUT/<name>)")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a trained run against its OOD sets")
    e.add_argument("run_dir")
    config_args(e)
    e.add_argument("-o", "--out", help="report directory (default: the run directory)")
    e.set_defaults(func=_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("grid", help="grid YAML with base, axes and seeds")
    a.add_argument("-o", "--out")
    a.add_argument("-j", "--workers", type=int, default=1)
    a.set_defaults(func=_ablate)

    x = sub.add_parser("export-arch", help="write architecture JSON and DOT from a checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("-o", "--out", help="output path stem")
    x.set_defaults(func=_export)

    g = sub.add_parser("gen-ood", help="write a synthetic noise OOD set (.npz)")
    g.add_argument("kind", choices=("gaussian", "uniform"))
    g.add_argument("out")
    g.add_argument("--shape", default="1,16,16", help="C,H,W")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gen_ood)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
