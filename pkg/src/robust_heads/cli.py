"""Command-line entry point: ``robust-heads <subcommand> [--config FILE] [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as C
from . import pipeline
from .errors import ConfigurationError
from .evaluation import ablation_table, format_table

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4

log = logging.getLogger("robust_heads")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-heads", description="Multi-head robustness distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", "-c", help="YAML run configuration")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted-path overrides, e.g. distill.epochs=3")
        return sp

    add("pretrain", "train the clean student and small teacher")
    add("train-teacher", "robustify the small teacher on augmented data")
    sp = add("distill", "distill the multi-head student")
    sp.add_argument("--teacher", help="robust teacher checkpoint (default: cached stage output)")
    sp.add_argument("--student", help="pretrained student checkpoint (default: cached stage output)")
    sp = add("eval", "evaluate a distilled checkpoint")
    sp.add_argument("--checkpoint", help="distilled checkpoint (default: cached stage output)")
    sp.add_argument("--selector", choices=["full", "no_kld", "no_umc", "max_logit"])
    add("ablate", "run the mode x selector x fraction sweep")
    sp = sub.add_parser("report", help="print a table from ablation.json or report.json files")
    sp.add_argument("paths", nargs="+")
    return p


def _config(args) -> C.RunConfig:
    if args.config:
        return C.load_config(args.config, args.overrides)
    return C.build_config({}, args.overrides)


def _report(paths) -> str:
    tables, runs = [], []
    for p in map(Path, paths):
        if p.is_dir():
            runs.append(p if (p / "reports" / "report.json").exists() else p.parent.parent)
            continue
        data = json.loads(p.read_text())
        if "rows" in data:
            tables.append(data)
        else:
            runs.append(p.parent.parent)
    if runs:
        tables.append(ablation_table(runs))
    return "\n\n".join(format_table(t) for t in tables)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        if args.command == "report":
            print(_report(args.paths))
            return EXIT_OK
        cfg = _config(args)
    except (ConfigurationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stage = "eval" if args.command in ("eval", "ablate") else "train"
    try:
        if args.command == "pretrain":
            res = pipeline.pretrain(cfg)
            print("\n".join(str(r.path) for r in res.values()))
        elif args.command == "train-teacher":
            print(pipeline.train_teacher(cfg).path)
        elif args.command == "distill":
            print(pipeline.distill(cfg, args.teacher, args.student).path)
        elif args.command == "eval":
            print(pipeline.evaluate(cfg, args.checkpoint, args.selector))
        elif args.command == "ablate":
            path = pipeline.ablate(cfg)
            print(format_table(json.loads(path.read_text())))
            print(path)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any other failure is a runtime failure of the stage
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return EXIT_EVAL if stage == "eval" else EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
