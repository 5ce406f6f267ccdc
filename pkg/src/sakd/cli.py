"""Command-line front end: ``sakd <command> [options]``.

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, ConfigError, NumericError, ShapeError
from .harness import gradcheck
from .harness.config import PRESETS, load_config
from .harness.data import gen_dataset, save_csv
from .harness.experiment import ablate, evaluate, pretrain_teacher, run_experiment
from .trainer import STRATEGY_ORDER

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config overriding the preset")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: desk)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--out", help="output directory / file")
    p.add_argument("--strategy", choices=STRATEGY_ORDER)


def _config(args, **extra):
    overrides = dict(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if args.out and args.command in ("train", "ablate"):
        overrides["out_dir"] = args.out
    return load_config(args.config, args.preset, overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = gen_dataset(cfg.dataset)
    out = args.out or "data.csv"
    save_csv(ds, out)
    _print({"path": out, "train": len(ds.train_y), "test": len(ds.test_y)})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args, **({"teacher_checkpoint": args.out} if args.out else {}))
    report = pretrain_teacher(cfg)
    _print(report.__dict__)
    return EXIT_OK


def cmd_train(args) -> int:
    _print(run_experiment(_config(args)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    strategies = args.strategies.split(",") if args.strategies else list(STRATEGY_ORDER)
    seeds = [int(s) for s in args.seeds.split(",")]
    table = ablate(cfg, strategies, seeds, workers=args.workers)
    print(Path(cfg.out_dir, "ablation.txt").read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(args.scope, seed=args.seed or 0)
    failed = {k: v for k, v in report.items() if not v <= gradcheck.TOLERANCE}
    for name, err in report.items():
        print(f"{'FAIL' if name in failed else 'ok  '} {args.scope:<10} {name:<28} max rel err {err:.3e}")
    if failed:
        print(f"gradcheck failed: {', '.join(sorted(failed))}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    _print(evaluate(args.checkpoint, cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sakd", description="spot-adaptive knowledge distillation engine")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the configured dataset as CSV")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="train the teacher with cross-entropy and checkpoint it")
    _common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="run one distillation experiment")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="strategy x seed grid with a summary table")
    _common(p)
    p.add_argument("--strategies", help=f"comma list from {','.join(STRATEGY_ORDER)} (default: all)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=gradcheck.SCOPES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a student checkpoint on the configured dataset")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
