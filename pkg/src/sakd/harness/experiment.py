"""Experiment orchestration: teacher pre-training, single runs, ablation grids."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..network import AdaptionSet, Network
from ..policy import PolicyParams
from ..routing import RoutingNetwork
from ..trainer import STRATEGY_ORDER, EpochStats, SgdState, Strategy, TeacherMode, Trainer, train_plain
from .checkpoint import checkpoint_metadata, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, gen_dataset

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
STUDENT_FILE = "student.ckpt.json"
CONFIG_FILE = "config.json"
SUMMARY_FILE = "summary.json"


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def metrics_header(num_spots: int) -> list[str]:
    return (
        ["epoch", "split", "ce", "kl", "kd", "routing", "total", "accuracy", "lr", "tau"]
        + [f"p_spot_{i}" for i in range(1, num_spots + 1)]
        + [f"gate_spot_{i}" for i in range(1, num_spots + 1)]
    )


def metrics_rows(stats: list[EpochStats], num_spots: int) -> list[list[str]]:
    blank = [""] * num_spots
    rows = []
    for es in stats:
        rows.append(
            [str(es.epoch), "train"]
            + [_fmt(v) for v in (es.ce, es.kl, es.kd, es.routing, es.total, es.train_acc, es.lr, es.tau)]
            + [_fmt(p) for p in es.p_spot]
            + [_fmt(g) for g in es.gate_rate]
        )
        rows.append([str(es.epoch), "test", _fmt(es.test_ce), "", "", "", "", _fmt(es.test_acc), "", ""] + blank + blank)
    return rows


def write_metrics(path, stats: list[EpochStats], num_spots: int) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_header(num_spots))
    w.writerows(metrics_rows(stats, num_spots))
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _seeds(seed: int, n: int) -> list[int]:
    """Initialization seeds, kept apart from the trainer's own streams."""
    return [int(v) for v in np.random.SeedSequence([seed, 0x5EED]).generate_state(n)]


def load_data(cfg: ExperimentConfig) -> Dataset:
    return gen_dataset(cfg.dataset)


@dataclass
class PretrainReport:
    checkpoint: str
    train_acc: float
    test_acc: float
    final_loss: float


def pretrain_teacher(cfg: ExperimentConfig, data: Dataset | None = None) -> PretrainReport:
    """Cross-entropy pre-training of the teacher spec; writes ``cfg.teacher_checkpoint``."""
    data = data or load_data(cfg)
    pc = cfg.teacher_pretrain
    net = Network.build(cfg.teacher, pc.seed)
    losses = train_plain(
        net, data.train_x, data.train_y,
        epochs=pc.epochs, batch_size=pc.batch_size,
        sgd=SgdState(pc.lr, pc.momentum, pc.weight_decay), seed=pc.seed,
    )
    train_acc = net.accuracy(data.train_x, data.train_y)
    test_acc = net.accuracy(data.test_x, data.test_y)
    meta = {
        "role": "teacher",
        "seed": pc.seed,
        "epoch": pc.epochs,
        "dataset": {k: v for k, v in cfg.to_dict()["dataset"].items()},
        "train_acc": train_acc,
        "test_acc": test_acc,
    }
    save_checkpoint(net, cfg.teacher_checkpoint, meta)
    return PretrainReport(cfg.teacher_checkpoint, train_acc, test_acc, losses[-1] if losses else float("nan"))


def build_routing_network(cfg: ExperimentConfig, teacher: Network, seed: int) -> RoutingNetwork:
    s_student, s_adapt, s_policy = _seeds(seed, 3)
    student = Network.build(cfg.student, s_student)
    adaptions = AdaptionSet.build(cfg.teacher, cfg.student, s_adapt, cfg.adaption_init)
    policy = PolicyParams.build(
        cfg.teacher.block_widths[-1], cfg.student.block_widths[-1], cfg.num_spots, s_policy, cfg.policy_init
    )
    trainable = TeacherMode(cfg.teacher_mode) is not TeacherMode.FROZEN
    return RoutingNetwork(teacher, student, adaptions, policy, teacher_trainable=trainable)


def load_teacher(cfg: ExperimentConfig) -> Network:
    mode = TeacherMode(cfg.teacher_mode)
    if mode is TeacherMode.SCRATCH:
        return Network.build(cfg.teacher, _seeds(cfg.seed, 4)[3])
    path = Path(cfg.teacher_checkpoint)
    if not path.exists():
        raise ConfigError(
            f"teacher checkpoint {path} not found; create it with "
            f"`sakd pretrain-teacher --config <config> ` (writes teacher_checkpoint)"
        )
    return load_checkpoint(path, cfg.teacher)


def make_trainer(cfg: ExperimentConfig, teacher: Network) -> Trainer:
    rn = build_routing_network(cfg, teacher, cfg.seed)
    return Trainer(
        rn, cfg.distill, cfg.strategy,
        sgd=cfg.sgd.state(cfg.epochs), tau=cfg.tau,
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed,
    )


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None, step_hook=None) -> dict:
    """Train one configuration and write metrics, student checkpoint, config snapshot and summary."""
    started = time.perf_counter()
    data = data or load_data(cfg)
    teacher = load_teacher(cfg)
    trainer = make_trainer(cfg, teacher)
    stats = trainer.train(data.train_x, data.train_y, data.test_x, data.test_y, step_hook=step_hook)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / METRICS_FILE, stats, cfg.num_spots)
    student = trainer.rn.student
    save_checkpoint(
        student, out / STUDENT_FILE,
        {"role": "student", "seed": cfg.seed, "epoch": cfg.epochs, "config_digest": cfg.digest()},
    )
    (out / CONFIG_FILE).write_text(cfg.dumps())
    summary = {
        "strategy": Strategy(cfg.strategy).value,
        "seed": cfg.seed,
        "teacher_mode": TeacherMode(cfg.teacher_mode).value,
        "epochs": cfg.epochs,
        "final_train_acc": student.accuracy(data.train_x, data.train_y),
        "final_test_acc": student.accuracy(data.test_x, data.test_y),
        "teacher_test_acc": teacher.accuracy(data.test_x, data.test_y),
        "final_p_spot": stats[-1].p_spot if stats else None,
        "wall_time_s": time.perf_counter() - started,
    }
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _run_cell(cfg_dict: dict) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        return {"ok": True, **run_experiment(cfg)}
    except Exception as exc:  # recorded per cell, the table is still emitted
        return {"ok": False, "strategy": Strategy(cfg.strategy).value, "seed": cfg.seed, "error": f"{type(exc).__name__}: {exc}"}


def ablate(cfg: ExperimentConfig, strategies, seeds, workers: int | None = None) -> dict:
    """Run every (strategy, seed) cell and aggregate final test accuracy per strategy."""
    strategies = [Strategy(s).value for s in strategies]
    seeds = [int(s) for s in seeds]
    if not strategies or not seeds:
        raise ConfigError("ablate needs at least one strategy and one seed")
    ordered = [s for s in STRATEGY_ORDER if s in strategies]
    root = Path(cfg.out_dir)
    cells = [
        replace(cfg, strategy=Strategy(s), seed=seed, out_dir=str(root / s / f"seed_{seed}")).to_dict()
        for s in ordered
        for seed in seeds
    ]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    rows = []
    for s in ordered:
        mine = [r for r in results if r["strategy"] == s]
        accs = [r["final_test_acc"] for r in mine if r["ok"]]
        rows.append({
            "strategy": s,
            "runs": len(mine),
            "failures": [r["error"] for r in mine if not r["ok"]],
            "test_acc": accs,
            "mean": float(np.mean(accs)) if accs else None,
            "std": float(np.std(accs)) if accs else None,
        })
    table = {"seeds": seeds, "rows": rows, "cells": results}
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    (root / "ablation.txt").write_text(render_table(table))
    return table


def render_table(table: dict) -> str:
    lines = [f"{'strategy':<10} {'runs':>4} {'mean acc':>9} {'std':>7}  failures"]
    for r in table["rows"]:
        mean = "n/a" if r["mean"] is None else f"{100 * r['mean']:.2f}"
        std = "n/a" if r["std"] is None else f"{100 * r['std']:.2f}"
        lines.append(f"{r['strategy']:<10} {r['runs']:>4} {mean:>9} {std:>7}  {len(r['failures'])}")
    return "\n".join(lines) + "\n"


def evaluate(checkpoint, cfg: ExperimentConfig) -> dict:
    data = load_data(cfg)
    net = load_checkpoint(checkpoint)
    return {
        "checkpoint": str(checkpoint),
        "train_acc": net.accuracy(data.train_x, data.train_y),
        "test_acc": net.accuracy(data.test_x, data.test_y),
        "metadata": checkpoint_metadata(checkpoint),
    }
