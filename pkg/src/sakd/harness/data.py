"""Synthetic classification datasets with a stratified train/test split."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 10
    input_dim: int = 32
    samples_per_class: int = 500
    noise: float = 1.0
    center_scale: float = 1.0
    clusters_per_class: int = 1
    seed: int = 0
    path: str | None = None

    def validate(self) -> None:
        problems = []
        if self.kind not in ("blobs", "spirals", "csv"):
            problems.append(f"kind must be blobs, spirals or csv (got {self.kind!r})")
        if self.kind == "csv":
            if not self.path:
                problems.append("csv datasets need a path")
        else:
            if self.classes < 2:
                problems.append(f"classes must be >= 2 (got {self.classes})")
            if self.samples_per_class < 10:
                problems.append(f"samples_per_class must be >= 10 (got {self.samples_per_class})")
            if self.input_dim < (2 if self.kind == "spirals" else 1):
                problems.append(f"input_dim too small (got {self.input_dim})")
            if self.noise < 0:
                problems.append("noise must be non-negative")
            if self.clusters_per_class < 1:
                problems.append("clusters_per_class must be >= 1")
        if problems:
            raise ConfigError("invalid dataset spec: " + "; ".join(problems))


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1


def _blobs(spec: DatasetSpec, rng: np.random.Generator):
    k = spec.clusters_per_class
    centers = rng.normal(0.0, spec.center_scale, size=(spec.classes, k, spec.input_dim))
    xs, ys = [], []
    for c in range(spec.classes):
        which = np.arange(spec.samples_per_class) % k
        xs.append(centers[c, which] + spec.noise * rng.normal(size=(spec.samples_per_class, spec.input_dim)))
        ys.append(np.full(spec.samples_per_class, c))
    return xs, ys


def _spirals(spec: DatasetSpec, rng: np.random.Generator):
    embed = rng.normal(size=(2, spec.input_dim)) / np.sqrt(2.0)
    xs, ys = [], []
    for c in range(spec.classes):
        r = np.linspace(0.1, 1.0, spec.samples_per_class)
        theta = 2 * np.pi * c / spec.classes + 3.0 * r + spec.noise * 0.2 * rng.normal(size=r.shape)
        plane = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        xs.append(plane @ embed)
        ys.append(np.full(spec.samples_per_class, c))
    return xs, ys


def _stratified_split(xs, ys, rng: np.random.Generator) -> Dataset:
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for x, y in zip(xs, ys):
        order = rng.permutation(len(y))
        cut = int(round(TRAIN_FRACTION * len(y)))
        tr_x.append(x[order[:cut]])
        tr_y.append(y[order[:cut]])
        te_x.append(x[order[cut:]])
        te_y.append(y[order[cut:]])
    return Dataset(np.concatenate(tr_x), np.concatenate(tr_y).astype(np.int64), np.concatenate(te_x), np.concatenate(te_y).astype(np.int64))


def gen_dataset(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    if spec.kind == "csv":
        return load_csv(spec.path, rng)
    xs, ys = _blobs(spec, rng) if spec.kind == "blobs" else _spirals(spec, rng)
    return _stratified_split(xs, ys, rng)


def dump_csv(ds: Dataset) -> str:
    """Serialize with ``repr`` floats, which round-trip float64 exactly."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "label"] + [f"x{i}" for i in range(ds.input_dim)])
    for split, xs, ys in (("train", ds.train_x, ds.train_y), ("test", ds.test_x, ds.test_y)):
        for x, y in zip(xs, ys):
            w.writerow([split, int(y)] + [repr(float(v)) for v in x])
    return buf.getvalue()


def save_csv(ds: Dataset, path) -> None:
    Path(path).write_text(dump_csv(ds))


def load_csv(path, rng: np.random.Generator | None = None) -> Dataset:
    """Read ``label,x0,...`` rows, with an optional leading ``split`` column.

    Without a split column the rows are split 80/20 per class.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"empty dataset file: {path}")
    header, body = rows[0], rows[1:]
    has_split = header[0] == "split"
    off = 1 if has_split else 0
    try:
        labels = np.array([int(r[off]) for r in body], dtype=np.int64)
        feats = np.array([[float(v) for v in r[off + 1 :]] for r in body], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"malformed dataset row in {path}: {exc}") from exc
    if has_split:
        split = np.array([r[0] for r in body])
        tr, te = split == "train", split == "test"
        return Dataset(feats[tr], labels[tr], feats[te], labels[te])
    rng = rng or np.random.default_rng(0)
    classes = np.unique(labels)
    return _stratified_split([feats[labels == c] for c in classes], [labels[labels == c] for c in classes], rng)
