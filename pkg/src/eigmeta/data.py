"""Dataset ingestion, multi-task synthesis, and episode sampling.

A task is a labeled table (rows are instances, one binary label column).
Many related tasks are synthesized from one base table by multiplying the
attributes with a per-task random matrix. Episodes, the unit of training
and evaluation, are (support, query) pairs drawn from a single task
without replacement.
"""
from __future__ import annotations

import csv
import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateColumn,
    InsufficientInstances,
    NonBinaryLabel,
    ParseError,
)

MANIFEST_VERSION = 1
SPLITS = ("train", "valid", "target")


def seeded_rng(seed, *key):
    """An independent generator derived from a run seed and a string/int key.

    Streams with distinct keys are statistically independent and fully
    reproducible across platforms.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for part in key:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            words.append(int(part) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class SupportSet:
    """The few labeled instances a task adaptation is computed from."""

    normals: np.ndarray    # (n_normal, dim)
    anomalies: np.ndarray  # (n_anomaly, dim); may be empty

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        self.anomalies = np.asarray(self.anomalies, dtype=np.float64)
        if self.anomalies.size == 0:
            self.anomalies = np.zeros((0, self.normals.shape[1]))
        else:
            self.anomalies = np.atleast_2d(self.anomalies)

    @property
    def size(self):
        return self.normals.shape[0] + self.anomalies.shape[0]


@dataclass
class Episode:
    """One simulated task: a support set plus a held-out labeled query set."""

    support: SupportSet
    query_anomalies: np.ndarray
    query_normals: np.ndarray
    task_id: str = ""


@dataclass
class LabeledDataset:
    """A named attribute table with binary anomaly labels (1 = anomaly)."""

    name: str
    attributes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def n_normal(self):
        return int((self.labels == 0).sum())

    @property
    def n_anomaly(self):
        return int((self.labels == 1).sum())

    @property
    def dim(self):
        return self.attributes.shape[1]


@dataclass
class TaskBundle:
    """A disjoint train/validation/target partition of related tasks."""

    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    target: list = field(default_factory=list)
    seed: int = 0

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, name)

    def all_tasks(self):
        return list(self.train) + list(self.valid) + list(self.target)

    @property
    def dim(self):
        return self.all_tasks()[0].dim


# --- CSV ingestion ----------------------------------------------------------


def load_csv(path, label_column="label", normalize=True):
    """Read a rectangular numeric CSV with a header into a LabeledDataset.

    The label column must hold only 0/1. With ``normalize`` each attribute
    is standardized to zero mean and unit deviation using moments computed
    over the whole file; zero-variance columns are dropped with a
    DegenerateColumn warning.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not in header of {path}")
        label_idx = header.index(label_column)
        rows = []
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: expected {len(header)} cells, got {len(row)}", row=row_num
                )
            parsed = []
            for col_idx, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell {cell!r}",
                        row=row_num,
                        column=header[col_idx],
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ParseError(f"{path} has a header but no data rows")
    table = np.asarray(rows, dtype=np.float64)
    labels = table[:, label_idx]
    if not np.all(np.isin(labels, (0.0, 1.0))):
        bad = sorted(set(labels.tolist()) - {0.0, 1.0})
        raise NonBinaryLabel(f"{path}: label column contains {bad}")
    attrs = np.delete(table, label_idx, axis=1)
    if normalize:
        mean = attrs.mean(axis=0)
        std = attrs.std(axis=0)
        dead = std == 0.0
        if np.any(dead):
            names = [h for h, d in zip(np.delete(header, label_idx), dead) if d]
            warnings.warn(
                f"{path}: dropping zero-variance column(s) {names}", DegenerateColumn
            )
            attrs = attrs[:, ~dead]
            mean = mean[~dead]
            std = std[~dead]
        attrs = (attrs - mean) / std
    return LabeledDataset(name=path.stem, attributes=attrs, labels=labels.astype(np.int64))


# --- task synthesis ----------------------------------------------------------


def apply_task_transform(base, matrix, name):
    """A new task whose attributes are ``x @ matrix.T``; labels unchanged."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return LabeledDataset(
        name=name,
        attributes=base.attributes @ matrix.T,
        labels=base.labels.copy(),
    )


def synthesize_tasks(base, n_train=400, n_valid=50, n_target=50, seed=0):
    """Spin one base dataset into a bundle of related tasks.

    Each task gets its own square mixing matrix with entries drawn
    i.i.d. uniform on [-1, 1]; the whole bundle is reproducible from the
    seed.
    """
    rng = seeded_rng(seed, "synthesize")
    dim = base.dim
    bundle = TaskBundle(seed=seed)
    counts = (("train", n_train), ("valid", n_valid), ("target", n_target))
    index = 0
    for split_name, count in counts:
        for _ in range(count):
            matrix = rng.uniform(-1.0, 1.0, size=(dim, dim))
            task = apply_task_transform(base, matrix, f"{base.name}_task{index:04d}")
            bundle.split(split_name).append(task)
            index += 1
    return bundle


# --- episode sampling ---------------------------------------------------------


def sample_episode(
    task,
    rng,
    n_support_normal=5,
    n_support_anomaly=1,
    n_query_normal=25,
    n_query_anomaly=5,
):
    """Draw a support/query episode from one task, uniformly without
    replacement; support and query never share an instance."""
    normal_idx = np.flatnonzero(task.labels == 0)
    anomaly_idx = np.flatnonzero(task.labels == 1)
    need_normal = n_support_normal + n_query_normal
    need_anomaly = n_support_anomaly + n_query_anomaly
    if normal_idx.size < need_normal:
        raise InsufficientInstances(
            f"task {task.name!r} has {normal_idx.size} normal instances, "
            f"needs {need_normal}"
        )
    if anomaly_idx.size < need_anomaly:
        raise InsufficientInstances(
            f"task {task.name!r} has {anomaly_idx.size} anomalous instances, "
            f"needs {need_anomaly}"
        )
    pick_normal = rng.choice(normal_idx, size=need_normal, replace=False)
    pick_anomaly = rng.choice(anomaly_idx, size=need_anomaly, replace=False)
    support = SupportSet(
        normals=task.attributes[pick_normal[:n_support_normal]],
        anomalies=task.attributes[pick_anomaly[:n_support_anomaly]],
    )
    return Episode(
        support=support,
        query_anomalies=task.attributes[pick_anomaly[n_support_anomaly:]],
        query_normals=task.attributes[pick_normal[n_support_normal:]],
        task_id=task.name,
    )


# --- manifest i/o --------------------------------------------------------------


def save_task_bundle(bundle, out_dir, meta=None):
    """Write one CSV per task plus a manifest JSON; returns the manifest path.

    Floats are written with repr-level precision so a bundle round-trips
    through disk bit-exactly. ``meta`` is recorded verbatim in the manifest
    (callers use it to embed the resolved generation config).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for split_name in SPLITS:
        for i, task in enumerate(bundle.split(split_name)):
            fname = f"task_{split_name}_{i:04d}.csv"
            _write_task_csv(out_dir / fname, task)
            entries.append({"file": fname, "split": split_name, "name": task.name})
    manifest = {"version": MANIFEST_VERSION, "seed": bundle.seed, "tasks": entries}
    if meta is not None:
        manifest["config"] = meta
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_task_bundle(manifest_path):
    """Rebuild a TaskBundle from a manifest written by ``save_task_bundle``
    (or hand-written for pre-split corpora)."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(
            f"{manifest_path}: unsupported manifest version {manifest.get('version')!r}"
        )
    bundle = TaskBundle(seed=int(manifest.get("seed", 0)))
    for entry in manifest["tasks"]:
        task = load_csv(manifest_path.parent / entry["file"], normalize=False)
        if "name" in entry:
            task.name = entry["name"]
        bundle.split(entry["split"]).append(task)
    return bundle


def _write_task_csv(path, task):
    dim = task.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dim)] + ["label"])
        for row, label in zip(task.attributes, task.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
