"""Episodic meta-training, evaluation, and checkpointing.

One parameter update per episode: sample a task, sample a support/query
episode from it, adapt, score the queries, backpropagate the negated
smoothed AUC, and take an Adam step. A fixed set of validation episodes
is scored by empirical AUC at a regular interval; the best snapshot wins
and early stopping fires after ``patience`` evaluations without
improvement.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from . import objective
from .data import sample_episode, seeded_rng
from .errors import CheckpointError, ConfigError, DegenerateAnomaly
from .model import ModelConfig, ModelParams, NormalOnlyConfig

CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    mode: str = "eigen"
    max_updates: int = 1000
    learning_rate: float = 1e-3
    dropout_rate: float = 0.1
    hidden_units: int = 256
    embed_dim: int = 256
    n_support_normal: int = 5
    n_support_anomaly: int = 1
    n_query_normal: int = 25
    n_query_anomaly: int = 5
    validation_interval: int = 100
    validation_episodes: int = 50
    patience: int = 10
    center_episodes: int = 100
    projected_dim: int = 32
    ridge_scale: float = 1e-3
    seed: int = 0

    FIELD_NAMES = None  # filled in below

    def episode_kwargs(self):
        return {
            "n_support_normal": self.n_support_normal,
            "n_support_anomaly": self.n_support_anomaly,
            "n_query_normal": self.n_query_normal,
            "n_query_anomaly": self.n_query_anomaly,
        }

    def normal_only_config(self):
        return NormalOnlyConfig(
            projected_dim=self.projected_dim, ridge_scale=self.ridge_scale
        )

    def validate(self):
        if self.mode not in model_mod.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {model_mod.MODES}")
        positive = (
            "max_updates", "hidden_units", "embed_dim", "n_support_normal",
            "n_query_normal", "n_query_anomaly", "validation_interval",
            "validation_episodes", "patience", "center_episodes", "projected_dim",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_support_anomaly < 0:
            raise ConfigError("n_support_anomaly must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.ridge_scale <= 0:
            raise ConfigError("ridge_scale must be > 0")
        if self.mode == "normal_only" and self.n_support_anomaly != 0:
            raise ConfigError("normal_only mode requires n_support_anomaly = 0")
        if self.mode == "single" and self.n_support_anomaly != 1:
            raise ConfigError("single mode requires n_support_anomaly = 1")
        if self.mode in ("eigen", "wonn") and self.n_support_anomaly < 1:
            raise ConfigError(f"{self.mode} mode requires n_support_anomaly >= 1")
        if self.mode == "normal_only" and self.projected_dim > self.embed_dim:
            raise ConfigError("projected_dim cannot exceed embed_dim")
        return self

    @classmethod
    def from_dict(cls, values):
        unknown = set(values) - set(cls.FIELD_NAMES)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**values)


TrainConfig.FIELD_NAMES = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass
class EvalReport:
    episodes: list            # (task_id, episode_index, empirical_auc)
    mean: float
    std: float
    skipped: int


@dataclass
class Checkpoint:
    version: int
    mode: str
    train_config: dict
    model_config: dict
    arrays: dict
    rng_state: dict
    best_val_auc: float
    best_update: int
    skipped_episodes: int = 0


def run_episode(params, episode, mode, normal_cfg=None, train=False, rng=None):
    """Adapt to the episode's support set and score its queries.

    Returns ``(loss, scores)``: the negated smoothed AUC as a tape node and
    the raw per-class score arrays for metrics.
    """
    support = episode.support
    if mode == "eigen":
        result = model_mod.adapt(support, params, train, rng)
    elif mode == "single":
        result = model_mod.adapt_single(support, params, train, rng)
    elif mode == "normal_only":
        result = model_mod.adapt_normal_only(support, params, normal_cfg, train, rng)
    elif mode == "wonn":
        result = model_mod.adapt_wonn(support, params)
    elif mode == "woproj":
        result = model_mod.adapt_woproj(support, params, train, rng)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    scores_anomaly = model_mod.anomaly_score(episode.query_anomalies, result, params, train, rng)
    scores_normal = model_mod.anomaly_score(episode.query_normals, result, params, train, rng)
    loss = objective.episode_loss(scores_anomaly, scores_normal)
    scores = objective.EpisodeScore(
        scores_anomaly.value.ravel().copy(), scores_normal.value.ravel().copy()
    )
    return loss, scores


def _sample_eval_episodes(tasks, n_episodes, rng, episode_kwargs):
    episodes = []
    for _ in range(n_episodes):
        task = tasks[int(rng.integers(len(tasks)))]
        episodes.append(sample_episode(task, rng, **episode_kwargs))
    return episodes


def _score_episodes(params, episodes, mode, normal_cfg, score_override=None):
    """Empirical AUC per episode; None marks a skipped (degenerate) episode."""

    def one(episode):
        try:
            if score_override is not None:
                scores = objective.EpisodeScore(*score_override(episode))
            else:
                _, scores = run_episode(params, episode, mode, normal_cfg, train=False)
            return objective.empirical_auc(scores)
        except DegenerateAnomaly:
            return None

    threads = int(os.environ.get("EIGMETA_THREADS", "1") or "1")
    if threads > 1 and len(episodes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, episodes))
    return [one(ep) for ep in episodes]


def evaluate(params, tasks, cfg, n_episodes, seed, score_override=None):
    """Mean and spread of per-episode empirical AUC over freshly sampled
    episodes; fully determined by the seed."""
    episodes = []
    for i in range(n_episodes):
        rng = seeded_rng(seed, "eval", i)
        task = tasks[int(rng.integers(len(tasks)))]
        episodes.append(sample_episode(task, rng, **cfg.episode_kwargs()))
    aucs = _score_episodes(params, episodes, cfg.mode, cfg.normal_only_config(), score_override)
    rows = []
    kept = []
    skipped = 0
    for i, (episode, auc) in enumerate(zip(episodes, aucs)):
        if auc is None:
            skipped += 1
            continue
        rows.append((episode.task_id, i, auc))
        kept.append(auc)
    mean = float(np.mean(kept)) if kept else math.nan
    std = float(np.std(kept)) if kept else math.nan
    return EvalReport(episodes=rows, mean=mean, std=std, skipped=skipped)


def train(bundle, cfg):
    """Run the episodic training loop; returns (best checkpoint, history).

    History rows are ``(update, loss, validation_auc)`` with NaN where no
    validation happened. The whole run is a deterministic function of the
    bundle, the config, and the seed.
    """
    cfg.validate()
    if not bundle.train:
        raise ConfigError("bundle has no training tasks")
    if not bundle.valid:
        raise ConfigError("bundle has no validation tasks")
    dims = {t.dim for t in bundle.all_tasks()}
    if len(dims) != 1:
        raise ConfigError(f"tasks disagree on attribute dimension: {sorted(dims)}")

    model_cfg = ModelConfig(
        input_dim=dims.pop(),
        hidden_units=cfg.hidden_units,
        embed_dim=cfg.embed_dim,
        dropout_rate=cfg.dropout_rate,
    )
    params = model_mod.init_params(model_cfg, seeded_rng(cfg.seed, "init"))
    params.center = model_mod.fix_center(
        bundle.train,
        params,
        cfg.center_episodes,
        seeded_rng(cfg.seed, "center"),
        cfg.episode_kwargs(),
        cfg.mode,
    )
    normal_cfg = cfg.normal_only_config()
    trainable = params.trainable()
    optimizer = ad.Adam(trainable, learning_rate=cfg.learning_rate)
    episode_rng = seeded_rng(cfg.seed, "episodes")
    dropout_rng = seeded_rng(cfg.seed, "dropout")
    val_episodes = _sample_eval_episodes(
        bundle.valid, cfg.validation_episodes, seeded_rng(cfg.seed, "validation"),
        cfg.episode_kwargs(),
    )

    def validation_auc():
        aucs = [a for a in _score_episodes(params, val_episodes, cfg.mode, normal_cfg) if a is not None]
        return float(np.mean(aucs)) if aucs else math.nan

    best = None  # (auc, params copy, rng state, update index)
    evals_since_best = 0
    skipped = 0
    history = []
    update = 0
    while update < cfg.max_updates:
        update += 1
        task = bundle.train[int(episode_rng.integers(len(bundle.train)))]
        episode = sample_episode(task, episode_rng, **cfg.episode_kwargs())
        try:
            loss, _ = run_episode(
                params, episode, cfg.mode, normal_cfg, train=True, rng=dropout_rng
            )
        except DegenerateAnomaly:
            skipped += 1
            history.append((update, math.nan, math.nan))
            continue
        ad.zero_grad(trainable)
        ad.backward(loss)
        optimizer.step([ad.grad_or_zeros(p) for p in trainable])
        val_auc = math.nan
        if update % cfg.validation_interval == 0:
            val_auc = validation_auc()
            if best is None or val_auc > best[0]:
                best = (val_auc, params.copy(), episode_rng.bit_generator.state, update)
                evals_since_best = 0
            else:
                evals_since_best += 1
            history.append((update, float(loss.value), val_auc))
            if evals_since_best >= cfg.patience:
                break
        else:
            history.append((update, float(loss.value), val_auc))
    if best is None:
        best = (validation_auc(), params.copy(), episode_rng.bit_generator.state, update)
    if skipped > 0.01 * update:
        raise RuntimeError(
            f"{skipped} of {update} episodes were skipped as degenerate (>1%); "
            "the run is unsound"
        )
    auc, best_params, rng_state, best_update = best
    checkpoint = Checkpoint(
        version=CHECKPOINT_VERSION,
        mode=cfg.mode,
        train_config=dataclasses.asdict(cfg),
        model_config=dataclasses.asdict(model_cfg),
        arrays=best_params.named_arrays(),
        rng_state=rng_state,
        best_val_auc=auc,
        best_update=best_update,
        skipped_episodes=skipped,
    )
    return checkpoint, history


# --- checkpoint serialization -------------------------------------------------


def save_checkpoint(path, checkpoint):
    """Binary container: magic, manifest length, JSON manifest, then a
    contiguous little-endian float64 payload. Round-trips bit-exactly."""
    table = []
    parts = []
    offset = 0
    for name in sorted(checkpoint.arrays):
        arr = np.asarray(checkpoint.arrays[name], dtype=np.float64)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        # ascontiguousarray promotes 0-d to 1-d, hence the shape capture above
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format_version": checkpoint.version,
        "mode": checkpoint.mode,
        "train_config": checkpoint.train_config,
        "model_config": checkpoint.model_config,
        "rng_state": checkpoint.rng_state,
        "best_val_auc": checkpoint.best_val_auc,
        "best_update": checkpoint.best_update,
        "skipped_episodes": checkpoint.skipped_episodes,
        "arrays": table,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for part in parts:
            fh.write(part)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {manifest.get('format_version')!r} does not match "
                f"this build ({CHECKPOINT_VERSION})"
            )
        payload = fh.read()
    arrays = {}
    flat = np.frombuffer(payload, dtype="<f8")
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + size]
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64).copy()
    return Checkpoint(
        version=manifest["format_version"],
        mode=manifest["mode"],
        train_config=manifest["train_config"],
        model_config=manifest["model_config"],
        arrays=arrays,
        rng_state=manifest["rng_state"],
        best_val_auc=manifest["best_val_auc"],
        best_update=manifest["best_update"],
        skipped_episodes=manifest.get("skipped_episodes", 0),
    )


def params_from_checkpoint(checkpoint):
    """Rebuild (ModelParams, TrainConfig) from a loaded checkpoint."""
    model_cfg = ModelConfig(**checkpoint.model_config)
    params = ModelParams(config=model_cfg)
    groups = {
        "feat_weights": params.feat_weights,
        "feat_biases": params.feat_biases,
        "pool_weights": params.pool_weights,
        "pool_biases": params.pool_biases,
        "embed_weights": params.embed_weights,
    }
    staged = {name: [] for name in groups}
    for name, arr in checkpoint.arrays.items():
        if name == "log_ridge":
            params.log_ridge = ad.Tensor(arr, requires_grad=True)
        elif name == "center":
            params.center = arr
        else:
            group, idx = name.rsplit(".", 1)
            if group not in staged:
                raise CheckpointError(f"unexpected array {name!r} in checkpoint")
            staged[group].append((int(idx), arr))
    for group, items in staged.items():
        for _, arr in sorted(items):
            groups[group].append(ad.Tensor(arr, requires_grad=True))
    cfg = TrainConfig.from_dict(checkpoint.train_config)
    return params, cfg
