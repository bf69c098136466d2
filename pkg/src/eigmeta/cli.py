"""Command-line entry point: task synthesis, training, evaluation,
ablations, and numerical self-checks.

Commands are deterministic given their flags and seed, and every output
file embeds the resolved configuration. Exit codes: 0 success, 1 usage or
configuration problem, 2 data problem, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import training as train_mod
from .errors import CheckpointError, ConfigError, DataError, NumericalError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

GRADCHECK_TOLERANCE = 1e-3

ABLATION_MODES = {"wonn": "wonn", "woproj": "woproj", "woanomaly": "normal_only"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="eigmeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize related tasks from one CSV")
    p_synth.add_argument("--input", required=True, help="base dataset CSV")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--train", type=int, default=400, dest="n_train")
    p_synth.add_argument("--valid", type=int, default=50, dest="n_valid")
    p_synth.add_argument("--target", type=int, default=50, dest="n_target")
    p_synth.add_argument("--label-column", default="label")
    p_synth.add_argument("--no-normalize", action="store_true")

    p_train = sub.add_parser("train", help="run episodic meta-training")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--config", help="TOML file of training settings")
    p_train.add_argument("--out", required=True)
    _add_override_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a task split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--split", default="target", choices=data_mod.SPLITS)
    p_eval.add_argument("--episodes", type=int, default=200)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", required=True)

    p_ablate = sub.add_parser("ablate", help="train and evaluate an ablation mode")
    p_ablate.add_argument("--mode", required=True, choices=sorted(ABLATION_MODES))
    p_ablate.add_argument("--manifest", required=True)
    p_ablate.add_argument("--config", help="TOML file of training settings")
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--episodes", type=int, default=200, help="evaluation episodes")
    p_ablate.add_argument("--eval-seed", type=int, default=0)
    _add_override_flags(p_ablate)

    p_check = sub.add_parser("gradcheck", help="finite-difference self check")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--size", type=int, default=6, help="embedding dimension")
    p_check.add_argument("--instances", type=int, default=20)

    return parser


def _add_override_flags(parser):
    # flags override values from the --config file
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--max-updates", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None)


def _load_train_config(args, forced_mode=None):
    values = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            values.update(tomllib.load(fh))
    for flag, key in (("seed", "seed"), ("max_updates", "max_updates"),
                      ("learning_rate", "learning_rate")):
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[key] = flag_value
    if forced_mode is not None:
        values["mode"] = forced_mode
        if forced_mode == "normal_only":
            values["n_support_anomaly"] = 0
    cfg = train_mod.TrainConfig.from_dict(values)
    cfg.validate()
    return cfg


def _config_header(cfg_dict):
    return "# " + json.dumps(cfg_dict, sort_keys=True)


def _write_curve(path, cfg, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_config_header(dataclasses.asdict(cfg)) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["update", "loss", "val_auc"])
        for update, loss, val_auc in history:
            writer.writerow([update, repr(float(loss)), repr(float(val_auc))])


def _write_eval(out_dir, report, meta):
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes_path = out_dir / "episodes.csv"
    with open(episodes_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_config_header(meta) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["task", "episode", "empirical_auc"])
        for task_id, index, auc in report.episodes:
            writer.writerow([task_id, index, repr(float(auc))])
    summary = {
        "mean_auc": report.mean,
        "std_auc": report.std,
        "episodes_scored": len(report.episodes),
        "skipped": report.skipped,
        "config": meta,
    }
    summary_path = out_dir / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return episodes_path, summary_path


def cmd_synth(args):
    base = data_mod.load_csv(
        args.input, label_column=args.label_column, normalize=not args.no_normalize
    )
    bundle = data_mod.synthesize_tasks(
        base, n_train=args.n_train, n_valid=args.n_valid, n_target=args.n_target,
        seed=args.seed,
    )
    meta = {
        "input": str(args.input),
        "label_column": args.label_column,
        "normalize": not args.no_normalize,
        "n_train": args.n_train,
        "n_valid": args.n_valid,
        "n_target": args.n_target,
        "seed": args.seed,
    }
    manifest_path = data_mod.save_task_bundle(bundle, args.out, meta=meta)
    total = args.n_train + args.n_valid + args.n_target
    print(f"wrote {total} task files and {manifest_path}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_train_config(args)
    bundle = data_mod.load_task_bundle(args.manifest)
    checkpoint, history = train_mod.train(bundle, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    train_mod.save_checkpoint(ckpt_path, checkpoint)
    _write_curve(out_dir / "curve.csv", cfg, history)
    print(
        f"best validation AUC {checkpoint.best_val_auc:.4f} at update "
        f"{checkpoint.best_update} ({checkpoint.skipped_episodes} episodes "
        f"skipped); wrote {ckpt_path}"
    )
    return EXIT_OK


def cmd_eval(args):
    checkpoint = train_mod.load_checkpoint(args.checkpoint)
    params, cfg = train_mod.params_from_checkpoint(checkpoint)
    bundle = data_mod.load_task_bundle(args.manifest)
    tasks = bundle.split(args.split)
    if not tasks:
        raise DataError(f"split {args.split!r} has no tasks in {args.manifest}")
    report = train_mod.evaluate(params, tasks, cfg, args.episodes, args.seed)
    meta = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "episodes": args.episodes,
        "seed": args.seed,
        "train_config": checkpoint.train_config,
    }
    episodes_path, summary_path = _write_eval(Path(args.out), report, meta)
    print(
        f"mean empirical AUC {report.mean:.4f} +- {report.std:.4f} over "
        f"{len(report.episodes)} episodes ({report.skipped} skipped); wrote {summary_path}"
    )
    return EXIT_OK


def cmd_ablate(args):
    mode = ABLATION_MODES[args.mode]
    cfg = _load_train_config(args, forced_mode=mode)
    bundle = data_mod.load_task_bundle(args.manifest)
    checkpoint, history = train_mod.train(bundle, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    train_mod.save_checkpoint(ckpt_path, checkpoint)
    _write_curve(out_dir / "curve.csv", cfg, history)
    params, cfg_echo = train_mod.params_from_checkpoint(checkpoint)
    report = train_mod.evaluate(params, bundle.target, cfg_echo, args.episodes, args.eval_seed)
    meta = {
        "ablation": args.mode,
        "episodes": args.episodes,
        "seed": args.eval_seed,
        "train_config": checkpoint.train_config,
    }
    _write_eval(out_dir, report, meta)
    print(
        f"[{args.mode}] best validation AUC {checkpoint.best_val_auc:.4f}; "
        f"target mean AUC {report.mean:.4f} over {len(report.episodes)} episodes"
    )
    return EXIT_OK


def cmd_gradcheck(args):
    report = gradcheck_mod.run_suite(
        seed=args.seed, embed_dim=args.size, instances=args.instances
    )
    for name, err in report["checks"]:
        print(f"{name:28s} max relative error {err:.3e}")
    print(
        f"degenerate-spectrum clamp: {report['clamp_events']} event(s), "
        f"gradient finite: {report['clamp_gradient_finite']}"
    )
    print(f"max relative error {report['max_rel_err']:.3e}")
    if report["max_rel_err"] > GRADCHECK_TOLERANCE or not report["clamp_gradient_finite"]:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
