"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The end-to-end
criteria train scaled-down models on the synthetic ring family; the whole
suite is deterministic and finishes in a few minutes on one CPU core.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import ring_bundle

from eigmeta import autodiff as ad
from eigmeta import data as dm
from eigmeta import gradcheck
from eigmeta import model as mm
from eigmeta import training as tm
from eigmeta.cli import main as cli_main
from eigmeta.errors import DegenerateAnomaly
from eigmeta.objective import EpisodeScore, empirical_auc, smoothed_auc


def report(criterion, detail):
    print(f"\nACCEPTANCE criterion {criterion}: PASS - {detail}")


def small_model(rng, input_dim=3, hidden=8, embed_dim=6):
    cfg = mm.ModelConfig(input_dim, hidden, embed_dim, dropout_rate=0.0)
    params = mm.init_params(cfg, rng)
    params.center = 0.5 * rng.standard_normal(embed_dim)
    return params


def random_support(rng, input_dim=3, n_normal=5, n_anomaly=1):
    return dm.SupportSet(
        normals=rng.standard_normal((n_normal, input_dim)),
        anomalies=2.0 + rng.standard_normal((n_anomaly, input_dim)),
    )


# --- criterion 1: gradient fidelity ------------------------------------------------


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    suite = gradcheck.run_suite(seed=0, embed_dim=8, instances=20)
    for name, err in suite["checks"]:
        bound = 1e-3 if name == "near_degenerate_gap" else 1e-4
        assert err < bound, f"{name}: {err:.3e} >= {bound}"
    assert suite["clamp_events"] >= 1  # the degenerate path actually ran
    assert suite["clamp_gradient_finite"]
    # the full episode-loss gradient on its own 20 random instances, J <= 8
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(20):
        embed_dim = int(rng.integers(2, 9))
        worst = max(
            worst,
            gradcheck.check_episode_gradient(rng, embed_dim=embed_dim, mode="eigen", directions=2),
        )
    assert worst < 1e-4
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(1, f"max kernel error {suite['max_rel_err']:.2e}, "
              f"episode-loss error {worst:.2e}, {elapsed:.1f}s")


# --- criterion 2: eigen-adaptation optimality ----------------------------------------


def test_criterion_2_adaptation_beats_random_directions():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    margin = math.inf
    for _ in range(50):
        embed_dim = int(rng.integers(2, 7))
        params = small_model(rng, embed_dim=embed_dim)
        support = random_support(
            rng, n_normal=int(rng.integers(2, 7)), n_anomaly=int(rng.integers(1, 4))
        )
        task_repr = mm.encode_task(support, params)
        s_anom, s_norm = mm.scatter_matrices(support, task_repr, params)
        result = mm.adapt(support, params)
        w = result.projection.value[:, 0]
        best = (w @ s_anom.value @ w) / (w @ s_norm.value @ w)
        dirs = rng.standard_normal((100_000, embed_dim))
        num = np.einsum("ij,jk,ik->i", dirs, s_anom.value, dirs)
        den = np.einsum("ij,jk,ik->i", dirs, s_norm.value, dirs)
        margin = min(margin, best - np.max(num / den))
        assert best >= np.max(num / den) - 1e-9
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report(2, f"50 episodes x 1e5 directions, worst margin {margin:+.2e}, {elapsed:.1f}s")


# --- criterion 3: closed form vs eigenproblem ----------------------------------------


def test_criterion_3_single_anomaly_closed_form_collinear():
    rng = np.random.default_rng(11)
    checked = 0
    worst = 1.0
    while checked < 100:
        params = small_model(rng, embed_dim=int(rng.integers(2, 8)))
        support = random_support(rng, n_normal=int(rng.integers(1, 7)), n_anomaly=1)
        try:
            w_closed = mm.adapt_single(support, params).projection.value[:, 0]
        except DegenerateAnomaly:  # dead embedding, not an N_A=1 episode to score
            continue
        w_eigen = mm.adapt(support, params).projection.value[:, 0]
        cosine = abs(float(w_eigen @ w_closed))
        worst = min(worst, cosine)
        assert cosine >= 1.0 - 1e-8
        checked += 1
    report(3, f"100 episodes, worst |cos| = 1 - {1.0 - worst:.2e}")


# --- criterion 4: AUC correctness ------------------------------------------------------


def test_criterion_4_auc_against_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        a = rng.integers(-5, 6, size=int(rng.integers(1, 9))).astype(float)
        n = rng.integers(-5, 6, size=int(rng.integers(1, 9))).astype(float)
        wins = sum(1 for x in a for y in n if x > y)
        assert empirical_auc(EpisodeScore(a, n)) == wins / (len(a) * len(n))
    tied = EpisodeScore(np.full(5, 3.0), np.full(7, 3.0))
    assert smoothed_auc(tied) == 0.5
    # tie-free grid scores: scaling by 1e3 saturates every pairwise sigmoid
    worst = 0.0
    for _ in range(50):
        values = rng.permutation(np.arange(14) * 0.05)
        a, n = values[:6], values[6:]
        gap = abs(
            smoothed_auc(EpisodeScore(a * 1e3, n * 1e3)) - empirical_auc(EpisodeScore(a, n))
        )
        worst = max(worst, gap)
        assert gap <= 1e-3
    report(4, f"1000 brute-force matches, ties exact 0.5, saturation gap {worst:.1e}")


# --- criterion 5: invariance suite -------------------------------------------------------


def test_criterion_5_invariances():
    rng = np.random.default_rng(17)
    # permutation invariance of the task encoding
    worst_perm = 0.0
    for _ in range(20):
        params = small_model(rng)
        support = random_support(rng, n_normal=int(rng.integers(2, 7)),
                                 n_anomaly=int(rng.integers(1, 4)))
        base = mm.encode_task(support, params).value
        perm = dm.SupportSet(
            support.normals[rng.permutation(support.normals.shape[0])],
            support.anomalies[rng.permutation(support.anomalies.shape[0])],
        )
        other = mm.encode_task(perm, params).value
        rel = np.max(np.abs(other - base)) / max(1.0, np.max(np.abs(base)))
        worst_perm = max(worst_perm, rel)
        assert rel <= 1e-9
    # empirical AUC exactly invariant under positive rescaling of the direction
    for _ in range(10):
        params = small_model(rng)
        support = random_support(rng)
        result = mm.adapt(support, params)
        queries_a = 2.0 + rng.standard_normal((5, 3))
        queries_n = rng.standard_normal((8, 3))
        s_a = mm.anomaly_score(queries_a, result, params).value.ravel()
        s_n = mm.anomaly_score(queries_n, result, params).value.ravel()
        base_auc = empirical_auc(EpisodeScore(s_a, s_n))
        for t in (0.5, 2.0, 8.0):
            scaled = mm.AdaptationResult(
                mode="eigen",
                projection=ad.Tensor(t * result.projection.value),
                task_repr=result.task_repr,
            )
            t_a = mm.anomaly_score(queries_a, scaled, params).value.ravel()
            t_n = mm.anomaly_score(queries_n, scaled, params).value.ravel()
            assert empirical_auc(EpisodeScore(t_a, t_n)) == base_auc
    # ridge keeps the normal scatter positive definite
    worst_eig = math.inf
    for _ in range(200):
        params = small_model(rng)
        params.log_ridge = ad.Tensor(np.asarray(float(rng.uniform(-2.0, 1.0))),
                                     requires_grad=True)
        support = random_support(rng, n_normal=int(rng.integers(1, 7)))
        task_repr = mm.encode_task(support, params)
        _, s_norm = mm.scatter_matrices(support, task_repr, params)
        ridge = float(np.exp(params.log_ridge.value))
        slack = np.linalg.eigvalsh(s_norm.value)[0] - ridge
        worst_eig = min(worst_eig, slack)
        assert slack >= -1e-10
    report(5, f"permutation {worst_perm:.1e}, rescaling exact, "
              f"min-eig slack {worst_eig:+.1e} over 200 episodes")


# --- criterion 6: end-to-end learning -------------------------------------------------------


def acceptance_train_config(mode="eigen", seed=4):
    return tm.TrainConfig(
        mode=mode,
        max_updates=2000,
        hidden_units=32,
        embed_dim=16,
        n_support_anomaly=0 if mode == "normal_only" else 1,
        validation_interval=100,
        validation_episodes=30,
        patience=20,
        center_episodes=30,
        projected_dim=8,
        seed=seed,
    )


def null_model(bundle, cfg):
    """Initialized-but-untrained parameters with the center fixed."""
    model_cfg = mm.ModelConfig(2, cfg.hidden_units, cfg.embed_dim, cfg.dropout_rate)
    params = mm.init_params(model_cfg, dm.seeded_rng(cfg.seed, "init"))
    params.center = mm.fix_center(
        bundle.train, params, cfg.center_episodes, dm.seeded_rng(cfg.seed, "center"),
        cfg.episode_kwargs(), cfg.mode,
    )
    return params


def test_criterion_6_end_to_end_learning():
    start = time.perf_counter()
    bundle = ring_bundle(n_train=50, n_valid=10, n_target=20, seed=7)
    cfg = acceptance_train_config(seed=4)
    checkpoint, _ = tm.train(bundle, cfg)
    params, cfg_echo = tm.params_from_checkpoint(checkpoint)
    trained = tm.evaluate(params, bundle.target, cfg_echo, 100, seed=99)
    untrained = tm.evaluate(null_model(bundle, cfg), bundle.target, cfg, 100, seed=99)
    elapsed = time.perf_counter() - start
    assert trained.mean >= 0.90
    assert trained.mean - untrained.mean >= 0.45
    assert elapsed < 300.0
    report(6, f"trained AUC {trained.mean:.3f}, null {untrained.mean:.3f}, "
              f"gap {trained.mean - untrained.mean:.3f}, {elapsed:.0f}s")


# --- criterion 7: ablation ordering -----------------------------------------------------------


def test_criterion_7_ablation_ordering():
    bundle = ring_bundle(n_train=50, n_valid=10, n_target=20, seed=7)
    means = {}
    for mode in ("eigen", "woproj", "normal_only"):
        aucs = []
        for seed in range(5):
            cfg = acceptance_train_config(mode=mode, seed=seed)
            checkpoint, _ = tm.train(bundle, cfg)
            params, cfg_echo = tm.params_from_checkpoint(checkpoint)
            rep = tm.evaluate(params, bundle.target, cfg_echo, 100, seed=1000 + seed)
            aucs.append(rep.mean)
        means[mode] = float(np.mean(aucs))
    assert means["eigen"] >= means["woproj"] - 0.02
    assert means["eigen"] >= means["normal_only"] - 0.02
    report(7, f"full {means['eigen']:.3f} vs woproj {means['woproj']:.3f} "
              f"vs woanomaly {means['normal_only']:.3f} (5 seeds each)")


# --- criterion 8: single-dataset spot check (optional) ------------------------------------------


def _glass_csv():
    candidate = os.environ.get("EIGMETA_GLASS_CSV", "")
    if candidate and Path(candidate).exists():
        return Path(candidate)
    local = Path(__file__).parent / "data" / "glass.csv"
    return local if local.exists() else None


@pytest.mark.skipif(_glass_csv() is None,
                    reason="Glass dataset not available (network-dependent); "
                           "set EIGMETA_GLASS_CSV to run")
def test_criterion_8_glass_spot_check():
    base = dm.load_csv(_glass_csv(), normalize=True)
    bundle = dm.synthesize_tasks(base, n_train=40, n_valid=5, n_target=10, seed=0)
    cfg = tm.TrainConfig(
        mode="eigen", max_updates=2000, hidden_units=32, embed_dim=16,
        validation_interval=100, validation_episodes=30, patience=20,
        center_episodes=30, projected_dim=8, seed=0,
        n_support_normal=5, n_support_anomaly=1, n_query_normal=25, n_query_anomaly=5,
    )
    checkpoint, _ = tm.train(bundle, cfg)
    params, cfg_echo = tm.params_from_checkpoint(checkpoint)
    trained = tm.evaluate(params, bundle.target, cfg_echo, 100, seed=99)
    model_cfg = mm.ModelConfig(base.dim, cfg.hidden_units, cfg.embed_dim, cfg.dropout_rate)
    null = mm.init_params(model_cfg, dm.seeded_rng(cfg.seed, "init"))
    null.center = mm.fix_center(
        bundle.train, null, cfg.center_episodes, dm.seeded_rng(cfg.seed, "center"),
        cfg.episode_kwargs(),
    )
    untrained = tm.evaluate(null, bundle.target, cfg, 100, seed=99)
    assert trained.mean - untrained.mean >= 0.15
    report(8, f"glass trained {trained.mean:.3f} vs null {untrained.mean:.3f}")


# --- criterion 9: determinism ----------------------------------------------------------------------


def test_criterion_9_bit_identical_runs(tmp_path):
    bundle = ring_bundle(n_train=6, n_valid=2, n_target=3, seed=9,
                         n_normal=90, n_anomaly=30)
    manifest = dm.save_task_bundle(bundle, tmp_path / "tasks")
    config = tmp_path / "cfg.toml"
    config.write_text(
        "max_updates = 30\nhidden_units = 8\nembed_dim = 8\n"
        "validation_interval = 15\nvalidation_episodes = 4\npatience = 5\n"
        "center_episodes = 5\nn_query_normal = 10\nn_query_anomaly = 3\n"
        "projected_dim = 4\nseed = 12\n"
    )
    outputs = []
    for name in ("run_a", "run_b"):
        run_dir = tmp_path / name
        assert cli_main([
            "train", "--manifest", str(manifest), "--config", str(config),
            "--out", str(run_dir),
        ]) == 0
        eval_dir = tmp_path / f"{name}_eval"
        assert cli_main([
            "eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
            "--manifest", str(manifest), "--split", "target",
            "--episodes", "10", "--seed", "3", "--out", str(eval_dir),
        ]) == 0
        outputs.append((run_dir, eval_dir))
    (run_a, eval_a), (run_b, eval_b) = outputs
    assert (run_a / "checkpoint.bin").read_bytes() == (run_b / "checkpoint.bin").read_bytes()
    assert (run_a / "curve.csv").read_bytes() == (run_b / "curve.csv").read_bytes()
    # the eval CSVs embed the checkpoint path, which legitimately differs;
    # compare everything below the header comment plus the summaries
    tail_a = (eval_a / "episodes.csv").read_text().splitlines()[1:]
    tail_b = (eval_b / "episodes.csv").read_text().splitlines()[1:]
    assert tail_a == tail_b
    sum_a = json.loads((eval_a / "summary.json").read_text())
    sum_b = json.loads((eval_b / "summary.json").read_text())
    sum_a["config"].pop("checkpoint")
    sum_b["config"].pop("checkpoint")
    assert sum_a == sum_b
    report(9, "checkpoints, curves, and evaluation outputs are bit-identical")
