import csv
import json

import numpy as np
import pytest

from eigmeta import data as dm
from eigmeta.errors import (
    DegenerateColumn,
    InsufficientInstances,
    NonBinaryLabel,
    ParseError,
)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# --- load_csv -----------------------------------------------------------------


def test_load_csv_roundtrips_exact_values(tmp_path):
    path = tmp_path / "tiny.csv"
    rows = [[0.25, -1.5, 0], [3.0, 2.125, 1], [-0.75, 4.5, 0]]
    write_csv(path, ["a", "b", "label"], rows)
    ds = dm.load_csv(path, normalize=False)
    assert ds.name == "tiny"
    assert np.array_equal(ds.attributes, [[0.25, -1.5], [3.0, 2.125], [-0.75, 4.5]])
    assert np.array_equal(ds.labels, [0, 1, 0])
    assert ds.n_normal == 2 and ds.n_anomaly == 1


def test_load_csv_label_column_anywhere(tmp_path):
    path = tmp_path / "mid.csv"
    write_csv(path, ["a", "label", "b"], [[1.0, 0, 2.0], [3.0, 1, 4.0]])
    ds = dm.load_csv(path, normalize=False)
    assert np.array_equal(ds.attributes, [[1.0, 2.0], [3.0, 4.0]])


def test_load_csv_rejects_nonbinary_labels(tmp_path):
    path = tmp_path / "bad.csv"
    write_csv(path, ["a", "label"], [[1.0, 0], [2.0, 1], [3.0, 2]])
    with pytest.raises(NonBinaryLabel):
        dm.load_csv(path)


def test_load_csv_parse_error_reports_location(tmp_path):
    path = tmp_path / "text.csv"
    write_csv(path, ["a", "label"], [[1.0, 0], ["oops", 1]])
    with pytest.raises(ParseError) as err:
        dm.load_csv(path)
    assert err.value.row == 3
    assert err.value.column == "a"


def test_load_csv_ragged_row(tmp_path):
    path = tmp_path / "ragged.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("a,b,label\n1.0,2.0,0\n1.0,0\n")
    with pytest.raises(ParseError):
        dm.load_csv(path)


def test_load_csv_missing_label_column(tmp_path):
    path = tmp_path / "nolabel.csv"
    write_csv(path, ["a", "b"], [[1.0, 2.0]])
    with pytest.raises(ParseError):
        dm.load_csv(path)


def test_load_csv_normalization_moments(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "norm.csv"
    rows = np.column_stack(
        [rng.normal(5.0, 3.0, 50), rng.normal(-2.0, 0.5, 50), rng.integers(0, 2, 50)]
    )
    write_csv(path, ["a", "b", "label"], rows.tolist())
    ds = dm.load_csv(path, normalize=True)
    assert np.all(np.abs(ds.attributes.mean(axis=0)) <= 1e-9)
    assert np.all(np.abs(ds.attributes.std(axis=0) - 1.0) <= 1e-9)


def test_load_csv_drops_constant_column_with_warning(tmp_path):
    path = tmp_path / "const.csv"
    write_csv(path, ["a", "flat", "label"], [[1.0, 7.0, 0], [2.0, 7.0, 1], [4.0, 7.0, 0]])
    with pytest.warns(DegenerateColumn):
        ds = dm.load_csv(path, normalize=True)
    assert ds.attributes.shape == (3, 1)


# --- task synthesis --------------------------------------------------------------


def base_dataset(rng, n=60, dim=3):
    attrs = rng.standard_normal((n, dim))
    labels = (rng.random(n) < 0.3).astype(int)
    labels[:2] = [0, 1]  # both classes always present
    return dm.LabeledDataset("base", attrs, labels)


def test_identity_transform_preserves_task():
    rng = np.random.default_rng(1)
    base = base_dataset(rng)
    task = dm.apply_task_transform(base, np.eye(3), "copy")
    assert np.array_equal(task.attributes, base.attributes)
    assert np.array_equal(task.labels, base.labels)


def test_synthesize_is_deterministic_and_preserves_labels():
    rng = np.random.default_rng(2)
    base = base_dataset(rng)
    one = dm.synthesize_tasks(base, 4, 2, 2, seed=9)
    two = dm.synthesize_tasks(base, 4, 2, 2, seed=9)
    assert len(one.train) == 4 and len(one.valid) == 2 and len(one.target) == 2
    for t1, t2 in zip(one.all_tasks(), two.all_tasks()):
        assert np.array_equal(t1.attributes, t2.attributes)
        assert np.array_equal(t1.labels, base.labels)
    other = dm.synthesize_tasks(base, 4, 2, 2, seed=10)
    assert not np.array_equal(one.train[0].attributes, other.train[0].attributes)


def test_synthesized_tasks_differ_from_each_other():
    rng = np.random.default_rng(3)
    base = base_dataset(rng)
    bundle = dm.synthesize_tasks(base, 3, 1, 1, seed=0)
    a, b = bundle.train[0].attributes, bundle.train[1].attributes
    assert not np.allclose(a, b)


def test_mixing_matrix_entries_are_uniform():
    # recover the mixing matrices through an identity-attribute base task;
    # pooled entries across tasks give over a million draws
    dim = 28
    base = dm.LabeledDataset("probe", np.eye(dim), np.arange(dim) % 2)
    bundle = dm.synthesize_tasks(base, 1300, 0, 0, seed=4)
    draws = np.concatenate([t.attributes.ravel() for t in bundle.train])
    assert draws.size >= 1_000_000
    draws = np.sort(draws)
    grid = (np.arange(1, draws.size + 1)) / draws.size
    ks = np.max(np.abs(grid - (draws + 1.0) / 2.0))
    assert ks < 0.01
    assert draws.min() >= -1.0 and draws.max() <= 1.0


# --- episode sampling --------------------------------------------------------------


def test_sample_episode_minimal_task_uses_everything():
    rng = np.random.default_rng(5)
    attrs = np.arange(72, dtype=float).reshape(36, 2)
    labels = np.concatenate([np.zeros(30, int), np.ones(6, int)])
    task = dm.LabeledDataset("minimal", attrs, labels)
    episode = dm.sample_episode(task, np.random.default_rng(0))
    used = np.vstack(
        [
            episode.support.normals,
            episode.support.anomalies,
            episode.query_normals,
            episode.query_anomalies,
        ]
    )
    assert used.shape == (36, 2)
    assert np.array_equal(
        np.sort(used.ravel()), np.sort(attrs.ravel())
    )  # every instance exactly once


def test_sample_episode_counts_and_disjointness():
    rng = np.random.default_rng(6)
    attrs = rng.standard_normal((200, 2))
    labels = np.concatenate([np.zeros(150, int), np.ones(50, int)])
    task = dm.LabeledDataset("big", attrs, labels)
    episode = dm.sample_episode(task, np.random.default_rng(1))
    assert episode.support.normals.shape == (5, 2)
    assert episode.support.anomalies.shape == (1, 2)
    assert episode.query_normals.shape == (25, 2)
    assert episode.query_anomalies.shape == (5, 2)
    rows = {tuple(r) for r in np.vstack([episode.support.normals, episode.query_normals])}
    assert len(rows) == 30  # no instance shared between support and query


def test_sample_episode_insufficient_anomalies():
    task = dm.LabeledDataset("none", np.zeros((40, 2)), np.zeros(40, int))
    with pytest.raises(InsufficientInstances) as err:
        dm.sample_episode(task, np.random.default_rng(0))
    assert "anomal" in str(err.value)


def test_sample_episode_reproducible():
    rng = np.random.default_rng(7)
    attrs = rng.standard_normal((100, 3))
    labels = np.concatenate([np.zeros(80, int), np.ones(20, int)])
    task = dm.LabeledDataset("rep", attrs, labels)
    e1 = dm.sample_episode(task, dm.seeded_rng(3, "episode"))
    e2 = dm.sample_episode(task, dm.seeded_rng(3, "episode"))
    assert np.array_equal(e1.support.normals, e2.support.normals)
    assert np.array_equal(e1.query_anomalies, e2.query_anomalies)


def test_sample_episode_uniform_support_frequency():
    rng = np.random.default_rng(8)
    n_anom = 12
    attrs = rng.standard_normal((60 + n_anom, 2))
    labels = np.concatenate([np.zeros(60, int), np.ones(n_anom, int)])
    task = dm.LabeledDataset("freq", attrs, labels)
    sampler = np.random.default_rng(9)
    counts = np.zeros(n_anom)
    trials = 10_000
    anomaly_rows = attrs[60:]
    for _ in range(trials):
        episode = dm.sample_episode(
            task, sampler, n_support_normal=2, n_support_anomaly=1,
            n_query_normal=2, n_query_anomaly=2,
        )
        idx = np.flatnonzero((anomaly_rows == episode.support.anomalies[0]).all(axis=1))
        counts[idx[0]] += 1
    p = 1.0 / n_anom
    sigma = np.sqrt(p * (1 - p) / trials)
    assert np.all(np.abs(counts / trials - p) <= 3.0 * sigma + 1e-12)


# --- manifest round trip --------------------------------------------------------------


def test_bundle_roundtrips_through_disk(tmp_path):
    rng = np.random.default_rng(10)
    base = base_dataset(rng, n=40)
    bundle = dm.synthesize_tasks(base, 3, 1, 1, seed=11)
    manifest_path = dm.save_task_bundle(bundle, tmp_path / "tasks", meta={"origin": "test"})
    loaded = dm.load_task_bundle(manifest_path)
    assert loaded.seed == bundle.seed
    for original, reread in zip(bundle.all_tasks(), loaded.all_tasks()):
        assert np.array_equal(original.attributes, reread.attributes)
        assert np.array_equal(original.labels, reread.labels)
        assert original.name == reread.name
    manifest = json.loads(manifest_path.read_text())
    assert manifest["config"] == {"origin": "test"}
    splits = {entry["split"] for entry in manifest["tasks"]}
    assert splits == {"train", "valid", "target"}


def test_manifest_version_check(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps({"version": 99, "tasks": []}))
    with pytest.raises(ParseError):
        dm.load_task_bundle(bad)
