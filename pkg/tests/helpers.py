"""Shared fixtures: the synthetic ring task family and small utilities."""
import numpy as np

from eigmeta.data import LabeledDataset, TaskBundle, seeded_rng


def ring_task(rng, name, scale_low=0.03, scale_high=1.0, n_normal=120, n_anomaly=40):
    """One task: unit-Gaussian normals, radius-4 ring anomalies, then a
    random rotation+scaling applied to both."""
    normals = rng.standard_normal((n_normal, 2))
    angles = rng.uniform(0.0, 2.0 * np.pi, n_anomaly)
    anomalies = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    scales = np.exp(rng.uniform(np.log(scale_low), np.log(scale_high), 2))
    rotation = np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    transform = rotation @ np.diag(scales)
    attributes = np.vstack([normals, anomalies]) @ transform.T
    labels = np.concatenate([np.zeros(n_normal, int), np.ones(n_anomaly, int)])
    return LabeledDataset(name, attributes, labels)


def ring_bundle(n_train=50, n_valid=10, n_target=20, seed=7, **kwargs):
    rng = seeded_rng(seed, "ring-family")
    bundle = TaskBundle(seed=seed)
    for i in range(n_train):
        bundle.train.append(ring_task(rng, f"ring_train_{i:03d}", **kwargs))
    for i in range(n_valid):
        bundle.valid.append(ring_task(rng, f"ring_valid_{i:03d}", **kwargs))
    for i in range(n_target):
        bundle.target.append(ring_task(rng, f"ring_target_{i:03d}", **kwargs))
    return bundle


def symmetric_task(rng, name, n_normal=200, n_anomaly=60, dim=4):
    """Labels carry no signal: both classes drawn from the same Gaussian."""
    attributes = rng.standard_normal((n_normal + n_anomaly, dim))
    labels = np.concatenate([np.zeros(n_normal, int), np.ones(n_anomaly, int)])
    return LabeledDataset(name, attributes, labels)
