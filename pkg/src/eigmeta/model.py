"""The meta-anomaly model: set encoder, task-conditioned embedding, fixed
center, and the task adaptations that produce anomaly scores.

A task is summarized from its support set by a permutation-invariant
encoder (per-instance net, mean pool, set net). Each instance is then
embedded conditioned on that summary. Adaptation picks, per task, the
direction in embedding space that maximizes the ratio of anomalous to
normal mean squared distance from a fixed center; queries are scored by
squared distance from the center along that direction. All adaptation
routes are differentiable so the surrounding networks train end to end.

Modes:

* ``eigen``        dominant generalized eigenvector of the two scatters
* ``single``       closed form for exactly one support anomaly
* ``normal_only``  least-squares projection matrix from normals alone
* ``wonn``         no networks: raw attributes play the embedding role
* ``woproj``       no adaptation: score by full-space distance from center
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .autodiff import Tensor
from .errors import (
    DegenerateAnomaly,
    DimensionMismatch,
    EmptySupport,
    NoAnomalies,
    NoNormalInstances,
    NotSingleAnomaly,
)

MODES = ("eigen", "single", "normal_only", "wonn", "woproj")
COLLAPSE_GUARD = 0.1


@dataclass
class ModelConfig:
    input_dim: int
    hidden_units: int = 256
    embed_dim: int = 256
    dropout_rate: float = 0.1


@dataclass
class NormalOnlyConfig:
    """Settings for the normals-only least-squares adaptation."""

    projected_dim: int = 32
    ridge_scale: float = 1e-3


@dataclass
class ModelParams:
    """All trainable weights plus the fixed center.

    ``feat_*`` is the per-instance support encoder, ``pool_*`` the set
    encoder applied to the pooled features, ``embed_weights`` the
    task-conditioned embedding net. The embedding net carries no bias
    terms so it cannot collapse every input onto the center. The ridge
    weight added to the normal scatter is trained through its log;
    ``center`` is fixed after initialization and never trained.
    """

    config: ModelConfig
    feat_weights: list = field(default_factory=list)
    feat_biases: list = field(default_factory=list)
    pool_weights: list = field(default_factory=list)
    pool_biases: list = field(default_factory=list)
    embed_weights: list = field(default_factory=list)
    log_ridge: Tensor = None
    center: np.ndarray = None

    def trainable(self):
        return (
            self.feat_weights
            + self.feat_biases
            + self.pool_weights
            + self.pool_biases
            + self.embed_weights
            + [self.log_ridge]
        )

    def ridge(self) -> Tensor:
        return ad.exp(self.log_ridge)

    def named_arrays(self):
        out = {}
        for group in ("feat_weights", "feat_biases", "pool_weights", "pool_biases", "embed_weights"):
            for i, t in enumerate(getattr(self, group)):
                out[f"{group}.{i}"] = t.value
        out["log_ridge"] = self.log_ridge.value
        if self.center is not None:
            out["center"] = self.center
        return out

    def copy(self):
        dup = ModelParams(config=self.config)
        for group in ("feat_weights", "feat_biases", "pool_weights", "pool_biases", "embed_weights"):
            setattr(
                dup,
                group,
                [Tensor(t.value.copy(), requires_grad=True) for t in getattr(self, group)],
            )
        dup.log_ridge = Tensor(self.log_ridge.value.copy(), requires_grad=True)
        dup.center = None if self.center is None else self.center.copy()
        return dup


@dataclass
class AdaptationResult:
    """Task-specific projection plus diagnostics from the adaptation."""

    mode: str
    projection: Tensor = None    # (J, 1) direction, or (J, K) matrix, or None
    eigenvalue: Tensor = None    # dominant generalized eigenvalue (eigen mode)
    task_repr: Tensor = None     # (1, hidden) support-set summary
    projected_center: np.ndarray = None  # normal_only: the center in R^K


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config, rng):
    """Fresh parameters: Glorot-uniform weights, zero biases, unit ridge."""
    m, h, j = config.input_dim, config.hidden_units, config.embed_dim
    params = ModelParams(config=config)
    feat_dims = [(m + 1, h), (h, h), (h, h)]
    pool_dims = [(h, h), (h, h), (h, h)]
    embed_dims = [(m + h, j), (j, j), (j, j), (j, j)]
    for fan_in, fan_out in feat_dims:
        params.feat_weights.append(Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True))
        params.feat_biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    for fan_in, fan_out in pool_dims:
        params.pool_weights.append(Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True))
        params.pool_biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    for fan_in, fan_out in embed_dims:
        params.embed_weights.append(Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True))
    params.log_ridge = Tensor(np.asarray(0.0), requires_grad=True)
    return params


def _mlp(x, weights, biases, dropout_rate, train, rng):
    last = len(weights) - 1
    h = x
    for i, w in enumerate(weights):
        h = ad.matmul(h, w)
        if biases is not None:
            h = ad.add(h, biases[i])
        if i < last:
            h = ad.relu(h)
            h = ad.dropout(h, dropout_rate, train, rng)
    return h


def encode_task(support, params, train=False, rng=None):
    """Permutation-invariant summary of the support set, shape (1, hidden).

    Instances enter with their label appended as a 0/1 scalar; features
    are mean-pooled and passed through the set net, so any reordering of
    the support gives the same summary up to float summation noise.
    """
    if support.size == 0:
        raise EmptySupport("support set has no instances")
    if support.normals.shape[1] != params.config.input_dim:
        raise DimensionMismatch(
            f"support dim {support.normals.shape[1]} != input dim {params.config.input_dim}"
        )
    rows = np.vstack(
        [
            np.hstack([support.normals, np.zeros((support.normals.shape[0], 1))]),
            np.hstack([support.anomalies, np.ones((support.anomalies.shape[0], 1))]),
        ]
    )
    feats = _mlp(
        Tensor(rows), params.feat_weights, params.feat_biases,
        params.config.dropout_rate, train, rng,
    )
    pooled = ad.mean_rows(feats)
    return _mlp(
        pooled, params.pool_weights, params.pool_biases,
        params.config.dropout_rate, train, rng,
    )


def embed(x, task_repr, params, train=False, rng=None):
    """Task-conditioned embedding of a batch of instances, shape (n, J)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.config.input_dim:
        raise DimensionMismatch(
            f"instance dim {x.shape[1]} != input dim {params.config.input_dim}"
        )
    tiled = ad.repeat_rows(task_repr, x.shape[0])
    joint = ad.concat_cols(Tensor(x), tiled)
    return _mlp(joint, params.embed_weights, None, params.config.dropout_rate, train, rng)


def _scatter(embedded, center):
    diff = ad.sub(embedded, center)
    return ad.scale(ad.matmul(ad.transpose(diff), diff), 1.0 / embedded.value.shape[0])


def scatter_matrices(support, task_repr, params, train=False, rng=None):
    """Mean outer products of support embeddings about the center.

    Returns ``(anomalous, normal)`` scatters; the normal one carries the
    trained ridge on its diagonal, which keeps it positive definite with
    smallest eigenvalue at least the ridge weight.
    """
    if support.anomalies.shape[0] == 0:
        raise NoAnomalies("anomalous scatter needs at least one support anomaly")
    z_anomaly = embed(support.anomalies, task_repr, params, train, rng)
    z_normal = embed(support.normals, task_repr, params, train, rng)
    s_anomaly = _scatter(z_anomaly, params.center)
    s_normal = ad.add_scaled_identity(_scatter(z_normal, params.center), params.ridge())
    return s_anomaly, s_normal


def adapt(support, params, train=False, rng=None):
    """Task adaptation through the generalized eigenproblem.

    The returned direction maximizes the ratio of mean anomalous to mean
    normal squared center distance in the projected space; the attached
    eigenvalue equals that ratio at the optimum.
    """
    task_repr = encode_task(support, params, train, rng)
    s_anomaly, s_normal = scatter_matrices(support, task_repr, params, train, rng)
    eigenvalue, direction = ad.gen_eig_top(s_anomaly, s_normal)
    return AdaptationResult(
        mode="eigen", projection=direction, eigenvalue=eigenvalue, task_repr=task_repr
    )


def adapt_single(support, params, train=False, rng=None):
    """Closed-form adaptation for a support set with exactly one anomaly.

    Collinear with the eigenproblem route: the anomalous scatter is rank
    one, so the dominant direction is the ridge-whitened offset of the
    anomalous embedding from the center.
    """
    if support.anomalies.shape[0] != 1:
        raise NotSingleAnomaly(
            f"closed form needs exactly 1 support anomaly, got {support.anomalies.shape[0]}"
        )
    task_repr = encode_task(support, params, train, rng)
    z_anomaly = embed(support.anomalies, task_repr, params, train, rng)
    offset = ad.transpose(ad.sub(z_anomaly, params.center))
    scale_ref = max(1.0, float(np.linalg.norm(z_anomaly.value)), float(np.linalg.norm(params.center)))
    if float(np.linalg.norm(offset.value)) < 1e-12 * scale_ref:
        raise DegenerateAnomaly("anomalous embedding coincides with the center")
    z_normal = embed(support.normals, task_repr, params, train, rng)
    s_normal = ad.add_scaled_identity(_scatter(z_normal, params.center), params.ridge())
    direction = ad.unit_column(ad.spd_solve(s_normal, offset))
    return AdaptationResult(mode="single", projection=direction, task_repr=task_repr)


def ridge_projection(embedded, targets, ridge):
    """Least-squares map W minimizing ||embedded @ W - targets||^2 + ridge
    penalty; the workhorse of the normals-only adaptation. ``ridge`` may be
    a float or a scalar tape node."""
    gram = ad.add_scaled_identity(ad.matmul(ad.transpose(embedded), embedded), ridge)
    moment = ad.matmul(ad.transpose(embedded), ad.as_tensor(targets))
    return ad.spd_solve(gram, moment)


def adapt_normal_only(support, params, cfg=None, train=False, rng=None):
    """Adaptation from normal support instances alone.

    Fits the projection matrix that maps normal embeddings onto the
    leading block of the fixed center, via ridge-regularized least
    squares. Support anomalies, if present, are ignored entirely.
    """
    cfg = cfg or NormalOnlyConfig()
    j = params.config.embed_dim
    if not 1 <= cfg.projected_dim <= j:
        raise DimensionMismatch(
            f"projected dim {cfg.projected_dim} must be in [1, {j}]"
        )
    if support.normals.shape[0] == 0:
        raise NoNormalInstances("normals-only adaptation needs normal instances")
    normals_only = data_mod.SupportSet(
        normals=support.normals, anomalies=np.zeros((0, support.normals.shape[1]))
    )
    task_repr = encode_task(normals_only, params, train, rng)
    embedded = embed(support.normals, task_repr, params, train, rng)
    projected_center = params.center[: cfg.projected_dim]
    targets = np.tile(projected_center, (support.normals.shape[0], 1))
    if not np.any(embedded.value):
        # every support embedding died (bias-free relu nets can collapse);
        # the gram matrix would be exactly singular
        raise DegenerateAnomaly("all normal support embeddings are zero")
    # the absolute component matters: a ridge proportional to the embedding
    # scale alone leaves the loss invariant under uniform shrinkage of the
    # embeddings, and training drifts that flat direction into relu death
    ridge = ad.add(ad.scale(ad.sum_all(ad.square(embedded)), cfg.ridge_scale / j),
                   ad.as_tensor(cfg.ridge_scale))
    projection = ridge_projection(embedded, targets, ridge)
    return AdaptationResult(
        mode="normal_only",
        projection=projection,
        task_repr=task_repr,
        projected_center=projected_center,
    )


def adapt_wonn(support, params):
    """Adaptation over raw attributes: the eigen route with the identity
    playing the embedding. Only the ridge weight is trainable."""
    if support.anomalies.shape[0] == 0:
        raise NoAnomalies("anomalous scatter needs at least one support anomaly")
    s_anomaly = _scatter(Tensor(support.anomalies), params.center)
    s_normal = ad.add_scaled_identity(
        _scatter(Tensor(support.normals), params.center), params.ridge()
    )
    eigenvalue, direction = ad.gen_eig_top(s_anomaly, s_normal)
    return AdaptationResult(mode="wonn", projection=direction, eigenvalue=eigenvalue)


def adapt_woproj(support, params, train=False, rng=None):
    """No adaptation step: scoring falls back to full-space center distance."""
    task_repr = encode_task(support, params, train, rng)
    return AdaptationResult(mode="woproj", task_repr=task_repr)


def anomaly_score(x, adaptation, params, train=False, rng=None):
    """Anomaly scores for a batch of instances, shape (n, 1).

    Squared distance from the center along the adapted projection; in
    ``woproj`` mode the full-space squared distance, in ``normal_only``
    mode the squared distance from the projected center.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if adaptation.mode == "wonn":
        if x.shape[1] != params.center.shape[0]:
            raise DimensionMismatch(
                f"instance dim {x.shape[1]} != center dim {params.center.shape[0]}"
            )
        embedded = Tensor(x)
    else:
        embedded = embed(x, adaptation.task_repr, params, train, rng)
    if adaptation.mode == "woproj":
        diff = ad.sub(embedded, params.center)
        return ad.row_sums(ad.square(diff))
    if adaptation.mode == "normal_only":
        projected = ad.matmul(embedded, adaptation.projection)
        diff = ad.sub(projected, adaptation.projected_center)
        return ad.row_sums(ad.square(diff))
    projected = ad.matmul(embedded, adaptation.projection)
    center_proj = ad.matmul(
        ad.as_tensor(params.center[None, :]), adaptation.projection
    )
    return ad.square(ad.sub(projected, center_proj))


def fix_center(tasks, params, n_episodes, rng, episode_counts=None, mode="eigen"):
    """Fix the shared center from the initial parameters.

    Averages the embeddings of normal support instances over sampled
    training episodes (raw attributes in ``wonn`` mode, which never runs
    the networks). If the mean lands within ``COLLAPSE_GUARD`` of the
    origin, near-zero coordinates are pushed out to +-COLLAPSE_GUARD so
    a zero-mapping embedding cannot become a trivial optimum.
    """
    counts = dict(episode_counts or {})
    rows = []
    for _ in range(n_episodes):
        task = tasks[int(rng.integers(len(tasks)))]
        episode = data_mod.sample_episode(task, rng, **counts)
        if mode == "wonn":
            rows.append(episode.support.normals)
        else:
            task_repr = encode_task(episode.support, params, train=False)
            embedded = embed(episode.support.normals, task_repr, params, train=False)
            rows.append(embedded.value)
    if not rows:
        raise NoNormalInstances("no episodes sampled while fixing the center")
    stacked = np.vstack(rows)
    if stacked.shape[0] == 0:
        raise NoNormalInstances("no normal instances seen while fixing the center")
    center = stacked.mean(axis=0)
    if np.linalg.norm(center) < COLLAPSE_GUARD:
        small = np.abs(center) < COLLAPSE_GUARD
        center[small] = np.where(center[small] >= 0.0, COLLAPSE_GUARD, -COLLAPSE_GUARD)
    return center
