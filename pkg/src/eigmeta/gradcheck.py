"""Finite-difference validation of every derivative rule in the package.

Each check builds a scalar function of random inputs, runs the reverse
pass, and compares directional derivatives against central finite
differences (step 1e-5, double precision). The ``gradcheck`` CLI command
runs the whole suite and fails when any relative error exceeds 1e-3.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import linalg
from . import model as model_mod
from . import training as train_mod
from .model import ModelConfig, NormalOnlyConfig

FD_STEP = 1e-5


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _fd_check(make_loss, arrays, rng, h=FD_STEP, directions=2):
    """Worst relative error between backward gradients and central FD.

    ``make_loss`` maps a list of arrays to ``(scalar Tensor, leaf Tensors)``
    and must be deterministic in those arrays.
    """
    loss, leaves = make_loss([a.copy() for a in arrays])
    ad.backward(loss)
    grads = [ad.grad_or_zeros(leaf) for leaf in leaves]
    worst = 0.0
    for k in range(len(arrays)):
        for _ in range(directions):
            d = rng.standard_normal(arrays[k].shape)
            norm = np.linalg.norm(d)
            if norm == 0.0:
                continue
            d = d / norm
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k] = plus[k] + h * d
            minus[k] = minus[k] - h * d
            loss_p, _ = make_loss(plus)
            loss_m, _ = make_loss(minus)
            fd = (float(loss_p.value) - float(loss_m.value)) / (2.0 * h)
            an = float(np.sum(grads[k] * d))
            worst = max(worst, rel_err(fd, an))
    return worst


def _symmetrize(t):
    return ad.scale(ad.add(t, ad.transpose(t)), 0.5)


def _spd(t, shift):
    return ad.add(_symmetrize(t), shift * np.eye(t.value.shape[0]))


# --- linalg kernels ---------------------------------------------------------


def check_cholesky(rng, n=5):
    a0 = rng.standard_normal((n, n))
    omega = rng.standard_normal((n, n))

    def make(arrays):
        leaf = ad.Tensor(arrays[0], requires_grad=True)
        low = ad.cholesky(_spd(leaf, 2.0 * n))
        return ad.sum_all(ad.mul(low, omega)), [leaf]

    return _fd_check(make, [a0], rng)


def check_tri_solve(rng, n=5, transposed=False):
    a0 = rng.standard_normal((n, n))
    b0 = rng.standard_normal((n, 3))
    omega = rng.standard_normal((n, 3))

    def make(arrays):
        mat = ad.Tensor(arrays[0], requires_grad=True)
        rhs = ad.Tensor(arrays[1], requires_grad=True)
        low = ad.cholesky(_spd(mat, 2.0 * n))
        x = ad.tri_solve(low, rhs, transposed=transposed)
        return ad.sum_all(ad.mul(x, omega)), [mat, rhs]

    return _fd_check(make, [a0, b0], rng)


def check_sym_eig(rng, n=5):
    """Direct check of vjp_sym_eig outside the tape."""
    a0 = rng.standard_normal((n, n))
    a0 = a0 + a0.T
    vals_bar = rng.standard_normal(n)
    vecs_bar = rng.standard_normal((n, n))

    def scalar(a):
        pairs = linalg.sym_eig(a)
        vals = np.array([p.value for p in pairs])
        vecs = np.stack([p.vector for p in pairs], axis=1)
        return float(vals_bar @ vals + np.sum(vecs_bar * vecs))

    pairs = linalg.sym_eig(a0)
    vals = np.array([p.value for p in pairs])
    vecs = np.stack([p.vector for p in pairs], axis=1)
    a_bar = linalg.vjp_sym_eig(vals, vecs, vals_bar, vecs_bar)
    worst = 0.0
    for _ in range(3):
        d = rng.standard_normal((n, n))
        d = d + d.T
        d = d / np.linalg.norm(d)
        fd = (scalar(a0 + FD_STEP * d) - scalar(a0 - FD_STEP * d)) / (2.0 * FD_STEP)
        worst = max(worst, rel_err(fd, float(np.sum(a_bar * d))))
    return worst


def check_gen_eig(rng, n=5):
    a0 = rng.standard_normal((n, n))
    n0 = rng.standard_normal((n, n))
    w_bar = rng.standard_normal(n)

    def make(arrays):
        raw_a = ad.Tensor(arrays[0], requires_grad=True)
        raw_n = ad.Tensor(arrays[1], requires_grad=True)
        s_a = ad.matmul(ad.transpose(raw_a), raw_a)
        s_n = _spd(raw_n, 2.0 * n)
        lam, vec = ad.gen_eig_top(s_a, s_n)
        return ad.add(ad.scale(lam, 0.3), ad.sum_all(ad.mul(vec, w_bar[:, None]))), [raw_a, raw_n]

    return _fd_check(make, [a0, n0], rng)


def check_near_degenerate(rng):
    """Kernel gradients near an eigenvalue collision.

    Two parts: a small-gap (but unclamped) fixture that must still match
    finite differences, and an exactly-degenerate fixture that must take
    the clamped path, bump the diagnostics counter, and return finite
    gradients. Returns ``(worst relative error, clamp events, finite)``.
    """
    # gap ~3e-3 of the spread: steep but still FD-checkable
    base = np.diag([1.0, 1.0 + 3e-3])
    rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    a0 = rot @ base @ rot.T
    w_bar = rng.standard_normal(2)

    def make(arrays):
        leaf = ad.Tensor(arrays[0], requires_grad=True)
        s_a = _symmetrize(leaf)
        lam, vec = ad.gen_eig_top(s_a, np.eye(2))
        return ad.add(ad.scale(lam, 0.5), ad.sum_all(ad.mul(vec, w_bar[:, None]))), [leaf]

    worst = _fd_check(make, [a0], rng, directions=3)

    linalg.diagnostics.reset()
    s_a = ad.Tensor(np.eye(2), requires_grad=True)
    lam, vec = ad.gen_eig_top(s_a, np.eye(2))
    loss = ad.add(ad.scale(lam, 0.5), ad.sum_all(ad.mul(vec, w_bar[:, None])))
    ad.backward(loss)
    clamped_grad = ad.grad_or_zeros(s_a)
    events = linalg.diagnostics.degenerate_spectrum_events
    finite = bool(np.all(np.isfinite(clamped_grad)))
    return worst, events, finite


# --- tape primitives ----------------------------------------------------------


def _reduce_build(op):
    def build(arrays):
        leaf = ad.Tensor(arrays[0], requires_grad=True)
        return op(leaf), [leaf]

    return build


def _primitive_cases(rng):
    """One scalarized graph per registered tape primitive.

    Each builder maps a list of input arrays to ``(scalar loss, leaves)``
    with the leaves in the same order as the arrays.
    """
    n, m = 4, 3
    omega_nm = rng.standard_normal((n, m))
    omega_mn = rng.standard_normal((m, n))
    omega_n1 = rng.standard_normal((n, 1))
    omega_nn = rng.standard_normal((n, n))
    omega_wide = rng.standard_normal((n, 2 * m))
    omega_n2 = rng.standard_normal((n, 2))

    def leaves(arrays):
        return [ad.Tensor(a, requires_grad=True) for a in arrays]

    def unary(op, omega):
        def build(arrays):
            ls = leaves(arrays)
            return ad.sum_all(ad.mul(op(*ls), omega)), ls

        return build

    a_nm = rng.standard_normal((n, m))
    b_nm = rng.standard_normal((n, m))
    bias = rng.standard_normal(m)
    a_mn = rng.standard_normal((m, n))
    a_nn = rng.standard_normal((n, n))
    col = rng.standard_normal((n, 1)) + 2.0
    scalar = np.asarray(0.37)
    # keep relu inputs away from the kink so central differences are valid
    relu_in = a_nm + np.sign(a_nm) * 0.2

    def exp_build(arrays):
        ls = leaves(arrays)
        return ad.exp(ls[0]), ls

    def dropout_build(arrays):
        ls = leaves(arrays)
        mask_rng = np.random.default_rng(1234)  # identical mask on every call
        return ad.sum_all(ad.mul(ad.dropout(ls[0], 0.3, True, mask_rng), omega_nm)), ls

    def spd_solve_build(arrays):
        ls = leaves(arrays)
        return ad.sum_all(ad.mul(ad.spd_solve(_spd(ls[0], 2.0 * n), ls[1]), omega_n2)), ls

    cases = {
        "add_broadcast": ([a_nm, bias], unary(ad.add, omega_nm)),
        "sub": ([a_nm, b_nm], unary(ad.sub, omega_nm)),
        "mul": ([a_nm, b_nm], unary(ad.mul, omega_nm)),
        "neg": ([a_nm], unary(ad.neg, omega_nm)),
        "matmul": ([a_nm, a_mn], unary(ad.matmul, omega_nn)),
        "transpose": ([a_nm], unary(ad.transpose, omega_mn)),
        "square": ([a_nm], unary(ad.square, omega_nm)),
        "exp": ([scalar], exp_build),
        "relu": ([relu_in], unary(ad.relu, omega_nm)),
        "sigmoid": ([a_nm], unary(ad.sigmoid, omega_nm)),
        "concat_cols": ([a_nm, b_nm], unary(ad.concat_cols, omega_wide)),
        "mean_rows": ([a_nm], unary(ad.mean_rows, omega_nm[:1])),
        "repeat_rows": ([a_nm[:1]], unary(lambda t: ad.repeat_rows(t, n), omega_nm)),
        "row_sums": ([a_nm], unary(ad.row_sums, omega_n1)),
        "sum_all": ([a_nm], _reduce_build(ad.sum_all)),
        "mean_all": ([a_nm], _reduce_build(ad.mean_all)),
        "scale": ([a_nm], unary(lambda t: ad.scale(t, 1.7), omega_nm)),
        "add_scaled_identity": ([a_nn, scalar], unary(ad.add_scaled_identity, omega_nn)),
        "unit_column": ([col], unary(ad.unit_column, omega_n1)),
        "dropout": ([a_nm], dropout_build),
        "spd_solve": ([rng.standard_normal((n, n)), rng.standard_normal((n, 2))], spd_solve_build),
    }
    return cases


def check_primitives(rng):
    """(name, worst relative error) for every registered tape primitive."""
    results = []
    for name, (arrays, builder) in _primitive_cases(rng).items():
        results.append((name, _fd_check(builder, arrays, rng)))
    return results


# --- end-to-end episode loss ---------------------------------------------------


def _random_episode(rng, input_dim, n_anomaly=1, n_normal=5):
    support = data_mod.SupportSet(
        normals=rng.standard_normal((n_normal, input_dim)),
        anomalies=2.0 + rng.standard_normal((n_anomaly, input_dim)),
    )
    return data_mod.Episode(
        support=support,
        query_anomalies=2.0 + rng.standard_normal((4, input_dim)),
        query_normals=rng.standard_normal((6, input_dim)),
        task_id="gradcheck",
    )


def check_episode_gradient(rng, embed_dim=6, mode="eigen", directions=3):
    """FD check of the full episode-loss gradient for one adaptation mode.

    The normals-only fixture keeps its gram matrix well conditioned (full
    column rank, non-vanishing ridge): the derivative rules are exact
    either way, but central differences lose accuracy through a
    near-singular solve.
    """
    input_dim = 3
    cfg = ModelConfig(input_dim=input_dim, hidden_units=8, embed_dim=embed_dim, dropout_rate=0.0)
    params = model_mod.init_params(cfg, rng)
    params.center = 0.5 * rng.standard_normal(embed_dim)
    normal_cfg = NormalOnlyConfig(projected_dim=min(3, embed_dim), ridge_scale=1e-2)
    if mode == "normal_only":
        episode = _random_episode(rng, input_dim, n_anomaly=0, n_normal=embed_dim + 3)
    else:
        episode = _random_episode(rng, input_dim, n_anomaly=1)
    leaves = params.trainable()

    def loss_value():
        loss, _ = train_mod.run_episode(params, episode, mode, normal_cfg, train=False)
        return loss

    loss = loss_value()
    ad.zero_grad(leaves)
    ad.backward(loss)
    grads = [ad.grad_or_zeros(p) for p in leaves]
    worst = 0.0
    for _ in range(directions):
        ds = [rng.standard_normal(p.value.shape) for p in leaves]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in ds))
        ds = [d / norm for d in ds]
        saved = [p.value.copy() for p in leaves]
        for p, d in zip(leaves, ds):
            p.value = p.value + FD_STEP * d
        loss_p = float(loss_value().value)
        for p, s, d in zip(leaves, saved, ds):
            p.value = s - FD_STEP * d
        loss_m = float(loss_value().value)
        for p, s in zip(leaves, saved):
            p.value = s
        fd = (loss_p - loss_m) / (2.0 * FD_STEP)
        an = sum(float(np.sum(g * d)) for g, d in zip(grads, ds))
        worst = max(worst, rel_err(fd, an))
    return worst


# --- suite ----------------------------------------------------------------------


def run_suite(seed=0, embed_dim=6, instances=20):
    """The full gradient-fidelity suite; returns a report dictionary.

    ``instances`` controls how many random kernel instances each linalg
    VJP is checked on; sizes are drawn up to 8.
    """
    rng = np.random.default_rng(seed)
    checks = []

    kernel_checks = (
        ("cholesky", lambda r, n: check_cholesky(r, n)),
        ("tri_solve", lambda r, n: check_tri_solve(r, n, transposed=False)),
        ("tri_solve_transposed", lambda r, n: check_tri_solve(r, n, transposed=True)),
        ("sym_eig", lambda r, n: check_sym_eig(r, n)),
        ("gen_eig_max", lambda r, n: check_gen_eig(r, n)),
    )
    for name, fn in kernel_checks:
        worst = 0.0
        for _ in range(instances):
            n = int(rng.integers(2, 9))
            worst = max(worst, fn(rng, n))
        checks.append((name, worst))

    for name, err in check_primitives(rng):
        checks.append((f"op:{name}", err))

    for mode in ("eigen", "single", "normal_only"):
        checks.append((f"episode_loss:{mode}", check_episode_gradient(rng, embed_dim, mode)))

    near_err, clamp_events, clamp_finite = check_near_degenerate(rng)
    checks.append(("near_degenerate_gap", near_err))

    return {
        "checks": checks,
        "max_rel_err": max(err for _, err in checks),
        "clamp_events": clamp_events,
        "clamp_gradient_finite": clamp_finite,
    }
