"""Dense linear-algebra kernels paired with analytic derivative rules.

Everything operates on plain float64 numpy arrays, is deterministic
(identical inputs give bit-identical outputs), and is sized for the dense
symmetric problems used here (dimensions up to a few hundred).

Forward kernels:

* ``cholesky``     lower-triangular factor of an SPD matrix
* ``tri_solve``    forward/back substitution against a triangular factor
* ``sym_eig``      cyclic-Jacobi symmetric eigendecomposition
* ``gen_eig_max``  dominant eigenpair of ``S_a w = lam * S_n w`` (S_n SPD)

Each kernel has a matching ``vjp_*`` rule that maps output cotangents back
to input cotangents; all of them are validated against central finite
differences in the test suite and by the ``gradcheck`` command.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, NotPositiveDefinite, ShapeMismatch, SingularTriangular

SYMMETRY_TOL = 1e-10
PIVOT_TOL_REL = 1e-12       # Cholesky pivot floor, relative to max diagonal
DIAG_TOL_REL = 1e-14        # triangular-solve diagonal floor
OFF_DIAG_TOL_REL = 1e-12    # Jacobi convergence, relative to ||A||_F
MAX_JACOBI_SWEEPS = 100
GAP_FLOOR_REL = 1e-8        # eigenvalue-gap clamp, relative to spectrum spread


@dataclass
class Diagnostics:
    """Counters for numerically suspect but non-fatal events."""

    degenerate_spectrum_events: int = 0

    def reset(self):
        self.degenerate_spectrum_events = 0


diagnostics = Diagnostics()


@dataclass(frozen=True)
class EigPair:
    """One eigenvalue with its unit-norm, sign-fixed eigenvector."""

    value: float
    vector: np.ndarray


def _as_square(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"{name} must be square, got shape {a.shape}")
    return a


def _require_symmetric(a, name):
    scale = max(np.max(np.abs(a)), 1.0)
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ShapeMismatch(f"{name} is not symmetric within tolerance")


def _fix_sign(v):
    # Flip so the largest-magnitude component is positive; first index wins ties.
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        return -v
    return v


# --- Cholesky -------------------------------------------------------------


def cholesky(a):
    """Lower-triangular L with L @ L.T == a for symmetric positive-definite a.

    Raises NotPositiveDefinite when a pivot drops to or below
    ``1e-12 * max(diag(a))``, which signals a ridge weight that is too small
    or a corrupted scatter matrix.
    """
    a = _as_square(a, "a")
    _require_symmetric(a, "a")
    n = a.shape[0]
    tol = PIVOT_TOL_REL * max(np.max(np.diag(a)), 0.0) if n else 0.0
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if pivot <= tol:
            raise NotPositiveDefinite(
                f"pivot {pivot:.3e} at index {j} is below tolerance {tol:.3e}"
            )
        low[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def vjp_cholesky(low, low_bar):
    """Adjoint of ``cholesky``: cotangent on L pulled back to the SPD input.

    Returns a symmetrized adjoint, matching perturbations that keep the
    input symmetric.
    """
    low = _as_square(low, "low")
    low_bar = np.asarray(low_bar, dtype=np.float64)
    p = np.tril(low.T @ low_bar)
    idx = np.arange(low.shape[0])
    p[idx, idx] *= 0.5
    t = tri_solve(low, p, transposed=True)
    a_raw = tri_solve(low, t.T, transposed=True).T
    return 0.5 * (a_raw + a_raw.T)


# --- triangular solves ----------------------------------------------------


def tri_solve(low, b, transposed=False):
    """Solve ``low @ x = b`` (or ``low.T @ x = b`` when transposed) for x.

    ``low`` is lower triangular; ``b`` may be a vector or a matrix of
    right-hand-side columns.
    """
    low = _as_square(low, "low")
    b = np.asarray(b, dtype=np.float64)
    vector_rhs = b.ndim == 1
    x = b.reshape(-1, 1).copy() if vector_rhs else b.copy()
    n = low.shape[0]
    if x.shape[0] != n:
        raise ShapeMismatch(f"rhs has {x.shape[0]} rows, factor is {n}x{n}")
    diag = np.abs(np.diag(low))
    scale = np.max(diag) if n else 0.0
    if n and (scale == 0.0 or np.min(diag) < DIAG_TOL_REL * scale):
        raise SingularTriangular("triangular factor has a (near-)zero diagonal entry")
    if not transposed:
        for i in range(n):
            x[i] = (x[i] - low[i, :i] @ x[:i]) / low[i, i]
    else:
        for i in range(n - 1, -1, -1):
            x[i] = (x[i] - low[i + 1 :, i] @ x[i + 1 :]) / low[i, i]
    return x[:, 0] if vector_rhs else x


def vjp_tri_solve(low, x, x_bar, transposed=False):
    """Adjoints of ``tri_solve`` for both the factor and the right-hand side.

    ``x`` is the forward output. Returns ``(low_bar, b_bar)``; ``low_bar``
    is projected onto the lower triangle since only that part of the factor
    participates.
    """
    x = np.asarray(x, dtype=np.float64)
    x_bar = np.asarray(x_bar, dtype=np.float64)
    vector_rhs = x.ndim == 1
    x2 = x.reshape(-1, 1) if vector_rhs else x
    xb2 = x_bar.reshape(-1, 1) if vector_rhs else x_bar
    b_bar = tri_solve(low, xb2, transposed=not transposed)
    if transposed:
        low_bar = -np.tril(x2 @ b_bar.T)
    else:
        low_bar = -np.tril(b_bar @ x2.T)
    return low_bar, (b_bar[:, 0] if vector_rhs else b_bar)


# --- symmetric eigendecomposition ----------------------------------------


def _jacobi(a):
    """Cyclic Jacobi on a symmetric matrix. Returns (values, vectors).

    Eigenvalues ascend; vectors[:, i] belongs to values[i] and carries the
    deterministic sign convention. Convergence: off-diagonal Frobenius norm
    below ``1e-12 * ||a||_F`` within 100 sweeps.
    """
    n = a.shape[0]
    m = 0.5 * (a + a.T)
    vecs = np.eye(n)
    if n < 2:
        vals = np.diag(m).copy()
        return vals, vecs
    norm = np.linalg.norm(m, "fro")
    tol = OFF_DIAG_TOL_REL * norm
    off_mask = ~np.eye(n, dtype=bool)

    def off_norm():
        return np.sqrt(np.sum(m[off_mask] ** 2))

    converged = off_norm() <= tol
    for _ in range(MAX_JACOBI_SWEEPS):
        if converged:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                tau = (m[q, q] - m[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 1.0 / (2.0 * tau)
                else:
                    t = np.sign(tau) if tau != 0.0 else 1.0
                    t = t / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                row_p = m[p, :].copy()
                row_q = m[q, :].copy()
                m[p, :] = c * row_p - s * row_q
                m[q, :] = s * row_p + c * row_q
                col_p = m[:, p].copy()
                col_q = m[:, q].copy()
                m[:, p] = c * col_p - s * col_q
                m[:, q] = s * col_p + c * col_q
                m[p, q] = 0.0
                m[q, p] = 0.0
                vec_p = vecs[:, p].copy()
                vec_q = vecs[:, q].copy()
                vecs[:, p] = c * vec_p - s * vec_q
                vecs[:, q] = s * vec_p + c * vec_q
        converged = off_norm() <= tol
    if not converged:
        raise NoConvergence(
            f"Jacobi did not converge in {MAX_JACOBI_SWEEPS} sweeps "
            f"(off-diagonal norm {off_norm():.3e}, tolerance {tol:.3e})"
        )
    vals = np.diag(m).copy()
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for i in range(n):
        vecs[:, i] = _fix_sign(vecs[:, i])
    return vals, vecs


def sym_eig(a):
    """Full eigendecomposition of a symmetric matrix, ascending by eigenvalue."""
    a = _as_square(a, "a")
    _require_symmetric(a, "a")
    vals, vecs = _jacobi(a)
    return [EigPair(float(vals[i]), vecs[:, i].copy()) for i in range(a.shape[0])]


def vjp_sym_eig(values, vectors, values_bar, vectors_bar):
    """Adjoint of the symmetric eigendecomposition.

    ``values``/``vectors`` are the forward outputs (vectors as columns);
    the cotangents use the same layout. Eigenvalue gaps below
    ``1e-8 * (spectrum spread)`` are clamped to that floor, keeping their
    sign, and counted on ``diagnostics.degenerate_spectrum_events`` so a
    trainer can surface near-degenerate episodes without aborting.

    Returns the symmetrized input adjoint.
    """
    vals = np.asarray(values, dtype=np.float64)
    vecs = np.asarray(vectors, dtype=np.float64)
    vals_bar = np.asarray(values_bar, dtype=np.float64)
    vecs_bar = np.asarray(vectors_bar, dtype=np.float64)
    n = vals.shape[0]
    a_bar = vecs @ (np.diag(vals_bar) @ vecs.T)
    if n > 1 and np.any(vecs_bar):
        spread = float(vals[-1] - vals[0])
        floor = GAP_FLOOR_REL * (spread if spread > 0.0 else 1.0)
        gaps = vals[None, :] - vals[:, None]  # gaps[j, k] = vals[k] - vals[j]
        off = ~np.eye(n, dtype=bool)
        degenerate = np.abs(gaps[off]) < floor
        if np.any(degenerate):
            diagnostics.degenerate_spectrum_events += 1
        sign = np.where(gaps >= 0.0, 1.0, -1.0)
        denom = sign * np.maximum(np.abs(gaps), floor)
        coeff = np.zeros_like(gaps)
        coeff[off] = 1.0 / denom[off]
        a_bar = a_bar + vecs @ (coeff * (vecs.T @ vecs_bar)) @ vecs.T
    return 0.5 * (a_bar + a_bar.T)


# --- generalized symmetric-definite eigenproblem --------------------------


@dataclass
class GenEigContext:
    """Intermediates of the reduction, kept for the reverse pass."""

    low: np.ndarray          # Cholesky factor of the definite matrix
    half: np.ndarray         # low^-1 @ s_a
    reduced: np.ndarray      # low^-1 @ s_a @ low^-T, fed to the eigensolver
    values: np.ndarray
    vectors: np.ndarray
    raw_vector: np.ndarray   # low^-T @ top standard eigenvector, pre-normalization
    norm: float
    sign: float
    eigenvalue: float
    vector: np.ndarray       # final unit-norm, sign-fixed direction


def _gen_eig_max_forward(s_a, s_n):
    s_a = _as_square(s_a, "s_a")
    s_n = _as_square(s_n, "s_n")
    if s_a.shape != s_n.shape:
        raise ShapeMismatch(f"shape mismatch: {s_a.shape} vs {s_n.shape}")
    low = cholesky(s_n)
    half = tri_solve(low, s_a)
    reduced = tri_solve(low, half.T).T
    reduced = 0.5 * (reduced + reduced.T)
    vals, vecs = _jacobi(reduced)
    top = vecs[:, -1]
    raw = tri_solve(low, top, transposed=True)
    norm = float(np.linalg.norm(raw))
    unit = raw / norm
    k = int(np.argmax(np.abs(unit)))
    sign = -1.0 if unit[k] < 0 else 1.0
    vector = sign * unit
    return GenEigContext(
        low=low,
        half=half,
        reduced=reduced,
        values=vals,
        vectors=vecs,
        raw_vector=raw,
        norm=norm,
        sign=sign,
        eigenvalue=float(vals[-1]),
        vector=vector,
    )


def gen_eig_max(s_a, s_n):
    """Dominant generalized eigenpair of ``s_a @ w = lam * s_n @ w``.

    ``s_a`` must be symmetric PSD and ``s_n`` symmetric positive definite.
    The problem is reduced to a standard symmetric one through the Cholesky
    factor of ``s_n``; the returned direction is renormalized to unit
    Euclidean norm with the deterministic sign convention, and ``lam``
    equals the generalized Rayleigh quotient at that direction.
    """
    ctx = _gen_eig_max_forward(s_a, s_n)
    return EigPair(ctx.eigenvalue, ctx.vector.copy())


def vjp_gen_eig_max(ctx, eigenvalue_bar, vector_bar):
    """Adjoint of ``gen_eig_max`` via the chained reduction adjoints.

    ``ctx`` is the GenEigContext from the forward pass; the cotangents sit
    on the dominant eigenvalue and the unit-norm direction. Returns
    symmetrized adjoints ``(s_a_bar, s_n_bar)``.
    """
    n = ctx.low.shape[0]
    vals_bar = np.zeros(n)
    vals_bar[-1] = eigenvalue_bar
    vecs_bar = np.zeros((n, n))

    if vector_bar is not None and np.any(vector_bar):
        vector_bar = np.asarray(vector_bar, dtype=np.float64)
        # through w = sign * raw / ||raw||
        raw_bar = (ctx.sign / ctx.norm) * (
            vector_bar - ctx.vector * (ctx.vector @ vector_bar)
        )
        # through raw = low^-T @ top
        low_bar_a, top_bar = vjp_tri_solve(ctx.low, ctx.raw_vector, raw_bar, transposed=True)
        vecs_bar[:, -1] = top_bar
    else:
        low_bar_a = np.zeros((n, n))

    reduced_bar = vjp_sym_eig(ctx.values, ctx.vectors, vals_bar, vecs_bar)

    # reduced = (low^-1 @ half.T).T with half = low^-1 @ s_a
    t2 = ctx.reduced.T  # forward value of tri_solve(low, half.T)
    low_bar_b, half_t_bar = vjp_tri_solve(ctx.low, t2, reduced_bar.T)
    low_bar_c, s_a_bar = vjp_tri_solve(ctx.low, ctx.half, half_t_bar.T)

    low_bar = low_bar_a + low_bar_b + low_bar_c
    s_n_bar = vjp_cholesky(ctx.low, low_bar)
    s_a_bar = 0.5 * (s_a_bar + s_a_bar.T)
    return s_a_bar, s_n_bar
