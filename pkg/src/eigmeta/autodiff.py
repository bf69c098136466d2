"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 array plus a backward closure; operations
build an implicit tape (the DAG of parents) and ``backward`` walks it in
reverse topological order, accumulating each node's gradient from all of
its consumers exactly once. Covers the affine, pooling, elementwise, and
norm operations the model needs, plus tape-level wrappers around the
``linalg`` kernels, dropout, and an Adam optimizer.

Everything is single-threaded per tape; separate tapes over shared,
immutable parameter values may run in parallel.
"""
from __future__ import annotations

import numpy as np

from . import linalg
from .errors import NonScalarLoss, ShapeMismatch


class Tensor:
    """A node on the tape: a value, its parents, and a backward rule."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    """Wrap plain arrays and scalars as constant (non-differentiable) nodes."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(node, delta):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(delta, dtype=np.float64)
    else:
        node.grad = node.grad + delta


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Run the reverse pass from a scalar loss node.

    Gradients land on each reachable node's ``.grad``; leaves that the loss
    does not depend on keep ``grad=None`` (read them back as zeros via
    ``grad_or_zeros``).
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.value.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.grad = None


def grad_or_zeros(param):
    return param.grad if param.grad is not None else np.zeros_like(param.value)


# --- arithmetic primitives -------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value, parents=(a, b))

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    out._backward = rule
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value, parents=(a, b))

    def rule(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    out._backward = rule
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value, parents=(a, b))

    def rule(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    out._backward = rule
    return out


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.value, parents=(a,))

    def rule(g):
        _accumulate(a, -g)

    out._backward = rule
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    out = Tensor(a.value @ b.value, parents=(a, b))

    def rule(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    out._backward = rule
    return out


def transpose(a):
    a = as_tensor(a)
    out = Tensor(a.value.T, parents=(a,))

    def rule(g):
        _accumulate(a, g.T)

    out._backward = rule
    return out


def square(a):
    a = as_tensor(a)
    out = Tensor(a.value * a.value, parents=(a,))

    def rule(g):
        _accumulate(a, 2.0 * a.value * g)

    out._backward = rule
    return out


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.value), parents=(a,))

    def rule(g):
        _accumulate(a, g * out.value)

    out._backward = rule
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.value, 0.0), parents=(a,))

    def rule(g):
        _accumulate(a, g * (a.value > 0.0))

    out._backward = rule
    return out


def sigmoid_values(x):
    """Numerically stable sigmoid on a raw array.

    Mirrored around zero so that ``sigmoid(x) + sigmoid(-x) == 1.0``
    holds exactly in floating point.
    """
    x = np.asarray(x, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0.0, p, 1.0 - p)


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(sigmoid_values(a.value), parents=(a,))

    def rule(g):
        _accumulate(a, g * out.value * (1.0 - out.value))

    out._backward = rule
    return out


# --- shape and reduction primitives ----------------------------------------


def concat_cols(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[0] != b.value.shape[0]:
        raise ShapeMismatch(
            f"row counts differ: {a.value.shape} vs {b.value.shape}"
        )
    split = a.value.shape[1]
    out = Tensor(np.concatenate([a.value, b.value], axis=1), parents=(a, b))

    def rule(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    out._backward = rule
    return out


def mean_rows(a):
    """Mean over rows, keeping a (1, d) shape. Permutation invariant."""
    a = as_tensor(a)
    n = a.value.shape[0]
    out = Tensor(a.value.mean(axis=0, keepdims=True), parents=(a,))

    def rule(g):
        _accumulate(a, np.broadcast_to(g / n, a.value.shape))

    out._backward = rule
    return out


def repeat_rows(a, n):
    """Tile a (1, d) row into (n, d)."""
    a = as_tensor(a)
    out = Tensor(np.repeat(a.value, n, axis=0), parents=(a,))

    def rule(g):
        _accumulate(a, g.sum(axis=0, keepdims=True))

    out._backward = rule
    return out


def row_sums(a):
    a = as_tensor(a)
    out = Tensor(a.value.sum(axis=1, keepdims=True), parents=(a,))

    def rule(g):
        _accumulate(a, np.broadcast_to(g, a.value.shape))

    out._backward = rule
    return out


def sum_all(a):
    a = as_tensor(a)
    out = Tensor(a.value.sum(), parents=(a,))

    def rule(g):
        _accumulate(a, np.broadcast_to(g, a.value.shape))

    out._backward = rule
    return out


def mean_all(a):
    a = as_tensor(a)
    n = a.value.size
    out = Tensor(a.value.mean(), parents=(a,))

    def rule(g):
        _accumulate(a, np.broadcast_to(g / n, a.value.shape))

    out._backward = rule
    return out


def scale(a, factor):
    """Multiply by a python float that is not differentiated."""
    a = as_tensor(a)
    out = Tensor(a.value * factor, parents=(a,))

    def rule(g):
        _accumulate(a, g * factor)

    out._backward = rule
    return out


def add_scaled_identity(a, weight):
    """a + weight * I, differentiable in both the matrix and the scalar."""
    a, weight = as_tensor(a), as_tensor(weight)
    n = a.value.shape[0]
    out = Tensor(a.value + weight.value * np.eye(n), parents=(a, weight))

    def rule(g):
        _accumulate(a, g)
        _accumulate(weight, np.trace(g))

    out._backward = rule
    return out


def dropout(a, rate, training, rng):
    """Inverted dropout: Bernoulli(1-rate) mask scaled by 1/(1-rate).

    Identity at rate 0 or outside training. ``rng`` is only consumed when
    a mask is actually drawn.
    """
    if not training or rate == 0.0:
        return as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    keep = 1.0 - rate
    mask = (rng.random(a.value.shape) < keep) / keep
    out = Tensor(a.value * mask, parents=(a,))

    def rule(g):
        _accumulate(a, g * mask)

    out._backward = rule
    return out


# --- linalg primitives on the tape ------------------------------------------


def cholesky(a):
    a = as_tensor(a)
    low = linalg.cholesky(a.value)
    out = Tensor(low, parents=(a,))

    def rule(g):
        _accumulate(a, linalg.vjp_cholesky(low, g))

    out._backward = rule
    return out


def tri_solve(low, b, transposed=False):
    low, b = as_tensor(low), as_tensor(b)
    x = linalg.tri_solve(low.value, b.value, transposed=transposed)
    out = Tensor(x, parents=(low, b))

    def rule(g):
        low_bar, b_bar = linalg.vjp_tri_solve(low.value, x, g, transposed=transposed)
        _accumulate(low, low_bar)
        _accumulate(b, b_bar)

    out._backward = rule
    return out


def spd_solve(a, b):
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` on the tape."""
    low = cholesky(a)
    half = tri_solve(low, b)
    return tri_solve(low, half, transposed=True)


def unit_column(v):
    """Normalize a (n, 1) column to unit Euclidean norm with the
    deterministic sign convention (largest-magnitude entry positive)."""
    v = as_tensor(v)
    flat = v.value[:, 0]
    norm = float(np.linalg.norm(flat))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero column")
    unit = flat / norm
    k = int(np.argmax(np.abs(unit)))
    sign = -1.0 if unit[k] < 0 else 1.0
    w = sign * unit
    out = Tensor(w[:, None], parents=(v,))

    def rule(g):
        gf = g[:, 0]
        _accumulate(v, ((sign / norm) * (gf - w * (w @ gf)))[:, None])

    out._backward = rule
    return out


def gen_eig_top(s_a, s_n):
    """Dominant generalized eigenpair as tape nodes.

    Returns ``(eigenvalue, direction)`` where the direction is a unit-norm
    (n, 1) column. Both outputs backpropagate into both inputs through the
    closed-form eigen-derivative chain.
    """
    s_a, s_n = as_tensor(s_a), as_tensor(s_n)
    ctx = linalg._gen_eig_max_forward(s_a.value, s_n.value)

    lam = Tensor(np.asarray(ctx.eigenvalue), parents=(s_a, s_n))
    vec = Tensor(ctx.vector[:, None], parents=(s_a, s_n))

    def lam_rule(g):
        if not np.any(g):
            return
        a_bar, n_bar = linalg.vjp_gen_eig_max(ctx, float(g), None)
        _accumulate(s_a, a_bar)
        _accumulate(s_n, n_bar)

    def vec_rule(g):
        if not np.any(g):
            return
        a_bar, n_bar = linalg.vjp_gen_eig_max(ctx, 0.0, g[:, 0])
        _accumulate(s_a, a_bar)
        _accumulate(s_n, n_bar)

    lam._backward = lam_rule
    vec._backward = vec_rule
    return lam, vec


# --- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.value) for p in self.params]
        self.second_moment = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ShapeMismatch(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.value.shape:
                raise ShapeMismatch(
                    f"gradient shape {g.shape} != parameter shape {p.value.shape}"
                )
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1 - self.beta1) * g
            self.second_moment[i] = (
                self.beta2 * self.second_moment[i] + (1 - self.beta2) * g * g
            )
            m_hat = self.first_moment[i] / (1 - self.beta1**t)
            v_hat = self.second_moment[i] / (1 - self.beta2**t)
            p.value = p.value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
