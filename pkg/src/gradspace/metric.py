"""Outer-product metrics on parameter space and the kernels they induce.

``G = sum_i w_i g_i g_i^T`` over per-sample loss gradients ``g_i``; two
samples are compared with ``k(x_i, x_j) = g_i^T G^{-1} g_j``. Solves go
through a Cholesky factor ``G = L L^T``, taken from a QR of the gradient
rows: ``k = (L^{-1} g_i) . (L^{-1} g_j)``, symmetric in floating point by
construction.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, MetricError

FULL_MODE_MAX_N = 4096
DEFAULT_RIDGE_SCALE = 1e-10


def outer_product(grad: np.ndarray) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ConfigError("gradient must be finite")
    return np.outer(g, g)


def arithmetic_mean(grads: np.ndarray, weights: np.ndarray, mode: str) -> np.ndarray:
    if mode == "full":
        return (grads * weights[:, None]).T @ grads
    return weights @ (grads * grads)


# other quasi-arithmetic means plug in here: f(grads, weights, mode) -> matrix or diagonal
MEANS = {"arithmetic": arithmetic_mean}


@dataclass(frozen=True)
class MetricState:
    """``matrix`` holds the weighted mean without ridge; solves use ``matrix + ridge * I``."""

    mode: str
    matrix: np.ndarray
    ridge: float
    factor: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        d = self.matrix if self.mode == "diagonal" else np.diag(self.matrix)
        return d + self.ridge

    def effective(self) -> np.ndarray:
        if self.mode == "diagonal":
            return self.matrix + self.ridge
        return self.matrix + self.ridge * np.eye(self.n)


def _weights(count: int, weights) -> np.ndarray:
    if weights is None:
        return np.full(count, 1.0 / count)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
        raise ConfigError("weights must be nonnegative, one per gradient, and sum to 1")
    return w


def _factor(grads: np.ndarray, weights: np.ndarray, ridge: float) -> np.ndarray:
    """Lower Cholesky factor of ``sum w g g^T + ridge I`` from a QR of the stacked rows.

    ``[sqrt(w) g; sqrt(ridge) I]^T`` times itself is exactly the ridged
    metric, so its R factor transposed is the Cholesky factor; going through
    QR keeps the conditioning of the gradients instead of squaring it.
    """
    n = grads.shape[1]
    rows = grads * np.sqrt(weights)[:, None]
    if ridge > 0:
        rows = np.vstack([rows, np.sqrt(ridge) * np.eye(n)])
    if rows.shape[0] < n:
        raise MetricError(f"{rows.shape[0]} gradients cannot span {n} dimensions at ridge 0; use a ridge")
    r = sla.qr(rows, mode="r", check_finite=False)[0][:n]
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return (signs[:, None] * r).T


def build_metric(grads, weights=None, mode: str = "full", ridge: float | None = None,
                 mean: str = "arithmetic") -> MetricState:
    """Weighted mean of gradient outer products, plus ``ridge * I``.

    ``ridge=None`` picks ``1e-10 * trace(G) / n``.
    """
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    if grads.shape[0] < 1 or grads.size == 0:
        raise ConfigError("need at least one gradient")
    if not np.all(np.isfinite(grads)):
        raise ConfigError("gradients must be finite")
    if mode not in ("full", "diagonal"):
        raise ConfigError(f"unknown metric mode {mode!r}")
    n = grads.shape[1]
    if mode == "full" and n > FULL_MODE_MAX_N:
        raise ConfigError(f"full metric limited to n <= {FULL_MODE_MAX_N}; use diagonal mode")
    if mean not in MEANS:
        raise ConfigError(f"unknown mean {mean!r}")
    w = _weights(grads.shape[0], weights)
    matrix = MEANS[mean](grads, w, mode)
    trace = float(np.trace(matrix)) if mode == "full" else float(matrix.sum())
    if ridge is None:
        ridge = DEFAULT_RIDGE_SCALE * trace / n
    if ridge < 0:
        raise ConfigError("ridge must be nonnegative")
    if mode == "diagonal":
        return MetricState(mode, matrix, float(ridge))
    # symmetric by construction up to rounding of the Gram product
    matrix = 0.5 * (matrix + matrix.T)
    factor = _factor(grads, w, ridge)
    pivots = np.diag(factor) ** 2
    scale = max(float(np.max(np.diag(matrix))) + ridge, np.finfo(float).tiny)
    if pivots.size < n or pivots.min() <= n * np.finfo(float).eps * scale:
        raise MetricError(f"metric is numerically singular at ridge {ridge:g}; use a larger ridge")
    return MetricState(mode, matrix, float(ridge), factor)


def whiten(metric: MetricState, grads) -> np.ndarray:
    """Rows ``L^{-1} g`` (full) or ``g / sqrt(diag)`` (diagonal)."""
    g = np.asarray(grads, dtype=np.float64)
    single = g.ndim == 1
    g = np.atleast_2d(g)
    if g.shape[1] != metric.n:
        raise ConfigError(f"gradient length {g.shape[1]} does not match metric size {metric.n}")
    if metric.mode == "diagonal":
        out = diagonal_normalize(metric, g)
    else:
        if metric.factor is None:
            raise MetricError("metric has no factorization")
        out = sla.solve_triangular(metric.factor, g.T, lower=True, check_finite=False).T
    return out[0] if single else out


def kernel(metric: MetricState, g_i, g_j) -> float:
    return float(np.dot(whiten(metric, g_i), whiten(metric, g_j)))


def gram(metric: MetricState, grads) -> np.ndarray:
    w = whiten(metric, np.atleast_2d(grads))
    return w @ w.T


def diagonal_normalize(metric: MetricState, grad) -> np.ndarray:
    """``grad_k / sqrt(diag_k + ridge)``; coordinates with a zero denominator map to 0."""
    if metric.mode != "diagonal":
        raise ConfigError("diagonal_normalize needs a diagonal metric")
    denom = np.sqrt(metric.matrix + metric.ridge)
    g = np.asarray(grad, dtype=np.float64)
    return np.divide(g, denom, out=np.zeros(np.broadcast(g, denom).shape), where=denom > 0)


@dataclass(frozen=True)
class Reparametrization:
    """Linear change of coordinates ``theta = J mu``."""

    jacobian: np.ndarray

    def __post_init__(self):
        j = np.asarray(self.jacobian, dtype=np.float64)
        if j.ndim != 2 or j.shape[0] != j.shape[1]:
            raise ConfigError("jacobian must be square")
        cond = np.linalg.cond(j)
        if not np.isfinite(cond) or cond > 1e12:
            raise ConfigError(f"jacobian is not safely invertible (condition {cond:.3g})")
        object.__setattr__(self, "jacobian", j)

    @property
    def n(self) -> int:
        return self.jacobian.shape[0]


def random_reparametrization(n: int, rng: np.random.Generator, low: float = 0.5, high: float = 2.0) -> Reparametrization:
    """``Q1 diag(s) Q2`` with random orthogonal ``Q1, Q2`` and singular values in [low, high]."""
    q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Reparametrization(q1 @ np.diag(rng.uniform(low, high, size=n)) @ q2)


def apply_reparametrization(grads, reparam: Reparametrization) -> np.ndarray:
    """Chain rule: each gradient row ``g`` becomes ``J^T g``."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape[-1] != reparam.n:
        raise ConfigError(f"gradient length {g.shape[-1]} does not match jacobian size {reparam.n}")
    return g @ reparam.jacobian


def identifiable_basis(grads, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (columns) of the span of the gradient rows.

    Softmax gradients never span the full parameter space (each output
    layer's columns sum to zero), so invariance checks run in these
    coordinates where the metric is nonsingular.
    """
    g = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    _, s, vt = np.linalg.svd(g, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    return vt[:rank].T


def invariance_deviation(grads, reparam: Reparametrization, ridge: float = 0.0) -> float:
    """Max over pairs of ``|k_mu - k_theta| / max(|k_theta|, 1e-12)`` after reparametrizing."""
    k_theta = gram(build_metric(grads, ridge=ridge), grads)
    moved = apply_reparametrization(grads, reparam)
    k_mu = gram(build_metric(moved, ridge=ridge), moved)
    return float(np.max(np.abs(k_mu - k_theta) / np.maximum(np.abs(k_theta), 1e-12)))


def flatten_quadratic(indices, values, double_off_diagonal: bool = False) -> dict[tuple[int, int], float]:
    """Upper triangle of the outer product of a sparse vector: ``(i, j) -> g_i g_j`` for ``i <= j``.

    With ``double_off_diagonal`` the off-diagonal entries carry weight 2, so
    plain dot products of flattened vectors equal ``(g . g')^2``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    val = np.asarray(values, dtype=np.float64)
    keep = val != 0
    idx, val = idx[keep], val[keep]
    order = np.argsort(idx, kind="stable")
    idx, val = idx[order], val[order]
    out = {}
    for a in range(idx.size):
        for b in range(a, idx.size):
            v = val[a] * val[b]
            if double_off_diagonal and a != b:
                v *= 2.0
            out[(int(idx[a]), int(idx[b]))] = float(v)
    return out


def diagnostics(metric: MetricState) -> dict:
    if metric.mode == "diagonal":
        min_eig = float(np.min(metric.diagonal))
        trace = float(np.sum(metric.diagonal))
    else:
        eff = metric.effective()
        min_eig = float(np.linalg.eigvalsh(eff)[0])
        trace = float(np.trace(eff))
    return {"n": metric.n, "mode": metric.mode, "ridge": metric.ridge, "trace": trace, "min_eig_estimate": min_eig}


def diagnostics_json(metric: MetricState) -> str:
    return json.dumps(diagnostics(metric), sort_keys=True)


def gram_csv(matrix: np.ndarray, sample_ids=None) -> str:
    matrix = np.asarray(matrix)
    ids = list(range(matrix.shape[0])) if sample_ids is None else list(sample_ids)
    buf = io.StringIO()
    buf.write("row,col,value\n")
    for r in range(matrix.shape[0]):
        for c in range(matrix.shape[1]):
            buf.write(f"{ids[r]},{ids[c]},{float(matrix[r, c])!r}\n")
    return buf.getvalue()
