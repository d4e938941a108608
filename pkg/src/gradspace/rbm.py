"""Binary RBM, contrastive divergence, and Fisher-normalized tangent features.

Energy ``U(v, h) = -a.v - b.h - v^T W h``. The derivative features replace
the hidden state by its conditional mean ``E[h | v] = sigmoid(b + v W)`` so
they are deterministic functions of ``v``. Layout is ``(a, b, W row-major)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import nn_core
from .errors import ConfigError, UsageError

STD_FLOOR = 1e-8


@dataclass
class RbmModel:
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    coupling: np.ndarray

    def __post_init__(self):
        self.visible_bias = np.asarray(self.visible_bias, dtype=np.float64)
        self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        d, m = self.visible_bias.shape[0], self.hidden_bias.shape[0]
        if d < 1 or m < 1 or self.coupling.shape != (d, m):
            raise ConfigError(f"coupling must be ({d}, {m}), got {self.coupling.shape}")
        if not (np.all(np.isfinite(self.visible_bias)) and np.all(np.isfinite(self.hidden_bias))
                and np.all(np.isfinite(self.coupling))):
            raise ConfigError("RBM parameters must be finite")

    @property
    def num_visible(self) -> int:
        return self.visible_bias.shape[0]

    @property
    def num_hidden(self) -> int:
        return self.hidden_bias.shape[0]

    @property
    def num_params(self) -> int:
        d, m = self.num_visible, self.num_hidden
        return d + m + d * m

    @classmethod
    def create(cls, num_visible: int, num_hidden: int, seed: int = 0, scale: float = 0.01) -> "RbmModel":
        rng = np.random.default_rng(seed)
        return cls(np.zeros(num_visible), np.zeros(num_hidden), scale * rng.standard_normal((num_visible, num_hidden)))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.visible_bias, self.hidden_bias, self.coupling.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, num_visible: int, num_hidden: int) -> "RbmModel":
        d, m = num_visible, num_hidden
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (d + m + d * m,):
            raise ConfigError("flat RBM vector has the wrong length")
        return cls(flat[:d].copy(), flat[d:d + m].copy(), flat[d + m:].reshape(d, m).copy())


def _binary(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0) | (x == 1)):
        raise UsageError(f"{name} must be binary")
    return x


def energy(model: RbmModel, v, h) -> float:
    v = _binary(v, "v")
    h = _binary(h, "h")
    return float(-(model.visible_bias @ v) - (model.hidden_bias @ h) - v @ model.coupling @ h)


def hidden_expectation(model: RbmModel, v: np.ndarray) -> np.ndarray:
    return expit(model.hidden_bias + np.asarray(v, dtype=np.float64) @ model.coupling)


def visible_expectation(model: RbmModel, h: np.ndarray) -> np.ndarray:
    return expit(model.visible_bias + np.asarray(h, dtype=np.float64) @ model.coupling.T)


def positive_statistics(model: RbmModel, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch means of ``v``, ``E[h|v]`` and ``v E[h|v]^T``."""
    v = np.atleast_2d(batch)
    h = hidden_expectation(model, v)
    return v.mean(axis=0), h.mean(axis=0), v.T @ h / v.shape[0]


def cd_k_update(model: RbmModel, batch: np.ndarray, k: int = 1, lr: float = 0.1,
                rng: np.random.Generator | None = None) -> RbmModel:
    """One contrastive-divergence step; returns a new model."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    v0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    pos_v, pos_h, pos_vh = positive_statistics(model, v0)
    ph = hidden_expectation(model, v0)
    for _ in range(k):
        h = (rng.random(ph.shape) < ph).astype(np.float64)
        v = (rng.random(v0.shape) < visible_expectation(model, h)).astype(np.float64)
        ph = hidden_expectation(model, v)
    neg_v, neg_h, neg_vh = v.mean(axis=0), ph.mean(axis=0), v.T @ ph / v.shape[0]
    return RbmModel(model.visible_bias + lr * (pos_v - neg_v),
                    model.hidden_bias + lr * (pos_h - neg_h),
                    model.coupling + lr * (pos_vh - neg_vh))


def reconstruction_error(model: RbmModel, data: np.ndarray) -> float:
    """Mean squared error of the mean-field reconstruction ``E[v | E[h|v]]``."""
    recon = visible_expectation(model, hidden_expectation(model, data))
    return float(np.mean((np.asarray(data) - recon) ** 2))


def train_rbm(model: RbmModel, data: np.ndarray, epochs: int = 1, batch_size: int = 20, k: int = 1,
              lr: float = 0.1, seed: int = 0) -> tuple[RbmModel, list[float]]:
    """CD-k over shuffled minibatches. Returns the model and per-epoch reconstruction errors."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(epochs):
        for idx in nn_core.iterate_minibatches(len(data), batch_size, rng):
            model = cd_k_update(model, data[idx], k, lr, rng)
        errors.append(reconstruction_error(model, data))
    return model, errors


def potential_derivatives(model: RbmModel, v) -> np.ndarray:
    """``(dU/da, dU/db, dU/dW)`` at ``h = E[h|v]``; one row per visible vector."""
    v = _binary(v, "v")
    single = v.ndim == 1
    v = np.atleast_2d(v)
    h = hidden_expectation(model, v)
    out = np.concatenate([-v, -h, -(v[:, :, None] * h[:, None, :]).reshape(len(v), -1)], axis=1)
    return out[0] if single else out


@dataclass
class FisherDiagonal:
    mean_deriv: np.ndarray
    std_deriv: np.ndarray
    sample_count: int
    floor: float = STD_FLOOR

    @property
    def floored(self) -> np.ndarray:
        return self.std_deriv < self.floor


def fit_fisher_diagonal(model: RbmModel, data, batch_size: int = 500, floor: float = STD_FLOOR) -> FisherDiagonal:
    """Per-coordinate mean and population std of the potential derivatives (two passes)."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise UsageError("cannot fit the Fisher diagonal on an empty dataset")
    n = data.shape[0]
    total = np.zeros(model.num_params)
    for i in range(0, n, batch_size):
        total += potential_derivatives(model, data[i:i + batch_size]).sum(axis=0)
    mean = total / n
    sq = np.zeros(model.num_params)
    for i in range(0, n, batch_size):
        d = potential_derivatives(model, data[i:i + batch_size]) - mean
        sq += (d * d).sum(axis=0)
    return FisherDiagonal(mean, np.sqrt(sq / n), n, floor)


def normalized_tangent_feature(model: RbmModel, fisher: FisherDiagonal, v) -> np.ndarray:
    """``(E[dU] - dU(v)) / std(dU)`` per coordinate; floored coordinates emit 0."""
    if fisher.sample_count < 2:
        raise UsageError("Fisher diagonal must be fitted on at least 2 samples")
    d = potential_derivatives(model, v)
    scale = np.where(fisher.floored, 1.0, fisher.std_deriv)
    out = (fisher.mean_deriv - d) / scale
    out[..., fisher.floored] = 0.0
    return out


def tangent_features(model: RbmModel, fisher: FisherDiagonal, data, batch_size: int = 500) -> np.ndarray:
    data = np.atleast_2d(data)
    return np.vstack([normalized_tangent_feature(model, fisher, data[i:i + batch_size])
                      for i in range(0, len(data), batch_size)])


def fit_linear_classifier(features: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int = 10,
                          lr: float = 0.01, batch_size: int = 32, seed: int = 0) -> tuple[nn_core.NetworkSpec, np.ndarray]:
    """Multinomial logistic regression by minibatch SGD (a network with no hidden layer)."""
    spec = nn_core.NetworkSpec(features.shape[1], (), num_classes, seed=seed)
    params = nn_core.init_params(spec)
    opt = nn_core.Optimizer("sgd", lr)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        params, _ = nn_core.train_epoch(spec, params, features, labels, opt, batch_size, rng, epoch)
    return spec, params
