"""GradNet: a shallow block-structured classifier over base-network gradients.

The hidden layer is a concatenation of blocks. Block ``i`` only sees the
gradient coordinates of base layers ``i`` and ``i + 1`` (or layer ``i``
alone with ``wiring="single"``); each block owns a dense weight matrix over
exactly that coordinate range, so the structural zeros are never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn_core
from .errors import ConfigError, TrainingError, UsageError
from .grad_features import FeaturePipeline, GradFeature, GradientSource, augment, hypothesized_labels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class GradNetSpec:
    block_sizes: tuple[int, ...] = (5, 100, 25)
    num_classes: int = 10
    wiring: str = "adjacent"
    activation: str = "relu"
    dropout_p: float | None = None
    use_batchnorm: bool = False
    optimizer: str = "sgd"
    lr: float | None = None
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or min(self.block_sizes) < 1:
            raise ConfigError("block sizes must be positive")
        if self.wiring not in ("adjacent", "single"):
            raise ConfigError(f"unknown wiring {self.wiring!r}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.dropout_p is not None and not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout probability must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if self.optimizer == "sgd" else 0.001

    def partition(self, layout: nn_core.ParamLayout) -> list[tuple[int, int]]:
        layers = layout.layers
        if len(layers) != len(self.block_sizes):
            raise ConfigError(f"{len(self.block_sizes)} blocks for a base network with {len(layers)} layers")
        out = []
        for i, s in enumerate(layers):
            stop = layers[min(i + 1, len(layers) - 1)].stop if self.wiring == "adjacent" else s.stop
            out.append((s.start, stop))
        return out

    def to_dict(self) -> dict:
        return {
            "block_sizes": list(self.block_sizes), "num_classes": self.num_classes, "wiring": self.wiring,
            "activation": self.activation, "dropout_p": self.dropout_p, "use_batchnorm": self.use_batchnorm, "optimizer": self.optimizer,
            "lr": self.lr, "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradNetSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class GradNetModel:
    spec: GradNetSpec
    partition: list[tuple[int, int]]
    dense_len: int
    params: np.ndarray = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    _slots: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.partition = [(int(a), int(b)) for a, b in self.partition]
        slots, off = {}, 0

        def take(name, shape):
            nonlocal off
            size = int(np.prod(shape))
            slots[name] = (off, off + size, shape)
            off += size

        for i, ((a, b), h) in enumerate(zip(self.partition, self.spec.block_sizes)):
            if not 0 <= a < b <= self.dense_len:
                raise ConfigError(f"block {i} range [{a}, {b}) outside the feature length {self.dense_len}")
            take(f"W{i}", (b - a, h))
            take(f"b{i}", (h,))
        hidden = self.hidden_size
        if self.spec.use_batchnorm:
            take("gamma", (hidden,))
            take("beta", (hidden,))
        take("V", (hidden, self.spec.num_classes))
        take("c", (self.spec.num_classes,))
        self._slots = slots
        if self.params is None:
            self.params = np.zeros(off)
        elif self.params.shape != (off,):
            raise ConfigError(f"GradNet parameter vector has length {self.params.shape[0]}, expected {off}")
        if self.spec.use_batchnorm:
            if self.running_mean is None:
                self.running_mean = np.zeros(hidden)
                self.running_var = np.ones(hidden)

    @property
    def hidden_size(self) -> int:
        return sum(self.spec.block_sizes)

    @property
    def num_params(self) -> int:
        return self.params.shape[0]

    def view(self, name: str, params: np.ndarray | None = None) -> np.ndarray:
        a, b, shape = self._slots[name]
        return (self.params if params is None else params)[a:b].reshape(shape)

    @classmethod
    def create(cls, spec: GradNetSpec, layout: nn_core.ParamLayout, density: float = 1.0) -> "GradNetModel":
        """He-uniform init. ``density`` is the expected fraction of nonzero
        feature coordinates; block fan-in counts only those."""
        if not 0 < density <= 1:
            raise ConfigError("density must lie in (0, 1]")
        model = cls(spec, spec.partition(layout), layout.size)
        rng = np.random.default_rng(spec.seed)
        for i, (a, b) in enumerate(model.partition):
            limit = np.sqrt(6.0 / max(1.0, density * (b - a)))
            w = model.view(f"W{i}")
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        v = model.view("V")
        limit = np.sqrt(6.0 / model.hidden_size)
        v[...] = rng.uniform(-limit, limit, size=v.shape)
        if spec.use_batchnorm:
            model.view("gamma")[...] = 1.0
        return model

    def copy(self) -> "GradNetModel":
        return GradNetModel(self.spec, list(self.partition), self.dense_len, self.params.copy(),
                            None if self.running_mean is None else self.running_mean.copy(),
                            None if self.running_var is None else self.running_var.copy())

    # -------------------------------------------------------------- forward/backward

    def _check(self, x) -> sp.csr_matrix:
        x = sp.csr_matrix(x) if sp.issparse(x) else sp.csr_matrix(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if x.shape[1] != self.dense_len:
            raise ConfigError(f"feature length {x.shape[1]} does not match the partition ({self.dense_len})")
        return x

    def _forward(self, x, train: bool, rng=None, params=None):
        p = self.params if params is None else params
        cache = {"cols": []}
        pre = np.empty((x.shape[0], self.hidden_size))
        off = 0
        for i, ((a, b), h) in enumerate(zip(self.partition, self.spec.block_sizes)):
            cols = x[:, a:b]
            cache["cols"].append(cols)
            pre[:, off:off + h] = cols @ self.view(f"W{i}", p) + self.view(f"b{i}", p)
            off += h
        z = pre
        if self.spec.use_batchnorm:
            if train:
                mu, var = pre.mean(axis=0), pre.var(axis=0)
                self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mu
                self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var
            else:
                mu, var = self.running_mean, self.running_var
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (pre - mu) * inv
            cache.update(xhat=xhat, inv=inv)
            z = self.view("gamma", p) * xhat + self.view("beta", p)
        hidden = np.maximum(z, 0.0)
        cache["z"] = z
        if train and self.spec.dropout_p:
            keep = 1.0 - self.spec.dropout_p
            mask = (rng.random(hidden.shape) < keep) / keep
            hidden = hidden * mask
            cache["mask"] = mask
        cache["hidden"] = hidden
        logits = hidden @ self.view("V", p) + self.view("c", p)
        return nn_core.softmax(logits), cache

    def hidden_preactivation(self, x) -> np.ndarray:
        """Block pre-activations before batchnorm/ReLU, shape ``(rows, hidden)``."""
        x = self._check(x)
        out, off = [], 0
        for i, ((a, b), h) in enumerate(zip(self.partition, self.spec.block_sizes)):
            out.append(x[:, a:b] @ self.view(f"W{i}") + self.view(f"b{i}"))
        return np.hstack(out)

    def predict_proba(self, x) -> np.ndarray:
        return self._forward(self._check(x), train=False)[0]

    def loss_and_grad(self, x, labels, rng=None, train: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
        """Mean cross-entropy against ``labels``, its gradient, and the probabilities."""
        x = self._check(x)
        labels = np.asarray(labels, dtype=np.int64)
        probs, cache = self._forward(x, train, rng)
        n = x.shape[0]
        value = float(np.mean(nn_core.cross_entropy(probs, labels)))
        grad = np.zeros_like(self.params)
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        d /= n
        hidden = cache["hidden"]
        self.view("V", grad)[...] = hidden.T @ d
        self.view("c", grad)[...] = d.sum(axis=0)
        dh = d @ self.view("V").T
        if "mask" in cache:
            dh = dh * cache["mask"]
        dz = dh * (cache["z"] > 0)
        if self.spec.use_batchnorm:
            xhat, inv = cache["xhat"], cache["inv"]
            self.view("gamma", grad)[...] = (dz * xhat).sum(axis=0)
            self.view("beta", grad)[...] = dz.sum(axis=0)
            dxhat = dz * self.view("gamma")
            if train:
                dpre = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                dpre = dxhat * inv
        else:
            dpre = dz
        off = 0
        for i, h in enumerate(self.spec.block_sizes):
            block = dpre[:, off:off + h]
            self.view(f"W{i}", grad)[...] = cache["cols"][i].T @ block
            self.view(f"b{i}", grad)[...] = block.sum(axis=0)
            off += h
        return value, grad, probs


def gradnet_forward(model: GradNetModel, feature) -> np.ndarray:
    """Class probabilities for one feature (GradFeature or dense vector) or a batch."""
    if isinstance(feature, GradFeature):
        if feature.dense_len != model.dense_len:
            raise ConfigError("feature length does not match the GradNet partition")
        feature = sp.csr_matrix((feature.values, feature.indices, [0, feature.nnz]), shape=(1, feature.dense_len))
        return model.predict_proba(feature)[0]
    if not sp.issparse(feature) and np.ndim(feature) == 1:
        return model.predict_proba(feature)[0]
    return model.predict_proba(feature)


@dataclass
class TraceRow:
    epoch: int
    split: str
    accuracy: float
    loss: float


def train_gradnet(source: GradientSource, inputs: np.ndarray, labels: np.ndarray, spec: GradNetSpec,
                  pipeline: FeaturePipeline, epochs: int | None = None, augment_sigma: float = 0.0,
                  eval_set: tuple[np.ndarray, np.ndarray] | None = None, model: GradNetModel | None = None,
                  on_epoch=None) -> tuple[GradNetModel, list[TraceRow]]:
    """Train GradNet on gradients taken at random hypothesized labels.

    Every batch: jitter the inputs, draw fresh random labels, take the base
    network's loss gradients at those labels, push them through ``pipeline``,
    and take one optimizer step on cross-entropy against the true labels.
    """
    epochs = spec.epochs if epochs is None else epochs
    labels = np.asarray(labels, dtype=np.int64)
    if model is None:
        model = GradNetModel.create(spec, source.layout, pipeline.density)
    rng = np.random.default_rng(spec.seed + 1)
    if pipeline.needs_fit and not pipeline.fitted:
        _, fit_labels = hypothesized_labels(labels, source.num_classes, "random", np.random.default_rng(spec.seed + 2))
        pipeline.fit(source, inputs, fit_labels)
    opt = nn_core.Optimizer(spec.optimizer, spec.learning_rate)
    trace: list[TraceRow] = []
    for epoch in range(1, epochs + 1):
        total, correct, seen = 0.0, 0, 0
        for bi, idx in enumerate(nn_core.iterate_minibatches(len(inputs), spec.batch_size, rng)):
            x = augment(inputs[idx], augment_sigma, rng)
            c = labels[idx]
            _, c_hat = hypothesized_labels(c, source.num_classes, "random", rng)
            feats = pipeline.transform(source, x, c_hat)
            value, grad, probs = model.loss_and_grad(feats, c, rng=rng, train=True)
            if not np.isfinite(value):
                raise TrainingError("non-finite GradNet loss", epoch=epoch, batch=bi)
            try:
                model.params = opt.step(model.params, grad, bi)
            except TrainingError as exc:
                raise TrainingError("non-finite GradNet gradient", epoch=epoch, batch=bi) from exc
            total += value * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == c))
            seen += len(idx)
        trace.append(TraceRow(epoch, "train", correct / max(seen, 1), total / max(seen, 1)))
        if eval_set is not None:
            m = evaluate(source, model, pipeline, *eval_set)
            trace.append(TraceRow(epoch, "eval", m["accuracy"], m["loss"]))
        if on_epoch is not None:
            on_epoch(epoch, model, trace)
    return model, trace


def summed_probabilities(source: GradientSource, model: GradNetModel, pipeline: FeaturePipeline,
                         inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """For every input, the sum over all hypothesized labels of GradNet's output."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    C = source.num_classes
    out = np.zeros((len(inputs), model.spec.num_classes))
    for i in range(0, len(inputs), batch_size):
        x = inputs[i:i + batch_size]
        rows, hyp = hypothesized_labels(np.zeros(len(x), dtype=np.int64), C, "all_labels")
        probs = model.predict_proba(pipeline.transform(source, x[rows], hyp))
        out[i:i + len(x)] = probs.reshape(len(x), C, -1).sum(axis=1)
    return out


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax with ties going to the lowest index."""
    return np.argmax(scores, axis=-1)


def gradnet_predict(source: GradientSource, model: GradNetModel, pipeline: FeaturePipeline, x) -> int:
    return int(argmax_lowest(summed_probabilities(source, model, pipeline, np.asarray(x)[None, :]))[0])


def predict_batch(source, model, pipeline, inputs, batch_size: int = 16) -> np.ndarray:
    return argmax_lowest(summed_probabilities(source, model, pipeline, inputs, batch_size))


def classification_metrics(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise UsageError("cannot evaluate on an empty set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    support = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), support, out=np.full(num_classes, np.nan), where=support > 0)
    return {
        "accuracy": float(np.mean(pred == labels)),
        "per_class_accuracy": per_class.tolist(),
        "confusion": confusion.tolist(),
        "count": int(labels.size),
    }


def evaluate(source: GradientSource, model: GradNetModel, pipeline: FeaturePipeline, inputs, labels,
             batch_size: int = 16) -> dict:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise UsageError("cannot evaluate on an empty set")
    scores = summed_probabilities(source, model, pipeline, inputs, batch_size)
    out = classification_metrics(argmax_lowest(scores), labels, model.spec.num_classes)
    mean_prob = scores / source.num_classes
    out["loss"] = float(np.mean(nn_core.cross_entropy(mean_prob, labels)))
    return out
