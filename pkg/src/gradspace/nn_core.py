"""Fully connected ReLU networks with a softmax cross-entropy head.

Parameters live in one flat float64 vector. Layer ``k`` owns the half-open
range ``[start, stop)``: first its weight matrix of shape
``(fan_in, fan_out)`` in row-major order, then its bias of length
``fan_out``. Pre-activations are ``z = a @ W + b``.

Backpropagation is written out by hand so that per-sample gradients are
exact and cheap to batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError, UsageError

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class LayerSlot:
    index: int
    weight_shape: tuple[int, int]
    bias_len: int
    start: int
    stop: int

    @property
    def weight_stop(self) -> int:
        return self.start + self.weight_shape[0] * self.weight_shape[1]

    def to_dict(self) -> dict:
        return {
            "layer_index": self.index,
            "weight_shape": list(self.weight_shape),
            "bias_len": self.bias_len,
            "coord_range": [self.start, self.stop],
        }


@dataclass(frozen=True)
class ParamLayout:
    layers: tuple[LayerSlot, ...]

    @property
    def size(self) -> int:
        return self.layers[-1].stop if self.layers else 0

    def weight(self, params: np.ndarray, k: int) -> np.ndarray:
        s = self.layers[k]
        return params[s.start:s.weight_stop].reshape(s.weight_shape)

    def bias(self, params: np.ndarray, k: int) -> np.ndarray:
        s = self.layers[k]
        return params[s.weight_stop:s.stop]

    def layer_of(self, coord: int) -> int:
        for s in self.layers:
            if s.start <= coord < s.stop:
                return s.index
        raise IndexError(coord)

    def describe(self, coord: int) -> str:
        """Human readable name of a flat coordinate, e.g. ``W1[3,7]``."""
        s = self.layers[self.layer_of(coord)]
        if coord < s.weight_stop:
            r, c = divmod(coord - s.start, s.weight_shape[1])
            return f"W{s.index}[{r},{c}]"
        return f"b{s.index}[{coord - s.weight_stop}]"

    def to_dict(self) -> dict:
        return {"n": self.size, "layers": [s.to_dict() for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamLayout":
        slots = tuple(
            LayerSlot(
                index=int(x["layer_index"]),
                weight_shape=(int(x["weight_shape"][0]), int(x["weight_shape"][1])),
                bias_len=int(x["bias_len"]),
                start=int(x["coord_range"][0]),
                stop=int(x["coord_range"][1]),
            )
            for x in d["layers"]
        )
        return cls(slots)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    def layout(self) -> ParamLayout:
        slots = []
        offset = 0
        dims = self.dims
        for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            stop = offset + fan_in * fan_out + fan_out
            slots.append(LayerSlot(k, (fan_in, fan_out), fan_out, offset, stop))
            offset = stop
        return ParamLayout(tuple(slots))

    @property
    def num_params(self) -> int:
        return self.layout().size

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d.get("hidden_dims", ())),
            num_classes=int(d["num_classes"]),
            activation=d.get("activation", "relu"),
            seed=int(d.get("seed", 0)),
        )


def init_params(spec: NetworkSpec) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    layout = spec.layout()
    rng = np.random.default_rng(spec.seed)
    params = np.zeros(layout.size)
    for s in layout.layers:
        limit = 1.0 / np.sqrt(s.weight_shape[0])
        params[s.start:s.weight_stop] = rng.uniform(-limit, limit, size=s.weight_shape[0] * s.weight_shape[1])
    return params


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray) -> tuple[ParamLayout, np.ndarray]:
    layout = spec.layout()
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (layout.size,):
        raise ConfigError(f"parameter vector has shape {params.shape}, layout expects ({layout.size},)")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ConfigError(f"inputs have shape {inputs.shape}, network expects (*, {spec.input_dim})")
    return layout, inputs


def _forward(spec, layout, params, inputs):
    # acts[k] is the input of layer k; pre[k] its pre-activation
    acts = [inputs]
    pre = []
    a = inputs
    last = len(layout.layers) - 1
    for s in layout.layers:
        z = a @ layout.weight(params, s.index) + layout.bias(params, s.index)
        pre.append(z)
        if s.index < last:
            a = np.maximum(z, 0.0)
            acts.append(a)
    return acts, pre, softmax(pre[-1])


def forward(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input."""
    layout, inputs = _check(spec, params, inputs)
    return _forward(spec, layout, params, inputs)[2]


def predict(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    out = [np.argmax(forward(spec, params, inputs[i:i + batch_size]), axis=1)
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(spec, params, inputs) == np.asarray(labels)))


def _labels(spec, labels, batch):
    if labels is None:
        raise UsageError("labels are required")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ConfigError(f"{labels.shape[0]} labels for {batch} inputs")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ConfigError(f"labels must lie in [0, {spec.num_classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


def loss(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray, labels) -> float:
    """Mean cross-entropy in nats."""
    layout, inputs = _check(spec, params, inputs)
    labels = _labels(spec, labels, inputs.shape[0])
    return float(np.mean(cross_entropy(_forward(spec, layout, params, inputs)[2], labels)))


def per_sample_gradients(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray, labels,
                         out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of each sample's cross-entropy, shape ``(batch, n)``.

    ReLU is differentiated as ``1[z > 0]``, so the derivative at the kink is 0.
    """
    layout, inputs = _check(spec, params, inputs)
    b = inputs.shape[0]
    labels = _labels(spec, labels, b)
    acts, pre, probs = _forward(spec, layout, params, inputs)
    if out is None:
        out = np.empty((b, layout.size))
    elif out.shape != (b, layout.size):
        raise ConfigError(f"output buffer has shape {out.shape}, expected {(b, layout.size)}")

    delta = probs.copy()
    delta[np.arange(b), labels] -= 1.0
    for s in reversed(layout.layers):
        fan_in, fan_out = s.weight_shape
        gw = out[:, s.start:s.weight_stop].reshape(b, fan_in, fan_out)
        assert np.shares_memory(gw, out)
        np.multiply(acts[s.index][:, :, None], delta[:, None, :], out=gw)
        out[:, s.weight_stop:s.stop] = delta
        if s.index > 0:
            delta = (delta @ layout.weight(params, s.index).T) * (pre[s.index - 1] > 0)
    return out


def per_sample_gradient(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, c: int) -> np.ndarray:
    return per_sample_gradients(spec, params, np.asarray(x, dtype=np.float64)[None, :], [c])[0]


def batch_gradient(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean loss and mean gradient over the batch, without per-sample storage."""
    layout, inputs = _check(spec, params, inputs)
    b = inputs.shape[0]
    labels = _labels(spec, labels, b)
    acts, pre, probs = _forward(spec, layout, params, inputs)
    grad = np.empty(layout.size)
    delta = probs.copy()
    delta[np.arange(b), labels] -= 1.0
    delta /= b
    for s in reversed(layout.layers):
        grad[s.start:s.weight_stop] = (acts[s.index].T @ delta).ravel()
        grad[s.weight_stop:s.stop] = delta.sum(axis=0)
        if s.index > 0:
            delta = (delta @ layout.weight(params, s.index).T) * (pre[s.index - 1] > 0)
    return float(np.mean(cross_entropy(probs, labels))), grad


def _finite_or_raise(grad, batch_index):
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient", batch=batch_index)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, batch_index: int | None = None) -> np.ndarray:
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    _finite_or_raise(grad, batch_index)
    return params - lr * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamHyper = AdamHyper(),
              batch_index: int | None = None) -> tuple[np.ndarray, AdamState]:
    if hyper.lr <= 0:
        raise ConfigError("learning rate must be positive")
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ConfigError("Adam state does not match the parameter vector")
    _finite_or_raise(grad, batch_index)
    t = state.t + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grad * grad
    m_hat = m / (1 - hyper.beta1 ** t)
    v_hat = v / (1 - hyper.beta2 ** t)
    return params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps), AdamState(m, v, t)


@dataclass
class Optimizer:
    """Stateful wrapper over :func:`sgd_step` / :func:`adam_step`."""

    kind: str = "sgd"
    lr: float = 0.01
    state: AdamState | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")

    def step(self, params: np.ndarray, grad: np.ndarray, batch_index: int | None = None) -> np.ndarray:
        if self.kind == "sgd":
            return sgd_step(params, grad, self.lr, batch_index)
        if self.state is None:
            self.state = AdamState.zeros(params.shape[0])
        params, self.state = adam_step(params, grad, self.state, AdamHyper(lr=self.lr), batch_index)
        return params


def iterate_minibatches(count: int, batch_size: int, rng: np.random.Generator | None):
    """Index arrays covering ``range(count)``; shuffled when ``rng`` is given."""
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for i in range(0, count, batch_size):
        yield order[i:i + batch_size]


def train_epoch(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray,
                optimizer: Optimizer, batch_size: int, rng: np.random.Generator,
                epoch: int | None = None, on_batch=None) -> tuple[np.ndarray, float]:
    """One pass of minibatch training. Returns new params and the mean batch loss.

    ``on_batch(batch_index, params)`` is called after every update.
    """
    total = 0.0
    nb = 0
    for bi, idx in enumerate(iterate_minibatches(len(inputs), batch_size, rng)):
        value, grad = batch_gradient(spec, params, inputs[idx], labels[idx])
        if not np.isfinite(value):
            raise TrainingError("non-finite loss", epoch=epoch, batch=bi)
        try:
            params = optimizer.step(params, grad, bi)
        except TrainingError as exc:
            raise TrainingError("non-finite gradient", epoch=epoch, batch=exc.batch) from exc
        total += value
        nb += 1
        if on_batch is not None:
            on_batch(bi, params)
    return params, total / max(nb, 1)
