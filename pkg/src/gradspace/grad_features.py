"""Per-sample gradient features for GradNet.

A batch of features is a ``scipy.sparse.csr_matrix`` with one row per
(sample, hypothesized label) pair; :class:`GradFeature` is the single-row
record used by the file format and the scalar API. Absent coordinates are
never stored, so normalization only ever touches retained values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from . import nn_core
from .errors import ConfigError, UsageError

LABEL_MODES = ("random", "all_labels", "true_labels")


@dataclass
class GradFeature:
    sample_id: int
    hyp_label: int
    indices: np.ndarray
    values: np.ndarray
    dense_len: int
    norm_tag: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ConfigError("indices and values must be 1-d arrays of equal length")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise ConfigError("indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dense_len:
                raise ConfigError("index out of range")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("feature values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dense_len)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dense(cls, v, sample_id=0, hyp_label=0, norm_tag=None) -> "GradFeature":
        v = np.asarray(v, dtype=np.float64)
        idx = np.flatnonzero(v)
        return cls(sample_id, hyp_label, idx, v[idx], v.shape[0], list(norm_tag or []))


def features_to_csr(features: list[GradFeature]) -> sp.csr_matrix:
    if not features:
        raise UsageError("no features")
    n = features[0].dense_len
    indptr = np.zeros(len(features) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([f.nnz for f in features])
    indices = np.concatenate([f.indices for f in features])
    data = np.concatenate([f.values for f in features])
    return sp.csr_matrix((data, indices, indptr), shape=(len(features), n))


def csr_to_features(x: sp.csr_matrix, sample_ids, hyp_labels, norm_tag=()) -> list[GradFeature]:
    x = sp.csr_matrix(x)
    x.sort_indices()
    out = []
    for r in range(x.shape[0]):
        lo, hi = x.indptr[r], x.indptr[r + 1]
        out.append(GradFeature(int(sample_ids[r]), int(hyp_labels[r]), x.indices[lo:hi].copy(),
                               x.data[lo:hi].copy(), x.shape[1], list(norm_tag)))
    return out


class GradientSource:
    """Loss gradients of a frozen base network, and nothing else.

    GradNet only ever sees the base network through this object, so it
    cannot read activations directly.
    """

    def __init__(self, spec: nn_core.NetworkSpec, params: np.ndarray):
        self._spec = spec
        self._params = np.asarray(params, dtype=np.float64)
        self.layout = spec.layout()
        if self._params.shape != (self.layout.size,):
            raise ConfigError("parameter vector does not match the network spec")

    @property
    def num_classes(self) -> int:
        return self._spec.num_classes

    @property
    def dense_len(self) -> int:
        return self.layout.size

    @property
    def input_dim(self) -> int:
        return self._spec.input_dim

    def gradients(self, inputs: np.ndarray, labels, out: np.ndarray | None = None) -> np.ndarray:
        return nn_core.per_sample_gradients(self._spec, self._params, inputs, labels, out=out)


def hypothesized_labels(labels: np.ndarray, num_classes: int, mode: str,
                        rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Expand a batch into (row -> sample position, row -> hypothesized label).

    ``all_labels`` emits rows sample-major: sample 0 with labels 0..C-1, then
    sample 1, and so on.
    """
    count = len(labels)
    if mode == "random":
        if rng is None:
            raise UsageError("random label mode needs an rng")
        return np.arange(count), rng.integers(0, num_classes, size=count)
    if mode == "all_labels":
        return np.repeat(np.arange(count), num_classes), np.tile(np.arange(num_classes), count)
    if mode == "true_labels":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ConfigError("label out of range")
        return np.arange(count), labels.copy()
    raise ConfigError(f"unknown label mode {mode!r}; expected one of {LABEL_MODES}")


def extract_gradients(spec, params, inputs, labels=None, label_mode: str = "all_labels",
                      seed: int = 0, sample_ids=None) -> list[GradFeature]:
    """Dense (unsparsified) gradient features, one per (sample, hypothesized label).

    Rows are computed one at a time so each equals
    :func:`nn_core.per_sample_gradient` bit for bit; batched BLAS calls may
    round differently in the last place.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if labels is None:
        labels = np.zeros(len(inputs), dtype=np.int64)
    rows, hyp = hypothesized_labels(np.asarray(labels), spec.num_classes, label_mode, np.random.default_rng(seed))
    ids = np.arange(len(inputs)) if sample_ids is None else np.asarray(sample_ids)
    return [GradFeature.from_dense(nn_core.per_sample_gradient(spec, params, inputs[r], int(h)), int(ids[r]), int(h))
            for r, h in zip(rows, hyp)]


def percentile_rank(q: float, n: int) -> int:
    """Nearest rank ``ceil(q/100 * n)``, at least 1, in exact arithmetic."""
    if not 0 <= q < 100:
        raise ConfigError(f"percentile must lie in [0, 100), got {q}")
    k = math.ceil(Fraction(q).limit_denominator(10**9) * n / 100)
    return max(k, 1)


def _threshold(absrow: np.ndarray, k: int) -> float:
    # only nonzeros need sorting: the first `zeros` ranks are all 0
    nz = absrow[absrow > 0]
    zeros = absrow.shape[0] - nz.shape[0]
    if k <= zeros:
        return 0.0
    return float(np.partition(nz, k - zeros - 1)[k - zeros - 1])


def percentile_threshold(v: np.ndarray, q: float) -> float:
    v = np.abs(np.asarray(v, dtype=np.float64))
    return _threshold(v, percentile_rank(q, v.shape[0]))


def percentile_sparsify(v, q: float, sample_id: int = 0, hyp_label: int = 0) -> GradFeature:
    """Keep the entries with ``|v| >`` the q-th nearest-rank percentile of ``|v|``."""
    v = np.asarray(v, dtype=np.float64)
    t = percentile_threshold(v, q)
    idx = np.flatnonzero(np.abs(v) > t)
    return GradFeature(sample_id, hyp_label, idx, v[idx], v.shape[0])


def sparsify_rows(dense: np.ndarray, q: float | None) -> sp.csr_matrix:
    """Row-wise :func:`percentile_sparsify` of a dense batch; ``q=None`` keeps all nonzeros."""
    if q is None:
        return sp.csr_matrix(dense)
    absd = np.abs(dense)
    k = percentile_rank(q, dense.shape[1])
    t = np.array([_threshold(row, k) for row in absd])
    keep = absd > t[:, None]
    rows, cols = np.nonzero(keep)
    return sp.csr_matrix((dense[rows, cols], (rows, cols)), shape=dense.shape)


class LabelMask:
    """Per hypothesized label, the coordinates with the largest mean |gradient|."""

    def __init__(self, keep_fraction: float = 0.10):
        if not 0 < keep_fraction <= 1:
            raise ConfigError("keep_fraction must lie in (0, 1]")
        self.keep_fraction = keep_fraction
        self.masks: dict[int, np.ndarray] = {}
        self._sums: dict[int, np.ndarray] = {}
        self._counts: dict[int, int] = {}
        self.dense_len: int | None = None

    def partial_fit(self, x, hyp_labels) -> "LabelMask":
        x = sp.csr_matrix(x) if sp.issparse(x) else sp.csr_matrix(np.atleast_2d(x))
        self.dense_len = x.shape[1]
        hyp_labels = np.asarray(hyp_labels)
        for c in np.unique(hyp_labels):
            rows = x[hyp_labels == c]
            s = np.asarray(abs(rows).sum(axis=0)).ravel()
            c = int(c)
            self._sums[c] = self._sums.get(c, 0) + s
            self._counts[c] = self._counts.get(c, 0) + rows.shape[0]
        return self

    def finish(self) -> "LabelMask":
        if not self._sums:
            raise UsageError("label mask fitted on no features")
        size = math.ceil(self.keep_fraction * self.dense_len)
        for c, s in sorted(self._sums.items()):
            mean = s / self._counts[c]
            # stable sort on -mean: ties resolved by lowest coordinate
            top = np.argsort(-mean, kind="stable")[:size]
            self.masks[c] = np.sort(top)
        return self

    def fit(self, x, hyp_labels) -> "LabelMask":
        return self.partial_fit(x, hyp_labels).finish()

    def mask_for(self, label: int) -> np.ndarray:
        if int(label) not in self.masks:
            raise UsageError(f"label {label} was not seen while fitting the mask")
        return self.masks[int(label)]

    def apply(self, x: sp.csr_matrix, hyp_labels) -> sp.csr_matrix:
        x = sp.csr_matrix(x, copy=True)
        hyp_labels = np.asarray(hyp_labels)
        allowed = np.zeros((max(self.masks) + 1, x.shape[1]), dtype=bool)
        for c in np.unique(hyp_labels):
            allowed[int(c), self.mask_for(c)] = True
        row_of = np.repeat(np.arange(x.shape[0]), np.diff(x.indptr))
        x.data[~allowed[hyp_labels[row_of], x.indices]] = 0.0
        x.eliminate_zeros()
        return x

    def apply_feature(self, f: GradFeature) -> GradFeature:
        keep = np.isin(f.indices, self.mask_for(f.hyp_label))
        return GradFeature(f.sample_id, f.hyp_label, f.indices[keep], f.values[keep], f.dense_len,
                           list(f.norm_tag) + [f"label_mask({self.keep_fraction:g})"])


# ---------------------------------------------------------------- normalization

def parse_step(step: str) -> tuple[str, float | None]:
    step = step.strip().lower()
    if step in ("standard", "l2", "scale"):
        return step, None
    for prefix in ("power:", "power(", "power "):
        if step.startswith(prefix):
            p = float(step[len(prefix):].rstrip(")"))
            if p <= 0:
                raise ConfigError("power exponent must be positive")
            return "power", p
    raise ConfigError(f"unknown normalization step {step!r}")


def step_name(kind: str, p: float | None) -> str:
    return f"power({p:g})" if kind == "power" else kind


class StandardStats:
    """Per-coordinate mean/std over retained (nonzero) coordinates only."""

    def __init__(self, dense_len: int, floor: float = 1e-8):
        self.dense_len = dense_len
        self.floor = floor
        self._n = np.zeros(dense_len)
        self._s = np.zeros(dense_len)
        self._ss = np.zeros(dense_len)
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None

    def partial_fit(self, x: sp.csr_matrix) -> "StandardStats":
        x = sp.csr_matrix(x)
        self._n += np.bincount(x.indices, minlength=self.dense_len)
        self._s += np.bincount(x.indices, weights=x.data, minlength=self.dense_len)
        self._ss += np.bincount(x.indices, weights=x.data * x.data, minlength=self.dense_len)
        return self

    def finish(self) -> "StandardStats":
        seen = self._n > 0
        mean = np.zeros(self.dense_len)
        mean[seen] = self._s[seen] / self._n[seen]
        var = np.zeros(self.dense_len)
        var[seen] = np.maximum(self._ss[seen] / self._n[seen] - mean[seen] ** 2, 0.0)
        std = np.sqrt(var)
        # unseen or constant coordinates are only centered
        std[std < self.floor] = 1.0
        self.mean, self.std = mean, std
        return self

    @property
    def fitted(self) -> bool:
        return self.mean is not None


def _row_reduce(values: np.ndarray, indptr: np.ndarray, ufunc) -> np.ndarray:
    out = np.zeros(len(indptr) - 1)
    nonempty = np.diff(indptr) > 0
    if values.size:
        out[nonempty] = ufunc.reduceat(values, indptr[:-1][nonempty])
    return out


def normalize_csr(x: sp.csr_matrix, steps, stats: StandardStats | None = None) -> sp.csr_matrix:
    """Apply normalization steps left to right to every row's retained values."""
    x = sp.csr_matrix(x, copy=True)
    x.sort_indices()
    counts = np.diff(x.indptr)
    for kind, p in (parse_step(s) if isinstance(s, str) else s for s in steps):
        if kind == "standard":
            if stats is None or not stats.fitted:
                raise UsageError("standard normalization needs fitted statistics")
            x.data = (x.data - stats.mean[x.indices]) / stats.std[x.indices]
        elif kind == "l2":
            norm = np.sqrt(_row_reduce(x.data * x.data, x.indptr, np.add))
            norm[norm == 0] = 1.0
            x.data = x.data / np.repeat(norm, counts)
        elif kind == "scale":
            peak = _row_reduce(np.abs(x.data), x.indptr, np.maximum)
            peak[peak == 0] = 1.0
            x.data = x.data / np.repeat(peak, counts)
        elif kind == "power":
            x.data = np.sign(x.data) * np.abs(x.data) ** p
    return x


def normalize(feature: GradFeature, pipeline, stats: StandardStats | None = None) -> GradFeature:
    steps = [parse_step(s) if isinstance(s, str) else s for s in pipeline]
    x = sp.csr_matrix((feature.values, feature.indices, [0, feature.nnz]), shape=(1, feature.dense_len))
    y = normalize_csr(x, steps, stats)
    return GradFeature(feature.sample_id, feature.hyp_label, y.indices.astype(np.int64), y.data, feature.dense_len,
                       list(feature.norm_tag) + [step_name(*s) for s in steps])


def augment(inputs: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian pixel jitter clipped to [0, 1]; identity when ``sigma == 0``."""
    if sigma <= 0:
        return inputs
    return np.clip(inputs + sigma * rng.standard_normal(inputs.shape), 0.0, 1.0)


@dataclass
class FeaturePipeline:
    """Sparsify, optionally label-mask, then normalize.

    ``q=None`` disables percentile sparsification. Fitted state (standard
    statistics, label masks) comes from :meth:`fit`.
    """

    q: float | None = 85.0
    steps: tuple[str, ...] = ("scale", "power:0.5")
    label_mask_fraction: float | None = None
    stats: StandardStats | None = None
    label_mask: LabelMask | None = None

    def __post_init__(self):
        self.steps = tuple(step_name(*parse_step(s)) for s in self.steps)
        if self.q is not None:
            percentile_rank(self.q, 1)

    @property
    def density(self) -> float:
        """Expected fraction of coordinates that survive sparsification."""
        return 1.0 if self.q is None else max(1.0 - self.q / 100.0, 1e-6)

    @property
    def needs_fit(self) -> bool:
        return "standard" in self.steps or self.label_mask_fraction is not None

    @property
    def fitted(self) -> bool:
        ok = True
        if "standard" in self.steps:
            ok &= self.stats is not None and self.stats.fitted
        if self.label_mask_fraction is not None:
            ok &= self.label_mask is not None and bool(self.label_mask.masks)
        return ok

    def _sparse(self, dense, hyp_labels):
        x = sparsify_rows(dense, self.q)
        if self.label_mask is not None:
            x = self.label_mask.apply(x, hyp_labels)
        return x

    def fit(self, source: GradientSource, inputs: np.ndarray, hyp_labels: np.ndarray,
            batch_size: int = 64) -> "FeaturePipeline":
        """One pass over ``inputs`` at the given hypothesized labels."""
        if self.label_mask_fraction is not None:
            mask = LabelMask(self.label_mask_fraction)
            for i in range(0, len(inputs), batch_size):
                g = source.gradients(inputs[i:i + batch_size], hyp_labels[i:i + batch_size])
                mask.partial_fit(np.abs(g), hyp_labels[i:i + batch_size])
            self.label_mask = mask.finish()
        if "standard" in self.steps:
            stats = StandardStats(source.dense_len)
            for i in range(0, len(inputs), batch_size):
                h = hyp_labels[i:i + batch_size]
                stats.partial_fit(self._sparse(source.gradients(inputs[i:i + batch_size], h), h))
            self.stats = stats.finish()
        return self

    def transform_dense(self, dense: np.ndarray, hyp_labels) -> sp.csr_matrix:
        if not self.fitted:
            raise UsageError("feature pipeline is not fitted")
        return normalize_csr(self._sparse(dense, np.asarray(hyp_labels)), self.steps, self.stats)

    def transform(self, source: GradientSource, inputs: np.ndarray, hyp_labels) -> sp.csr_matrix:
        return self.transform_dense(source.gradients(inputs, hyp_labels), hyp_labels)

    def describe(self) -> dict:
        return {"q": self.q, "steps": list(self.steps), "label_mask_fraction": self.label_mask_fraction}

    def arrays(self) -> dict[str, np.ndarray]:
        """Fitted state as named flat arrays, for checkpointing."""
        out = {}
        if self.stats is not None and self.stats.fitted:
            out["standard_mean"] = self.stats.mean
            out["standard_std"] = self.stats.std
        if self.label_mask is not None:
            for c, m in sorted(self.label_mask.masks.items()):
                out[f"label_mask_{c}"] = m.astype(np.float64)
        return out

    @classmethod
    def restore(cls, desc: dict, arrays: dict[str, np.ndarray], dense_len: int) -> "FeaturePipeline":
        pipe = cls(q=desc["q"], steps=tuple(desc["steps"]), label_mask_fraction=desc.get("label_mask_fraction"))
        if "standard_mean" in arrays:
            pipe.stats = StandardStats(dense_len)
            pipe.stats.mean = arrays["standard_mean"]
            pipe.stats.std = arrays["standard_std"]
        masks = {int(k.rsplit("_", 1)[1]): v.astype(np.int64) for k, v in arrays.items() if k.startswith("label_mask_")}
        if masks:
            pipe.label_mask = LabelMask(pipe.label_mask_fraction or 0.1)
            pipe.label_mask.dense_len = dense_len
            pipe.label_mask.masks = masks
        return pipe


# ---------------------------------------------------------------- gradient graph

@dataclass
class GradGraph:
    nodes: dict[int, list[int]]
    edges: list[tuple[int, int, float]]
    alpha: float
    candidates: dict[tuple[int, int], int]
    retained: dict[tuple[int, int], int]
    labels: dict[int, str] = field(default_factory=dict)


def build_grad_graph(spec: nn_core.NetworkSpec, params, x, c: int, alpha: float, q: float | None = None,
                     max_candidates: int = 20_000_000) -> GradGraph:
    """Adjacent-layer parameter graph weighted by ``g_i * g_j``, kept top-alpha per layer pair.

    Candidate edges are pairs of nonzero gradient coordinates in neighbouring
    layers. ``q`` optionally sparsifies the gradient first, which is what
    keeps MNIST-sized networks tractable.
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    g = nn_core.per_sample_gradient(spec, params, x, c)
    if q is not None:
        f = percentile_sparsify(g, q)
        g = f.to_dense()
    layout = spec.layout()
    per_layer = [np.flatnonzero(g[s.start:s.stop]) + s.start for s in layout.layers]
    edges, candidates, retained = [], {}, {}
    for k in range(len(layout.layers) - 1):
        a, b = per_layer[k], per_layer[k + 1]
        count = a.size * b.size
        candidates[(k, k + 1)] = count
        if count == 0:
            retained[(k, k + 1)] = 0
            continue
        if count > max_candidates:
            raise ConfigError(f"{count} candidate edges between layers {k} and {k + 1}; sparsify with q first")
        w = np.outer(g[a], g[b]).ravel()
        keep = math.ceil(alpha * count)
        ii = np.repeat(a, b.size)
        jj = np.tile(b, a.size)
        order = np.lexsort((jj, ii, -np.abs(w)))[:keep]
        retained[(k, k + 1)] = keep
        edges.extend((int(ii[o]), int(jj[o]), float(w[o])) for o in order)
    nodes: dict[int, set] = {s.index: set() for s in layout.layers}
    for i, j, _ in edges:
        nodes[layout.layer_of(i)].add(i)
        nodes[layout.layer_of(j)].add(j)
    node_lists = {k: sorted(v) for k, v in nodes.items()}
    labels = {p: layout.describe(p) for v in node_lists.values() for p in v}
    return GradGraph(node_lists, edges, alpha, candidates, retained, labels)


def export_dot(graph: GradGraph, name: str = "gradgraph") -> str:
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=circle];"]
    for layer in sorted(graph.nodes):
        lines.append(f"  subgraph cluster_layer{layer} {{")
        lines.append(f'    label="layer {layer}";')
        for p in graph.nodes[layer]:
            lines.append(f'    p{p} [label="{graph.labels.get(p, p)}"];')
        lines.append("  }")
    for i, j, w in graph.edges:
        lines.append(f'  p{i} -> p{j} [label="{w:.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
