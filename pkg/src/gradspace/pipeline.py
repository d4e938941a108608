"""Experiment commands. Each takes a resolved config and writes its artifacts
under ``config.out_dir``; files are the only interface between commands."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from . import formats, metric, nn_core
from .config import ExperimentConfig
from .data_io import Dataset, binarize, load_mnist, split_half, synth_blobs
from .errors import ConfigError, DataError
from .grad_features import (FeaturePipeline, GradientSource, build_grad_graph, csr_to_features, export_dot,
                            features_to_csr, hypothesized_labels)
from .gradnet import (GradNetModel, GradNetSpec, TraceRow, classification_metrics, evaluate, train_gradnet)
from .rbm import (RbmModel, fit_fisher_diagonal, fit_linear_classifier, tangent_features, train_rbm,
                  hidden_expectation)

log = logging.getLogger("gradspace")


# ---------------------------------------------------------------- helpers

def relative_gain(original: float, improved: float) -> float:
    """Relative gain ``improved / original - 1``."""
    if original <= 0:
        raise ConfigError("original accuracy must be positive")
    return improved / original - 1.0


def format_gain(gain: float) -> str:
    return f"{gain * 100:+.1f}%"


def out_path(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_trace(path: str, rows: list[TraceRow], cfg: ExperimentConfig) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash} seed={cfg.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "accuracy", "loss"])
    for r in rows:
        w.writerow([r.epoch, r.split, repr(float(r.accuracy)), repr(float(r.loss))])
    with open(path, "w") as f:
        f.write(buf.getvalue())


def table(rows: list[tuple], stream=None) -> None:
    stream = sys.stderr if stream is None else stream
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        stream.write("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(training pool, test set) per the data section."""
    d = cfg.data
    if d.source == "mnist":
        try:
            train = load_mnist(d.mnist_dir, "train").head(d.train_limit)
            test = load_mnist(d.mnist_dir, "test").head(d.test_limit)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
        return train, test
    if d.source == "blobs":
        full = synth_blobs(d.blob_classes, d.blob_dim, d.blob_per_class, d.blob_separation, cfg.seed)
        pool, test = split_half(full, cfg.seed + 1)
        return pool.head(d.train_limit), test.head(d.test_limit)
    raise ConfigError(f"unknown data source {d.source!r}")


def halves(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(base training half, GradNet half, test set)."""
    pool, test = load_data(cfg)
    a, b = split_half(pool, cfg.seed)
    return a, b, test


def base_spec(cfg: ExperimentConfig, data: Dataset) -> nn_core.NetworkSpec:
    return nn_core.NetworkSpec(data.dim, tuple(cfg.base.hidden_dims), data.num_classes, seed=cfg.seed)


def gradnet_spec(cfg: ExperimentConfig, num_classes: int) -> GradNetSpec:
    g = cfg.gradnet
    return GradNetSpec(block_sizes=tuple(g.block_sizes), num_classes=num_classes, wiring=g.wiring,
                       activation=g.activation, dropout_p=g.dropout_p, use_batchnorm=g.batchnorm,
                       optimizer=g.optimizer, lr=g.lr, epochs=g.epochs, batch_size=g.batch_size, seed=cfg.seed)


def feature_pipeline(cfg: ExperimentConfig) -> FeaturePipeline:
    f = cfg.features
    return FeaturePipeline(q=f.q, steps=tuple(f.norm), label_mask_fraction=f.label_mask_fraction)


# ---------------------------------------------------------------- base training

class _Snapshotter:
    def __init__(self, cfg, spec, test, thresholds):
        self.cfg, self.spec, self.test = cfg, spec, test
        self.pending = sorted(thresholds)
        self.snapshots = []
        self.trace: list[TraceRow] = []

    def check(self, params, epoch, batch) -> float:
        acc = nn_core.accuracy(self.spec, params, self.test.inputs, self.test.labels)
        while self.pending and acc >= self.pending[0]:
            t = self.pending.pop(0)
            name = f"base_acc{int(round(t * 1000)):04d}.grdn"
            path = out_path(self.cfg, name)
            digest = formats.save_network(path, self.spec, params, test_accuracy=acc, threshold=t, epoch=epoch,
                                          batch=batch, **self.cfg.provenance())
            self.snapshots.append({"path": name, "threshold": t, "test_accuracy": acc, "epoch": epoch,
                                   "batch": batch, "sha256": digest})
            log.info("snapshot %s at accuracy %.4f (epoch %d, batch %s)", name, acc, epoch, batch)
        return acc


def cmd_train_base(cfg: ExperimentConfig) -> dict:
    """Train the base MLP, snapshotting the first time test accuracy crosses each threshold."""
    base_half, _, test = halves(cfg)
    spec = base_spec(cfg, base_half)
    params = nn_core.init_params(spec)
    opt = nn_core.Optimizer(cfg.base.optimizer, cfg.base.lr)
    rng = np.random.default_rng(cfg.seed)
    snap = _Snapshotter(cfg, spec, test, cfg.base.thresholds)
    every = cfg.base.eval_every

    class _Stop(Exception):
        pass

    epoch = 0
    try:
        for epoch in range(1, cfg.base.max_epochs + 1):
            def on_batch(bi, p, epoch=epoch):
                if every and (bi + 1) % every == 0:
                    snap.check(p, epoch, bi + 1)
                    if cfg.base.thresholds and not snap.pending:
                        raise _Stop(p)
            try:
                params, mean_loss = nn_core.train_epoch(spec, params, base_half.inputs, base_half.labels, opt,
                                                        cfg.base.batch_size, rng, epoch, on_batch)
            except _Stop as stop:
                params = stop.args[0]
                raise
            acc = snap.check(params, epoch, None)
            snap.trace.append(TraceRow(epoch, "train", nn_core.accuracy(spec, params, base_half.inputs,
                                                                        base_half.labels), mean_loss))
            snap.trace.append(TraceRow(epoch, "test", acc, nn_core.loss(spec, params, test.inputs, test.labels)))
            if cfg.base.thresholds and not snap.pending:
                break
    except _Stop:
        pass
    if snap.pending:
        log.warning("thresholds %s not reached within %d epochs", snap.pending, cfg.base.max_epochs)
    final_acc = nn_core.accuracy(spec, params, test.inputs, test.labels)
    digest = formats.save_network(out_path(cfg, "base_final.grdn"), spec, params, test_accuracy=final_acc,
                                  epoch=epoch, **cfg.provenance())
    write_trace(out_path(cfg, "base_trace.csv"), snap.trace, cfg)
    summary = {"snapshots": snap.snapshots, "unreached": snap.pending,
               "final": {"path": "base_final.grdn", "test_accuracy": final_acc, "sha256": digest},
               **cfg.provenance()}
    write_json(out_path(cfg, "base_summary.json"), summary)
    table([("checkpoint", "test accuracy")] + [(s["path"], f"{s['test_accuracy']:.4f}") for s in snap.snapshots]
          + [("base_final.grdn", f"{final_acc:.4f}")])
    return summary


# ---------------------------------------------------------------- gradient features

def cmd_extract(cfg: ExperimentConfig, base_path: str, split: str = "gradnet", label_mode: str | None = None,
                out: str | None = None, limit: int | None = None) -> str:
    """Write GRDF features of one split at the configured label mode."""
    spec, params, _, base_hash = formats.load_network(base_path)
    _, gradnet_half, test = halves(cfg)
    data = {"gradnet": gradnet_half, "test": test}.get(split)
    if data is None:
        raise ConfigError(f"unknown split {split!r}")
    data = data.head(limit)
    mode = label_mode or (cfg.features.label_mode if split == "gradnet" else "all_labels")
    source = GradientSource(spec, params)
    pipe = feature_pipeline(cfg)
    rng = np.random.default_rng(cfg.seed + 3)
    rows, hyp = hypothesized_labels(data.labels, source.num_classes, mode, rng)
    if pipe.needs_fit:
        _, fit_hyp = hypothesized_labels(data.labels, source.num_classes, "random", np.random.default_rng(cfg.seed + 2))
        pipe.fit(source, data.inputs, fit_hyp)
    features = []
    for i in range(0, len(rows), 64):
        r, h = rows[i:i + 64], hyp[i:i + 64]
        x = pipe.transform(source, data.inputs[r], h)
        features.extend(csr_to_features(x, r, h, pipe.steps))
    header = {"dense_len": source.dense_len, "norm_pipeline": list(pipe.steps), "q": pipe.q, "label_mode": mode,
              "base_checkpoint_hash": base_hash, "split": split, "true_labels": data.labels.tolist(),
              "label_mask_fraction": pipe.label_mask_fraction, **cfg.provenance()}
    path = out or out_path(cfg, f"features_{split}.grdf")
    formats.write_features(path, header, features)
    return path


def _train_from_features(cfg, spec: GradNetSpec, layout, features_path, base_hash):
    header, feats = formats.read_features(features_path)
    formats.require_base(header, base_hash, features_path)
    x = features_to_csr(feats)
    labels = np.asarray(header["true_labels"], dtype=np.int64)[[f.sample_id for f in feats]]
    pipe = FeaturePipeline(q=header["q"], steps=tuple(header["norm_pipeline"]),
                           label_mask_fraction=header.get("label_mask_fraction"))
    model = GradNetModel.create(spec, layout, pipe.density)
    opt = nn_core.Optimizer(spec.optimizer, spec.learning_rate)
    rng = np.random.default_rng(spec.seed + 1)
    trace = []
    for epoch in range(1, spec.epochs + 1):
        total = correct = 0.0
        for bi, idx in enumerate(nn_core.iterate_minibatches(x.shape[0], spec.batch_size, rng)):
            value, grad, probs = model.loss_and_grad(x[idx], labels[idx], rng=rng)
            model.params = opt.step(model.params, grad, bi)
            total += value * len(idx)
            correct += np.sum(np.argmax(probs, axis=1) == labels[idx])
        trace.append(TraceRow(epoch, "train", correct / x.shape[0], total / x.shape[0]))
    return model, pipe, trace


def cmd_train_gradnet(cfg: ExperimentConfig, base_path: str, features_path: str | None = None,
                      out: str | None = None) -> dict:
    spec, params, _, base_hash = formats.load_network(base_path)
    source = GradientSource(spec, params)
    gspec = gradnet_spec(cfg, spec.num_classes)
    _, gradnet_half, test = halves(cfg)
    if features_path:
        pipe_probe = feature_pipeline(cfg)
        if pipe_probe.needs_fit:
            raise ConfigError("fitted normalizations (standard, label masks) need on-the-fly training")
        model, pipe, trace = _train_from_features(cfg, gspec, source.layout, features_path, base_hash)
    else:
        pipe = feature_pipeline(cfg)
        eval_set = (test.inputs, test.labels) if cfg.gradnet.eval_each_epoch else None
        model, trace = train_gradnet(source, gradnet_half.inputs, gradnet_half.labels, gspec, pipe,
                                     augment_sigma=cfg.features.augment_sigma, eval_set=eval_set)
    path = out or out_path(cfg, "gradnet.grdn")
    digest = formats.save_gradnet(path, model, pipe, base_hash, **cfg.provenance())
    write_trace(out_path(cfg, "gradnet_trace.csv"), trace, cfg)
    table([("epoch", "split", "accuracy", "loss")]
          + [(r.epoch, r.split, f"{r.accuracy:.4f}", f"{r.loss:.4f}") for r in trace])
    return {"path": path, "sha256": digest, "trace": [r.__dict__ for r in trace]}


def cmd_eval(cfg: ExperimentConfig, base_path: str, gradnet_path: str, out: str | None = None) -> dict:
    """Base accuracy, GradNet accuracy and relative gain on the test set."""
    spec, params, _, base_hash = formats.load_network(base_path)
    model, pipe, header, _ = formats.load_gradnet(gradnet_path)
    formats.require_base(header, base_hash, gradnet_path)
    _, _, test = halves(cfg)
    source = GradientSource(spec, params)
    base_pred = nn_core.predict(spec, params, test.inputs)
    base = classification_metrics(base_pred, test.labels, spec.num_classes)
    improved = evaluate(source, model, pipe, test.inputs, test.labels)
    result = {
        "base_accuracy": base["accuracy"],
        "gradnet_accuracy": improved["accuracy"],
        "gain": relative_gain(base["accuracy"], improved["accuracy"]),
        "base": base,
        "gradnet": improved,
        "base_checkpoint_hash": base_hash,
        **cfg.provenance(),
    }
    write_json(out or out_path(cfg, "eval.json"), result)
    table([("original", "improved", "gain"),
           (f"{base['accuracy']:.4f}", f"{improved['accuracy']:.4f}", format_gain(result["gain"]))])
    return result


# ---------------------------------------------------------------- RBM branch

def cmd_rbm(cfg: ExperimentConfig) -> dict:
    """Train an RBM and compare linear models on hidden activations vs normalized tangent features."""
    r = cfg.rbm
    pool, test = load_data(cfg)
    train = binarize(pool.head(r.train_count), r.binarize_threshold)
    test = binarize(test.head(r.test_count), r.binarize_threshold)
    model = RbmModel.create(train.dim, r.hidden, seed=cfg.seed)
    model, recon = train_rbm(model, train.inputs, r.epochs, r.batch_size, r.cd_k, r.lr, seed=cfg.seed)
    digest = formats.save_rbm(out_path(cfg, "rbm.grdn"), model, reconstruction_error=recon, **cfg.provenance())
    ncls = pool.num_classes

    def linear_accuracy(train_x, test_x):
        spec, params = fit_linear_classifier(train_x, train.labels, ncls, r.classifier_epochs, r.classifier_lr,
                                             seed=cfg.seed)
        return nn_core.accuracy(spec, params, test_x, test.labels)

    original = linear_accuracy(hidden_expectation(model, train.inputs), hidden_expectation(model, test.inputs))
    fisher = fit_fisher_diagonal(model, train.inputs)
    improved = linear_accuracy(tangent_features(model, fisher, train.inputs), tangent_features(model, fisher, test.inputs))
    result = {"hidden": r.hidden, "original": original, "improved": improved,
              "floored_coordinates": int(fisher.floored.sum()), "reconstruction_error": recon,
              "rbm_sha256": digest, **cfg.provenance()}
    write_json(out_path(cfg, "rbm_metrics.json"), result)
    table([("#hidden", "original", "improved"), (r.hidden, f"{original:.4f}", f"{improved:.4f}")])
    return result


# ---------------------------------------------------------------- diagnostics

def tiny_model_gradients(k, seed: int, count: int | None = None) -> np.ndarray:
    """Per-sample gradients of a small random network, one row per random (input, label).

    Hidden biases start at 1 and inputs are redrawn until every hidden unit is
    active: a sample with dead units has gradient support that is orthogonal
    by structure to other samples, so its kernel entries are zero up to
    rounding and no relative comparison of them is meaningful.
    """
    rng = np.random.default_rng(seed)
    spec = nn_core.NetworkSpec(k.input_dim, tuple(k.hidden_dims), k.num_classes, seed=seed)
    layout = spec.layout()
    params = nn_core.init_params(spec) + 0.3 * rng.standard_normal(spec.num_params)
    for i in range(len(layout.layers) - 1):
        layout.bias(params, i)[...] = 1.0
    count = k.samples if count is None else count
    x = np.empty((0, k.input_dim))
    for _ in range(100):
        cand = rng.uniform(-1.0, 1.0, size=(8 * count, k.input_dim))
        a = cand
        keep = np.ones(len(cand), dtype=bool)
        for i in range(len(layout.layers) - 1):
            z = a @ layout.weight(params, i) + layout.bias(params, i)
            keep &= np.all(z > 0, axis=1)
            a = np.maximum(z, 0.0)
        x = np.vstack([x, cand[keep]])[:count]
        if len(x) == count:
            break
    else:
        raise ConfigError("could not draw inputs that keep every hidden unit active; use a smaller model")
    c = rng.integers(0, k.num_classes, size=count)
    return nn_core.per_sample_gradients(spec, params, x, c)


def cmd_kernel_check(cfg: ExperimentConfig) -> dict:
    """Reparametrization invariance, Mercer and symmetry checks on a tiny model."""
    k = cfg.kernel
    rng = np.random.default_rng(cfg.seed)
    grads = tiny_model_gradients(k, cfg.seed)
    n_full = grads.shape[1]
    if n_full > 64:
        raise ConfigError(f"kernel check is meant for tiny models (n <= 64), got n = {n_full}")
    basis = metric.identifiable_basis(grads)
    reduced = grads @ basis
    identity_dev = metric.invariance_deviation(reduced, metric.Reparametrization(np.eye(reduced.shape[1])))
    devs = [metric.invariance_deviation(reduced, metric.random_reparametrization(reduced.shape[1], rng))
            for _ in range(k.reparametrizations)]
    min_ratio, asym = np.inf, 0.0
    for s in range(k.gram_sets):
        g = tiny_model_gradients(k, cfg.seed + 1 + s, count=int(rng.integers(2, 65)))
        m = metric.build_metric(g)
        K = metric.gram(m, g)
        pairs = [(i, j) for i in range(len(g)) for j in range(i + 1, len(g))][:50]
        asym = max(asym, max((abs(metric.kernel(m, g[i], g[j]) - metric.kernel(m, g[j], g[i])) for i, j in pairs),
                             default=0.0))
        min_ratio = min(min_ratio, float(np.linalg.eigvalsh(K)[0]) / max(float(np.trace(K)), 1e-300))
    result = {
        "n": n_full,
        "identifiable_dim": int(reduced.shape[1]),
        "samples": len(grads),
        "identity_deviation": identity_dev,
        "max_invariance_deviation": max(devs) if devs else 0.0,
        "min_eig_over_trace": min_ratio,
        "max_asymmetry": asym,
        "metric": metric.diagnostics(metric.build_metric(reduced, ridge=0.0)),
    }
    result["pass"] = {
        "invariance": result["max_invariance_deviation"] <= 1e-8,
        "mercer": min_ratio >= -1e-8,
        "symmetry": asym <= 1e-10,
    }
    result.update(cfg.provenance())
    write_json(out_path(cfg, "kernel_check.json"), result)
    print(json.dumps(result["pass"], sort_keys=True))
    return result


def cmd_gradgraph(cfg: ExperimentConfig, base_path: str, out: str | None = None) -> dict:
    spec, params, _, base_hash = formats.load_network(base_path)
    _, _, test = halves(cfg)
    g = cfg.graph
    if not 0 <= g.sample < len(test):
        raise ConfigError(f"sample {g.sample} outside the test set")
    graph = build_grad_graph(spec, params, test.inputs[g.sample], int(test.labels[g.sample]), g.alpha, g.q)
    path = out or out_path(cfg, f"gradgraph_{g.sample}.dot")
    text = export_dot(graph).replace("digraph gradgraph {",
                                     f"digraph gradgraph {{\n  // config_hash={cfg.hash} base={base_hash[:16]}", 1)
    with open(path, "w") as f:
        f.write(text)
    counts = {f"{a}-{b}": {"candidates": graph.candidates[(a, b)], "retained": graph.retained[(a, b)]}
              for a, b in graph.candidates}
    return {"path": path, "edges": len(graph.edges), "layer_pairs": counts,
            "expected": {k: math.ceil(g.alpha * v["candidates"]) if v["candidates"] else 0 for k, v in counts.items()}}
