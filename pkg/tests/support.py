"""Fixtures shared by the unit and acceptance suites."""

import numpy as np

from gradspace import data_io, nn_core
from gradspace import gradnet as gn
from gradspace.grad_features import FeaturePipeline, GradientSource


def binary_base(classes=4, dim=16, epochs=10):
    """A 16-16 ReLU net trained on binary-mode data, plus that data."""
    data = data_io.synth_binary(classes, dim, 400, seed=1)
    spec = nn_core.NetworkSpec(dim, (16, 16), classes, seed=0)
    params = nn_core.init_params(spec)
    opt = nn_core.Optimizer("sgd", 0.1)
    rng = np.random.default_rng(0)
    for e in range(epochs):
        params, _ = nn_core.train_epoch(spec, params, data.inputs, data.labels, opt, 32, rng, e)
    return GradientSource(spec, params), data


def overfit_run(epochs=200):
    """Default GradNet on one fixed batch of 32; per-epoch summed-prediction accuracy and loss."""
    source, data = binary_base()
    batch = data.head(32)
    spec = gn.GradNetSpec(num_classes=4, seed=0)
    pipe = FeaturePipeline()
    accs, losses = [], []

    def on_epoch(epoch, model, trace):
        m = gn.evaluate(source, model, pipe, batch.inputs, batch.labels)
        accs.append(m["accuracy"])
        losses.append(m["loss"])

    model, trace = gn.train_gradnet(source, batch.inputs, batch.labels, spec, pipe, epochs=epochs,
                                    on_epoch=on_epoch)
    return model, accs, losses, trace
