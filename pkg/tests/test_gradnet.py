import numpy as np
import pytest
import scipy.sparse as sp

from gradspace import nn_core
from gradspace import gradnet as gn
from gradspace.errors import ConfigError, TrainingError, UsageError
from gradspace.grad_features import FeaturePipeline, GradFeature
from support import binary_base
from support import overfit_run as support_overfit_run


@pytest.fixture(scope="module")
def overfit_run():
    return support_overfit_run()


def test_partition_follows_adjacent_layers():
    layout = nn_core.NetworkSpec(16, (16, 16), 4).layout()
    assert gn.GradNetSpec().partition(layout) == [(0, 544), (272, 612), (544, 612)]
    assert gn.GradNetSpec(wiring="single").partition(layout) == [(0, 272), (272, 544), (544, 612)]
    with pytest.raises(ConfigError):
        gn.GradNetSpec(block_sizes=(5, 5)).partition(layout)


def test_spec_validation():
    for bad in ({"wiring": "all"}, {"block_sizes": (0, 1)}, {"dropout_p": 1.0}, {"optimizer": "rmsprop"}):
        with pytest.raises(ConfigError):
            gn.GradNetSpec(**bad)
    assert gn.GradNetSpec().learning_rate == 0.01
    assert gn.GradNetSpec(optimizer="adam").learning_rate == 0.001


def test_zero_model_is_uniform():
    layout = nn_core.NetworkSpec(3, (2,), 3).layout()
    spec = gn.GradNetSpec(block_sizes=(2, 2), num_classes=3)
    model = gn.GradNetModel(spec, spec.partition(layout), layout.size)
    assert np.array_equal(gn.gradnet_forward(model, np.zeros(layout.size)), np.full(3, 1 / 3))


def test_feature_length_mismatch():
    layout = nn_core.NetworkSpec(3, (2,), 3).layout()
    spec = gn.GradNetSpec(block_sizes=(2, 2), num_classes=3)
    model = gn.GradNetModel.create(spec, layout)
    with pytest.raises(ConfigError):
        gn.gradnet_forward(model, np.zeros(layout.size + 1))
    with pytest.raises(ConfigError):
        gn.gradnet_forward(model, GradFeature.from_dense(np.ones(layout.size - 1)))


def test_block_ignores_coordinates_outside_its_range():
    layout = nn_core.NetworkSpec(4, (3, 3), 2).layout()
    spec = gn.GradNetSpec(block_sizes=(2, 3, 2), num_classes=2)
    model = gn.GradNetModel.create(spec, layout, density=0.5)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(layout.size)
    base = model.hidden_preactivation(x)
    off = 0
    for (a, b), h in zip(model.partition, spec.block_sizes):
        outside = [j for j in range(layout.size) if not a <= j < b]
        y = x.copy()
        y[outside] += rng.standard_normal(len(outside))
        assert np.array_equal(model.hidden_preactivation(y)[:, off:off + h], base[:, off:off + h])
        off += h


def test_forward_matches_dense_embedding():
    layout = nn_core.NetworkSpec(5, (4, 3), 3).layout()
    spec = gn.GradNetSpec(block_sizes=(3, 4, 2), num_classes=3, seed=7)
    model = gn.GradNetModel.create(spec, layout)
    model.params += 0.1 * np.random.default_rng(1).standard_normal(model.num_params)
    full = np.zeros((layout.size, model.hidden_size))
    bias = np.concatenate([model.view(f"b{i}") for i in range(3)])
    off = 0
    for i, ((a, b), h) in enumerate(zip(model.partition, spec.block_sizes)):
        full[a:b, off:off + h] = model.view(f"W{i}")
        off += h
    x = np.random.default_rng(2).standard_normal((6, layout.size))
    x[x < 0.5] = 0.0
    logits = np.maximum(x @ full + bias, 0.0) @ model.view("V") + model.view("c")
    expected = np.exp(logits - logits.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    assert np.max(np.abs(gn.gradnet_forward(model, sp.csr_matrix(x)) - expected)) <= 1e-12
    single = gn.gradnet_forward(model, GradFeature.from_dense(x[0]))
    assert np.max(np.abs(single - expected[0])) <= 1e-12


def test_parameters_cover_only_block_ranges():
    layout = nn_core.NetworkSpec(16, (16, 16), 4).layout()
    model = gn.GradNetModel.create(gn.GradNetSpec(num_classes=4), layout)
    expected = sum((b - a + 1) * h for (a, b), h in zip(model.partition, (5, 100, 25))) + 130 * 4 + 4
    assert model.num_params == expected


def test_zero_epochs_returns_init():
    source, data = binary_base(epochs=0)
    spec = gn.GradNetSpec(num_classes=4, seed=3)
    pipe = FeaturePipeline()
    model, trace = gn.train_gradnet(source, data.inputs[:8], data.labels[:8], spec, pipe, epochs=0)
    assert trace == []
    assert np.array_equal(model.params, gn.GradNetModel.create(spec, source.layout, pipe.density).params)


def test_single_batch_overfit(overfit_run):
    model, accs, _, trace = overfit_run
    assert max(accs) == 1.0
    assert len(trace) == 200 and all(row.split == "train" for row in trace)


def test_overfit_loss_never_increases(overfit_run):
    losses = overfit_run[2]
    assert np.all(np.diff(losses) <= 0.0)


def test_parameter_count_fixed_by_training(overfit_run):
    model = overfit_run[0]
    assert model.num_params == gn.GradNetModel.create(model.spec, binary_base(epochs=0)[0].layout).num_params


def test_training_is_bit_reproducible():
    source, data = binary_base(epochs=2)
    spec = gn.GradNetSpec(num_classes=4, seed=5, batch_size=8)
    runs = [gn.train_gradnet(source, data.inputs[:40], data.labels[:40], spec, FeaturePipeline(), epochs=3)
            for _ in range(2)]
    assert np.array_equal(runs[0][0].params, runs[1][0].params)
    assert runs[0][1] == runs[1][1]


def test_non_finite_loss_reports_position():
    source, data = binary_base(epochs=0)
    spec = gn.GradNetSpec(num_classes=4)
    model = gn.GradNetModel.create(spec, source.layout)
    model.params[:] = np.nan
    with pytest.raises(TrainingError) as exc:
        gn.train_gradnet(source, data.inputs[:8], data.labels[:8], spec, FeaturePipeline(), epochs=1, model=model)
    assert exc.value.epoch == 1 and exc.value.batch == 0


class _FixedModel:
    """Returns preset probability rows regardless of input."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)
        self.spec = gn.GradNetSpec(num_classes=self.rows.shape[1])

    def predict_proba(self, x):
        return np.tile(self.rows, (x.shape[0] // len(self.rows), 1))


class _GradientsOnly:
    """A base network that exposes nothing but its loss gradients."""

    def __init__(self, source):
        self._source = source
        self.num_classes = source.num_classes

    def gradients(self, inputs, labels):
        return self._source.gradients(inputs, labels)


def test_prediction_hand_examples():
    source, data = binary_base(classes=2, epochs=0)
    two = _FixedModel([[0.9, 0.1], [0.2, 0.8]])
    assert gn.gradnet_predict(source, two, FeaturePipeline(), data.inputs[0]) == 0
    onehot = _FixedModel([[0.0, 0.0, 0.0, 1.0, 0.0]] * 2)
    assert gn.gradnet_predict(source, onehot, FeaturePipeline(), data.inputs[0]) == 3
    assert gn.argmax_lowest(np.array([[0.5, 0.5], [0.2, 0.2]])).tolist() == [0, 0]


def test_prediction_reads_only_gradients(overfit_run):
    model = overfit_run[0]
    source, data = binary_base()
    pipe = FeaturePipeline()
    x = data.inputs[:10]
    assert np.array_equal(gn.predict_batch(_GradientsOnly(source), model, pipe, x),
                          gn.predict_batch(source, model, pipe, x))


def test_prediction_ignores_label_order(overfit_run):
    model = overfit_run[0]
    source, data = binary_base()
    pipe = FeaturePipeline()
    rng = np.random.default_rng(0)
    for x in data.inputs[:10]:
        total = np.zeros(4)
        for c in rng.permutation(4):
            total += gn.gradnet_forward(model, pipe.transform(source, x[None, :], [c]))[0]
        summed = gn.summed_probabilities(source, model, pipe, x[None, :])[0]
        assert np.allclose(total, summed, rtol=0, atol=1e-12)
        assert gn.gradnet_predict(source, model, pipe, x) == int(np.argmax(summed))


def test_metrics_identities():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 4, 50)
    pred = np.where(rng.random(50) < 0.7, labels, rng.integers(0, 4, 50))
    m = gn.classification_metrics(pred, labels, 4)
    conf = np.array(m["confusion"])
    assert conf.sum(axis=1).tolist() == np.bincount(labels, minlength=4).tolist()
    freq = np.bincount(labels, minlength=4) / 50
    assert m["accuracy"] == pytest.approx(float(freq @ np.array(m["per_class_accuracy"])), abs=1e-15)
    assert gn.classification_metrics([2, 0, 1], [2, 0, 1], 3)["accuracy"] == 1.0
    with pytest.raises(UsageError):
        gn.classification_metrics([], [], 3)


def test_evaluate_empty_set():
    source, _ = binary_base(epochs=0)
    model = gn.GradNetModel.create(gn.GradNetSpec(num_classes=4), source.layout)
    with pytest.raises(UsageError):
        gn.evaluate(source, model, FeaturePipeline(), np.zeros((0, 16)), [])


@pytest.mark.parametrize("batchnorm,dropout", [(False, None), (True, None), (False, 0.3), (True, 0.3)])
def test_backprop_matches_finite_differences(batchnorm, dropout):
    layout = nn_core.NetworkSpec(4, (3,), 3).layout()
    spec = gn.GradNetSpec(block_sizes=(4, 3), num_classes=3, use_batchnorm=batchnorm, dropout_p=dropout, seed=2)
    model = gn.GradNetModel.create(spec, layout)
    rng = np.random.default_rng(0)
    model.params += 0.1 * rng.standard_normal(model.num_params)
    x = rng.standard_normal((6, layout.size))
    labels = rng.integers(0, 3, 6)

    def loss_at(p):
        model.params = p
        return model.loss_and_grad(x, labels, rng=np.random.default_rng(9))

    p0 = model.params.copy()
    _, grad, _ = loss_at(p0.copy())
    h = 1e-6
    for j in rng.choice(len(p0), 25, replace=False):
        e = np.zeros_like(p0)
        e[j] = h
        fd = (loss_at(p0 + e)[0] - loss_at(p0 - e)[0]) / (2 * h)
        assert abs(fd - grad[j]) <= 1e-6 * max(1.0, abs(fd))
