import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradspace import data_io, nn_core, rbm
from gradspace.errors import ConfigError, ParseError


def _pair(tmp_path, images, labels, gz=False):
    ext = ".gz" if gz else ""
    ip, lp = tmp_path / f"img{ext}", tmp_path / f"lab{ext}"
    opener = gzip.open if gz else open
    with opener(ip, "wb") as f:
        f.write(data_io.idx_images_bytes(images))
    with opener(lp, "wb") as f:
        f.write(data_io.idx_labels_bytes(labels))
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_two_image_fixture(tmp_path, gz):
    images = np.array([[[0, 255], [128, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)
    ds = data_io.load_idx(*_pair(tmp_path, images, np.array([3, 7]), gz))
    assert ds.inputs.shape == (2, 4)
    assert np.array_equal(ds.inputs[0], [0.0, 1.0, 128 / 255, 0.0])
    assert ds.labels.tolist() == [3, 7]


def test_count_mismatch(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    with pytest.raises(ParseError):
        data_io.load_idx(*_pair(tmp_path, images, np.array([1, 2, 3])))


def test_parse_errors_carry_offsets():
    with pytest.raises(ParseError) as exc:
        data_io.parse_idx_images(b"")
    assert exc.value.offset == 0
    with pytest.raises(ParseError) as exc:
        data_io.parse_idx_labels(struct.pack(">2I", data_io.IMAGE_MAGIC, 0))
    assert exc.value.offset == 0
    body = data_io.idx_images_bytes(np.zeros((1, 2, 2), dtype=np.uint8))
    with pytest.raises(ParseError) as exc:
        data_io.parse_idx_images(body[:-1])
    assert exc.value.offset == len(body) - 1
    with pytest.raises(ParseError):
        data_io.parse_idx_images(body + b"\0")


def test_write_idx_is_byte_exact(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, 5)
    ip, lp = _pair(tmp_path, images, labels)
    ds = data_io.load_idx(ip, lp)
    data_io.write_idx(ds, tmp_path / "out_img", tmp_path / "out_lab")
    assert (tmp_path / "out_img").read_bytes() == ip.read_bytes()
    assert (tmp_path / "out_lab").read_bytes() == lp.read_bytes()
    data_io.write_idx(ds, tmp_path / "a.gz", tmp_path / "b.gz")
    first = (tmp_path / "a.gz").read_bytes()
    data_io.write_idx(ds, tmp_path / "a.gz", tmp_path / "b.gz")
    assert (tmp_path / "a.gz").read_bytes() == first


def test_dataset_validation():
    with pytest.raises(ConfigError):
        data_io.Dataset(np.full((2, 2), 1.5), [0, 1])
    with pytest.raises(ConfigError):
        data_io.Dataset(np.zeros((2, 2)), [0])
    with pytest.raises(ConfigError):
        data_io.Dataset(np.zeros((2, 2)), [0, 3], {"num_classes": 2})


def test_missing_mnist_names_fetch_script(tmp_path):
    with pytest.raises(FileNotFoundError, match="fetch_mnist"):
        data_io.load_mnist(tmp_path)


def test_split_half_ten():
    ds = data_io.synth_blobs(2, 3, 5, 4.0, seed=0)
    a, b = data_io.split_half(ds, seed=1)
    assert len(a) == len(b) == 5
    a2, _ = data_io.split_half(ds, seed=1)
    assert np.array_equal(a.inputs, a2.inputs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 200), st.integers(0, 2**31 - 1))
def test_split_half_partitions(count, seed):
    rng = np.random.default_rng(seed)
    ds = data_io.Dataset(rng.random((count, 2)), rng.integers(0, 3, count), {"num_classes": 3})
    a, b = data_io.split_half(ds, seed)
    assert len(a) == count // 2 and len(a) + len(b) == count
    rows = sorted(map(tuple, np.vstack([a.inputs, b.inputs])))
    assert rows == sorted(map(tuple, ds.inputs))


def test_split_half_keeps_class_balance():
    ds = data_io.synth_blobs(10, 4, 100, 3.0, seed=2)
    a, _ = data_io.split_half(ds, seed=3)
    hist = np.bincount(a.labels, minlength=10)
    assert np.all(np.abs(hist - 50) <= 3)


def test_blobs_shapes():
    ds = data_io.synth_blobs(4, 7, 13, 2.0, seed=5)
    assert ds.inputs.shape == (52, 7) and ds.num_classes == 4
    assert np.array_equal(np.bincount(ds.labels), [13] * 4)
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1


def _linear_accuracy(ds, seed=0):
    train, test = data_io.split_half(ds, seed)
    spec, params = rbm.fit_linear_classifier(train.inputs, train.labels, ds.num_classes, epochs=20, lr=0.5)
    return nn_core.accuracy(spec, params, test.inputs, test.labels)


def test_blobs_separation_controls_difficulty():
    assert _linear_accuracy(data_io.synth_blobs(3, 10, 400, 8.0, seed=6)) >= 0.99
    chance = _linear_accuracy(data_io.synth_blobs(3, 10, 400, 0.0, seed=7))
    assert abs(chance - 1 / 3) <= 0.06


def test_binary_and_binarize():
    ds = data_io.synth_binary(3, 20, 50, seed=8)
    assert set(np.unique(ds.inputs)) <= {0.0, 1.0}
    grey = data_io.Dataset(np.array([[0.2, 0.5, 0.51]]), [0])
    assert data_io.binarize(grey).inputs.tolist() == [[0.0, 0.0, 1.0]]
