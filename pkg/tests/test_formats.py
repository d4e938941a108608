import struct

import numpy as np
import pytest

from gradspace import formats, nn_core
from gradspace.errors import ParseError, ProvenanceError
from gradspace.grad_features import FeaturePipeline, GradFeature, GradientSource
from gradspace.gradnet import GradNetModel, GradNetSpec
from gradspace.rbm import RbmModel


def _features(n=5, dense_len=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        idx = np.sort(rng.choice(dense_len, int(rng.integers(0, 8)), replace=False))
        out.append(GradFeature(i, int(rng.integers(0, 10)), idx, rng.standard_normal(len(idx)), dense_len,
                               ["scale", "power:0.5"]))
    return out


def test_checkpoint_layout_is_documented_bytes():
    buf = formats.encode_checkpoint({"kind": "x"}, np.array([1.5, -2.0]))
    magic, version, hlen = struct.unpack_from("<4sII", buf)
    assert (magic, version) == (b"GRDN", 1)
    assert buf[12:12 + hlen] == b'{"kind":"x","n":2}'
    assert np.frombuffer(buf[12 + hlen:], "<f8").tolist() == [1.5, -2.0]


def test_network_round_trip_is_byte_exact(tmp_path):
    spec = nn_core.NetworkSpec(6, (4, 3), 2, seed=3)
    params = nn_core.init_params(spec)
    digest = formats.save_network(tmp_path / "a.grdn", spec, params, test_accuracy=0.5)
    spec2, params2, header, digest2 = formats.load_network(tmp_path / "a.grdn")
    assert spec2 == spec and np.array_equal(params2, params) and digest == digest2
    assert header["test_accuracy"] == 0.5
    extra = {k: v for k, v in header.items() if k not in ("kind", "spec", "layout", "n")}
    formats.save_network(tmp_path / "b.grdn", spec2, params2, **extra)
    assert (tmp_path / "a.grdn").read_bytes() == (tmp_path / "b.grdn").read_bytes()
    assert formats.file_hash(tmp_path / "a.grdn") == digest


def test_rbm_round_trip(tmp_path):
    model = RbmModel.create(7, 3, seed=1)
    formats.save_rbm(tmp_path / "r.grdn", model)
    back, _, _ = formats.load_rbm(tmp_path / "r.grdn")
    assert np.array_equal(back.flat(), model.flat())
    with pytest.raises(ParseError):
        formats.load_network(tmp_path / "r.grdn")


def test_gradnet_round_trip(tmp_path):
    base = nn_core.NetworkSpec(5, (4,), 3)
    source = GradientSource(base, nn_core.init_params(base))
    spec = GradNetSpec(block_sizes=(3, 2), num_classes=3, use_batchnorm=True)
    model = GradNetModel.create(spec, source.layout)
    model.running_mean += 0.25
    x = np.random.default_rng(0).random((12, 5))
    pipe = FeaturePipeline(q=50, steps=("standard",), label_mask_fraction=0.5)
    pipe.fit(source, x, np.arange(12) % 3)
    formats.save_gradnet(tmp_path / "g.grdn", model, pipe, "abc")
    m2, p2, header, _ = formats.load_gradnet(tmp_path / "g.grdn")
    assert header["base_checkpoint_hash"] == "abc"
    assert np.array_equal(m2.params, model.params) and np.array_equal(m2.running_mean, model.running_mean)
    assert (p2.transform(source, x, [0] * 12) != pipe.transform(source, x, [0] * 12)).nnz == 0
    formats.save_gradnet(tmp_path / "h.grdn", m2, p2, "abc")
    assert (tmp_path / "g.grdn").read_bytes() == (tmp_path / "h.grdn").read_bytes()


def test_features_round_trip_is_byte_exact(tmp_path):
    feats = _features()
    formats.write_features(tmp_path / "f.grdf", {"dense_len": 40, "norm_pipeline": ["scale", "power:0.5"]}, feats)
    header, back = formats.read_features(tmp_path / "f.grdf")
    assert header["count"] == 5
    for a, b in zip(feats, back):
        assert (a.sample_id, a.hyp_label) == (b.sample_id, b.hyp_label)
        assert np.array_equal(a.indices, b.indices) and np.array_equal(a.values, b.values)
    formats.write_features(tmp_path / "g.grdf", header, back)
    assert (tmp_path / "f.grdf").read_bytes() == (tmp_path / "g.grdf").read_bytes()


def test_checkpoint_parse_errors():
    good = formats.encode_checkpoint({"kind": "x"}, np.zeros(3))
    cases = [
        (b"", 0),
        (b"NOPE" + good[4:], 0),
        (good[:4] + struct.pack("<I", 9) + good[8:], 4),
        (good[:-1], None),
        (good[:12] + b"[" + good[13:], 12),
    ]
    for buf, offset in cases:
        with pytest.raises(ParseError) as exc:
            formats.decode_checkpoint(buf)
        if offset is not None:
            assert exc.value.offset == offset


def test_feature_parse_errors():
    good = formats.encode_features({"dense_len": 40}, _features())
    with pytest.raises(ParseError):
        formats.decode_features(good[:-3])
    with pytest.raises(ParseError):
        formats.decode_features(formats.encode_checkpoint({}, np.zeros(1)))
    bad = formats.encode_features({"dense_len": 40}, [GradFeature(0, 0, [39], [1.0], 40)])
    bad = bad.replace(struct.pack("<I", 39), struct.pack("<I", 41))
    with pytest.raises(ParseError):
        formats.decode_features(bad)


def test_hash_mismatch_is_refused():
    formats.require_base({"base_checkpoint_hash": "a"}, "a")
    with pytest.raises(ProvenanceError):
        formats.require_base({"base_checkpoint_hash": "a"}, "b")
    with pytest.raises(ProvenanceError):
        formats.require_base({}, "b")
