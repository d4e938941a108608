import json
import os

import numpy as np
import pytest

from gradspace import cli, formats, nn_core, pipeline
from gradspace.config import load_config
from gradspace.errors import ConfigError

BLOBS = {
    "data": {"source": "blobs", "blob_classes": 3, "blob_dim": 10, "blob_per_class": 60, "blob_separation": 6.0},
    "base": {"hidden_dims": [12, 8], "max_epochs": 30, "thresholds": [0.5], "eval_every": None},
    "gradnet": {"epochs": 2, "batch_size": 16},
    "rbm": {"hidden": 4, "train_count": 60, "test_count": 60, "classifier_epochs": 2},
    "graph": {"q": 50.0, "alpha": 0.5},
}


def _config(tmp_path, **sections):
    cfg = json.loads(json.dumps(BLOBS))
    for k, v in sections.items():
        cfg[k].update(v)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(tmp_path, *args, config=None, out="run"):
    return cli.main([args[0], "--config", config or _config(tmp_path), "--out", str(tmp_path / out), *args[1:]])


@pytest.fixture(scope="module")
def blob_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("blobs")
    cfg = _config(tmp)
    out = tmp / "run"
    assert _run(tmp, "train-base", config=cfg) == 0
    base = str(out / "base_acc0500.grdn")
    assert _run(tmp, "train-gradnet", "--base", base, config=cfg) == 0
    assert _run(tmp, "eval", "--base", base, "--gradnet", str(out / "gradnet.grdn"), config=cfg) == 0
    return tmp, cfg, out, base


def test_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "gradnet": {"epochs": 9}}))
    assert load_config(None, env={}).seed == 0
    assert load_config(str(path), env={}).seed == 4
    assert load_config(str(path), env={"GRDN_SEED": "7"}).seed == 7
    cfg = load_config(str(path), ["seed=11", "gradnet.epochs=3"], env={"GRDN_SEED": "7"})
    assert cfg.seed == 11 and cfg.gradnet.epochs == 3


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["gradnet.nonsense=1"], env={})
    with pytest.raises(ConfigError):
        load_config(None, ["seed"], env={})
    with pytest.raises(ConfigError):
        load_config(None, env={"GRDN_SEED": "x"})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(str(bad), env={})


def test_config_hash_ignores_out_dir():
    a = load_config(None, ["out_dir=x"], env={})
    b = load_config(None, ["out_dir=y"], env={})
    assert a.hash == b.hash != load_config(None, ["seed=1"], env={}).hash


def test_gain_formula():
    assert pipeline.format_gain(pipeline.relative_gain(0.72, 0.7936)) == "+10.2%"
    assert pipeline.relative_gain(0.9, 0.9) == 0.0
    assert pipeline.format_gain(0.0) == "+0.0%"


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("GRDN_SEED", raising=False)
    assert _run(tmp_path, "train-base", "--set", "base.nonsense=1") == 2
    missing = _config(tmp_path, data={"source": "mnist", "mnist_dir": str(tmp_path / "none")})
    assert _run(tmp_path, "train-base", config=missing) == 3
    assert _run(tmp_path, "eval", "--base", str(tmp_path / "no.grdn"), "--gradnet", "x") == 3
    assert _run(tmp_path, "kernel-check") == 0
    assert _run(tmp_path, "kernel-check", "--set", "kernel.hidden_dims=[20]") == 2


def test_kernel_check_reports_failure(tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline.metric, "invariance_deviation", lambda *a: 1.0)
    assert _run(tmp_path, "kernel-check") == 4
    result = json.loads((tmp_path / "run" / "kernel_check.json").read_text())
    assert result["pass"]["invariance"] is False


def test_one_threshold_gives_one_snapshot(blob_run):
    out = blob_run[2]
    summary = json.loads((out / "base_summary.json").read_text())
    assert [s["threshold"] for s in summary["snapshots"]] == [0.5] and summary["unreached"] == []
    assert sorted(p.name for p in out.glob("base_acc*.grdn")) == ["base_acc0500.grdn"]


def test_no_thresholds_gives_final_only(tmp_path):
    cfg = _config(tmp_path, base={"thresholds": [], "max_epochs": 3})
    assert _run(tmp_path, "train-base", config=cfg) == 0
    out = tmp_path / "run"
    assert not list(out.glob("base_acc*.grdn"))
    _, _, header, _ = formats.load_network(out / "base_final.grdn")
    assert header["epoch"] == 3


def test_unreachable_threshold_warns(tmp_path, caplog):
    cfg = _config(tmp_path, base={"thresholds": [0.5, 1.01]})
    assert _run(tmp_path, "train-base", config=cfg) == 0
    summary = json.loads((tmp_path / "run" / "base_summary.json").read_text())
    assert summary["unreached"] == [1.01]
    assert "not reached" in caplog.text


def test_snapshot_accuracy_matches_reevaluation(blob_run):
    _, cfg_path, _, base = blob_run
    spec, params, header, _ = formats.load_network(base)
    cfg = load_config(cfg_path, env={})
    _, _, test = pipeline.halves(cfg)
    assert nn_core.accuracy(spec, params, test.inputs, test.labels) == header["test_accuracy"]
    assert header["config_hash"] == cfg.hash


def test_eval_base_accuracy_is_exact(blob_run):
    _, cfg_path, out, base = blob_run
    result = json.loads((out / "eval.json").read_text())
    spec, params, _, digest = formats.load_network(base)
    _, _, test = pipeline.halves(load_config(cfg_path, env={}))
    assert result["base_accuracy"] == nn_core.accuracy(spec, params, test.inputs, test.labels)
    assert result["gain"] == pipeline.relative_gain(result["base_accuracy"], result["gradnet_accuracy"])
    assert result["base_checkpoint_hash"] == digest


def test_reruns_are_byte_identical(blob_run, tmp_path):
    tmp, cfg, out, _ = blob_run
    assert _run(tmp, "train-base", config=cfg, out="again") == 0
    again = tmp / "again"
    base = str(again / "base_acc0500.grdn")
    assert _run(tmp, "train-gradnet", "--base", base, config=cfg, out="again") == 0
    for name in ("base_acc0500.grdn", "base_final.grdn", "base_trace.csv", "gradnet.grdn", "gradnet_trace.csv"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name
    assert (out / "gradnet_trace.csv").read_text().startswith("# config_hash=")


def test_mismatched_base_is_refused(blob_run, capsys):
    tmp, cfg, out, _ = blob_run
    assert _run(tmp, "eval", "--base", str(out / "base_final.grdn"), "--gradnet", str(out / "gradnet.grdn"),
                config=cfg) == 3
    assert "refusing" in capsys.readouterr().err


def test_features_file_route(blob_run):
    tmp, cfg, out, base = blob_run
    assert _run(tmp, "extract-grads", "--base", base, config=cfg) == 0
    feats = out / "features_gradnet.grdf"
    header, records = formats.read_features(feats)
    assert header["label_mode"] == "random" and len(records) == len(header["true_labels"])
    assert _run(tmp, "train-gradnet", "--base", base, "--features", str(feats), "--output",
                str(out / "from_file.grdn"), config=cfg) == 0
    assert _run(tmp, "eval", "--base", base, "--gradnet", str(out / "from_file.grdn"), "--output",
                str(out / "eval_file.json"), config=cfg) == 0
    assert _run(tmp, "train-gradnet", "--base", str(out / "base_final.grdn"), "--features", str(feats),
                config=cfg) == 3


def test_extract_all_labels(blob_run):
    tmp, cfg, out, base = blob_run
    path = out / "test_all.grdf"
    assert _run(tmp, "extract-grads", "--base", base, "--split", "test", "--label-mode", "all_labels",
                "--limit", "4", "--output", str(path), config=cfg) == 0
    _, records = formats.read_features(path)
    assert [(r.sample_id, r.hyp_label) for r in records] == [(i, c) for i in range(4) for c in range(3)]


def test_gradgraph_edge_counts(blob_run):
    tmp, cfg, out, base = blob_run
    result = pipeline.cmd_gradgraph(load_config(cfg, ["out_dir=" + str(out)], env={}), base)
    assert {k: v["retained"] for k, v in result["layer_pairs"].items()} == result["expected"]
    text = open(result["path"]).read()
    assert text.startswith("digraph") and "config_hash=" in text


def test_zero_epoch_rbm_runs(tmp_path):
    cfg = load_config(_config(tmp_path), ["rbm.epochs=0", f"out_dir={tmp_path / 'rbm'}"], env={})
    result = pipeline.cmd_rbm(cfg)
    assert 0.0 <= result["original"] <= 1.0 and 0.0 <= result["improved"] <= 1.0
    assert os.path.exists(tmp_path / "rbm" / "rbm_metrics.json")


def test_kernel_check_defaults_pass(tmp_path):
    cfg = load_config(None, [f"out_dir={tmp_path}"], env={})
    result = pipeline.cmd_kernel_check(cfg)
    assert all(result["pass"].values())
    assert result["identity_deviation"] == 0.0
