import json
import os

import numpy as np
import pytest

from dgcrn import metrics as MT
from dgcrn import model as M
from dgcrn import serialize as S
from dgcrn import training as TR
from dgcrn.cli import _setup_threads, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One tiny generated dataset and config shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    gen_cfg = root / "gen.yaml"
    gen_cfg.write_text("data:\n  n_nodes: 6\n  n_days: 3\n", encoding="utf-8")
    rc = main(["gen-data", "--config", str(gen_cfg), "--seed", "3",
               "--out", str(data_dir)])
    assert rc == 0
    train_cfg = root / "train.yaml"
    train_cfg.write_text(
        """
model:
  hidden: 4
  emb_dim: 3
  hyper_dim: 3
  hops: 1
  hyper_hops: 1
  input_len: 4
  output_len: 2
train:
  batch_size: 32
  max_epochs: 1
  step_size: 10
data:
  speeds: %s
  distances: %s
  split: ratio
  train: 0.5
  val: 0.25
  test: 0.25
eval:
  horizons: [1, 2]
"""
        % (data_dir / "speeds.bin", data_dir / "distances.csv"),
        encoding="utf-8",
    )
    return {"root": root, "data": data_dir, "cfg": str(train_cfg)}


def _train(workdir, out, *extra):
    return main(["train", "--config", workdir["cfg"], "--seed", "1",
                 "--out", str(out), "--quiet", *extra])


def _weights(path):
    params, _, _ = S.load_checkpoint(path)
    return M.named_parameters(params)


def _log_sans_seconds(path):
    return [r[:5] + r[6:] for r in TR.load_training_log(path)]


def test_setup_threads_defaults_and_respects_existing(monkeypatch):
    for var in ("DGCRN_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("OMP_NUM_THREADS", "7")
    assert _setup_threads() is None
    assert os.environ["OMP_NUM_THREADS"] == "7"  # explicit caps win
    assert os.environ["OPENBLAS_NUM_THREADS"] == "1"
    monkeypatch.setenv("DGCRN_THREADS", "0")
    assert "positive integer" in _setup_threads()
    monkeypatch.setenv("DGCRN_THREADS", "abc")
    assert "positive integer" in _setup_threads()


def test_help_lists_config_keys(capsys):
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for key in ("model.hidden", "train.learning_rate", "data.split",
                "eval.horizons", "w/o-dg"):
        assert key in out


def test_subcommand_help_lists_config_keys(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "model.hidden" in out
    assert "train.learning_rate" in out


def test_unknown_command_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_command_exits_1(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_gen_data_outputs_and_manifest(workdir):
    d = workdir["data"]
    assert (d / "speeds.bin").exists()
    assert (d / "distances.csv").exists()
    doc = json.loads((d / "gen-data.manifest.json").read_text())
    assert doc["command"] == "gen-data"
    assert doc["seed"] == 3
    assert doc["config"]["data"]["n_nodes"] == 6
    assert sorted(doc["outputs"]) == ["distances.csv", "speeds.bin"]
    assert doc["started"] <= doc["finished"]
    assert doc["version"]
    series = S.load_speed_bin(str(d / "speeds.bin"))
    assert series.n_nodes == 6
    assert series.n_steps == 3 * 288


def test_gen_data_deterministic(workdir, tmp_path):
    cfg = str(workdir["root"] / "gen.yaml")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", cfg, "--seed", "5", "--out", str(a)]) == 0
    assert main(["gen-data", "--config", cfg, "--seed", "5", "--out", str(b)]) == 0
    assert (a / "speeds.bin").read_bytes() == (b / "speeds.bin").read_bytes()
    assert (a / "distances.csv").read_bytes() == (b / "distances.csv").read_bytes()


def test_build_graph(workdir, tmp_path, capsys):
    src = str(workdir["data"] / "distances.csv")
    rc = main(["build-graph", src, "--out", str(tmp_path)])
    assert rc == 0
    assert "directed edges" in capsys.readouterr().out
    graph = S.load_graph_bin(str(tmp_path / "graph.bin"))
    assert graph.n_nodes == 6
    assert (tmp_path / "build-graph.manifest.json").exists()


def test_build_graph_missing_file(tmp_path, capsys):
    rc = main(["build-graph", str(tmp_path / "nope.csv"), "--out", str(tmp_path)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_build_graph_no_source(tmp_path, capsys):
    assert main(["build-graph", "--out", str(tmp_path)]) == 1
    assert "distance" in capsys.readouterr().err


def test_train_writes_artifacts(workdir, tmp_path):
    out = tmp_path / "run"
    assert _train(workdir, out) == 0
    assert (out / "checkpoint.ckpt").exists()
    rows = TR.load_training_log(str(out / "training_log.csv"))
    assert len(rows) == 1
    doc = json.loads((out / "train.manifest.json").read_text())
    assert doc["command"] == "train"
    assert doc["seed"] == 1
    params, stats, extra = S.load_checkpoint(str(out / "checkpoint.ckpt"))
    assert params.hp.hidden == 4
    assert extra["ablation"] == ""
    assert extra["epochs"] == 1
    assert stats.std > 0


def test_train_deterministic_modulo_clock(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(workdir, a) == 0
    assert _train(workdir, b) == 0
    assert (a / "checkpoint.ckpt").read_bytes() == (b / "checkpoint.ckpt").read_bytes()
    assert _log_sans_seconds(str(a / "training_log.csv")) == \
        _log_sans_seconds(str(b / "training_log.csv"))


def test_ablation_flag_equals_config_switch(workdir, tmp_path):
    flagged = tmp_path / "flagged"
    assert _train(workdir, flagged, "--ablation", "w/o-dg") == 0
    spelled_cfg = tmp_path / "spelled.yaml"
    base = open(workdir["cfg"], encoding="utf-8").read()
    spelled_cfg.write_text(base.replace("model:\n", "model:\n  beta_mix: 0.0\n"),
                           encoding="utf-8")
    spelled = tmp_path / "spelled"
    assert main(["train", "--config", str(spelled_cfg), "--seed", "1",
                 "--out", str(spelled), "--quiet"]) == 0
    left = _weights(str(flagged / "checkpoint.ckpt"))
    right = _weights(str(spelled / "checkpoint.ckpt"))
    assert [n for n, _ in left] == [n for n, _ in right]
    for (_, t1), (_, t2) in zip(left, right):
        assert np.array_equal(t1.data, t2.data)
    assert _log_sans_seconds(str(flagged / "training_log.csv")) == \
        _log_sans_seconds(str(spelled / "training_log.csv"))


def test_unknown_ablation_lists_names(workdir, tmp_path, capsys):
    rc = _train(workdir, tmp_path, "--ablation", "w/o-everything")
    assert rc == 1
    assert "w/o-dg" in capsys.readouterr().err


def test_train_precision_64(workdir, tmp_path):
    out = tmp_path / "r64"
    assert _train(workdir, out, "--precision", "64") == 0
    params, _, _ = S.load_checkpoint(str(out / "checkpoint.ckpt"))
    assert params.readout[0].data.dtype == np.float64


def test_bad_config_key(workdir, tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model:\n  hiden: 4\n", encoding="utf-8")
    rc = main(["train", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 1
    assert "hiden" in capsys.readouterr().err


def test_eval_roundtrip(workdir, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(workdir, run) == 0
    out = tmp_path / "ev"
    rc = main(["eval", str(run / "checkpoint.ckpt"), "--config", workdir["cfg"],
               "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "model" in text and "horizon" in text
    assert "overall" in text
    rows = MT.load_report_csv(str(out / "report.csv"))
    assert [r[1] for r in rows] == [1, 2]
    assert all(r[0] == "DGCRN" for r in rows)
    assert (out / "eval.manifest.json").exists()

    only1 = tmp_path / "ev1"
    rc = main(["eval", str(run / "checkpoint.ckpt"), "--config", workdir["cfg"],
               "--out", str(only1), "--horizons", "1"])
    assert rc == 0
    capsys.readouterr()
    assert [r[1] for r in MT.load_report_csv(str(only1 / "report.csv"))] == [1]


def test_eval_names_model_after_ablation(workdir, tmp_path, capsys):
    run = tmp_path / "ab"
    assert _train(workdir, run, "--ablation", "w/o-cl") == 0
    rc = main(["eval", str(run / "checkpoint.ckpt"), "--config", workdir["cfg"],
               "--out", str(tmp_path / "ev")])
    assert rc == 0
    capsys.readouterr()
    rows = MT.load_report_csv(str(tmp_path / "ev" / "report.csv"))
    assert all(r[0] == "w/o-cl" for r in rows)


def test_eval_bad_horizons(workdir, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(workdir, run) == 0
    ckpt = str(run / "checkpoint.ckpt")
    assert main(["eval", ckpt, "--config", workdir["cfg"],
                 "--out", str(tmp_path), "--horizons", "99"]) == 1
    assert "horizon" in capsys.readouterr().err
    assert main(["eval", ckpt, "--config", workdir["cfg"],
                 "--out", str(tmp_path), "--horizons", "a,b"]) == 1


def test_eval_missing_checkpoint(workdir, tmp_path, capsys):
    rc = main(["eval", str(tmp_path / "nope.ckpt"), "--config", workdir["cfg"],
               "--out", str(tmp_path)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    assert "max relative gradient error" in capsys.readouterr().out


def test_bench_reports_three_models(workdir, tmp_path, capsys):
    out = tmp_path / "bench"
    rc = main(["bench", "--config", workdir["cfg"], "--seed", "1",
               "--out", str(out), "--quiet"])
    assert rc == 0
    assert "persistence" in capsys.readouterr().out
    rows = MT.load_report_csv(str(out / "report.csv"))
    assert {r[0] for r in rows} == {"DGCRN", "HA", "persistence"}
    assert (out / "bench.manifest.json").exists()
    assert (out / "checkpoint.ckpt").exists()
    assert (out / "training_log.csv").exists()


def test_analyze(workdir, tmp_path, capsys):
    out = tmp_path / "an"
    rc = main(["analyze", "--config", workdir["cfg"], "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "speed histogram" in text
    assert "adjacent pairs" in text
    lines = (out / "analysis.csv").read_text().splitlines()
    assert lines[0] == "kind,bin_lo,bin_hi,count"
    kinds = {line.split(",")[0] for line in lines[1:]}
    assert kinds == {"speed", "correlation"}
