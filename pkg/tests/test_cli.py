import json

import numpy as np
import pytest

from fscil_forge.cli import ABLATION_ROWS, main
from fscil_forge.encoders import EmbeddingMatrix, write_embeddings

FAST = ["--base-epochs", "1", "--inc-epochs", "1", "--set", "dim=8", "--set", "point_dim=8", "--set", "n_aug=1",
        "--set", "resolution=16"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    assert main(["gen-synthetic-data", "--out", str(out), "--n-base", "3", "--n-inc", "2", "--per-session", "1",
                 "--train", "3", "--test", "3", "--points", "64"]) == 0
    return out


def test_gen_benchmark_s2s(tmp_path, capsys):
    out = tmp_path / "s2s.json"
    assert main(["gen-benchmark", "--task", "s2s", "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "7 sessions: 55,4,4,4,4,4,4"
    first = out.read_bytes()
    assert main(["gen-benchmark", "--task", "s2s", "--out", str(out)]) == 0
    assert out.read_bytes() == first
    capsys.readouterr()
    assert main(["gen-benchmark", "--task", "s2r"]) == 0
    assert capsys.readouterr().out.strip() == "12 sessions: 55,4,4,4,4,4,4,4,4,4,4,1"


def test_gen_benchmark_bad_path(tmp_path, capsys):
    assert main(["gen-benchmark", "--base", str(tmp_path / "nope.json"), "--inc", str(tmp_path / "x.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_gen_synthetic_schedule(data_dir):
    doc = json.loads((data_dir / "schedule.json").read_text())
    assert [len(s["classes"]) for s in doc["sessions"]] == [3, 1, 1]


def test_fit_basis_from_embeddings(tmp_path, capsys):
    rows = np.outer(np.arange(1.0, 6.0), np.eye(8)[0])
    write_embeddings(tmp_path / "r1.emb", EmbeddingMatrix(rows, [f"k{i}" for i in range(5)]))
    assert main(["fit-basis", "--emb", str(tmp_path / "r1.emb.json"), "--out", str(tmp_path / "b.pcv1")]) == 0
    assert capsys.readouterr().out.startswith("M=1 of C=8")
    full = np.random.default_rng(0).normal(size=(10, 8))
    write_embeddings(tmp_path / "f.emb", EmbeddingMatrix(full, [f"k{i}" for i in range(10)]))
    args = ["fit-basis", "--emb", str(tmp_path / "f.emb"), "--energy", "1.0", "--out", str(tmp_path / "c.pcv1")]
    assert main(args) == 0
    assert capsys.readouterr().out.startswith("M=8 of C=8")
    first = (tmp_path / "c.pcv1").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "c.pcv1").read_bytes() == first


def test_embed_kinds(data_dir, tmp_path):
    sched = str(data_dir / "schedule.json")
    assert main(["embed", "--kind", "text", "--schedule", sched, "--out", str(tmp_path / "t.emb"), *FAST]) == 0
    assert len(json.loads((tmp_path / "t.emb.json").read_text())["keys"]) == 5
    assert main(["embed", "--kind", "depth", "--schedule", sched, "--out", str(tmp_path / "d.emb"), *FAST]) == 0
    keys = json.loads((tmp_path / "d.emb.json").read_text())["keys"]
    assert len(keys) == 3 * 3 * 6 and keys[0].endswith("#view0")
    assert main(["embed", "--kind", "points", "--schedule", sched, "--out", str(tmp_path / "p.emb"), *FAST]) == 0
    assert main(["embed", "--kind", "depth", "--out", str(tmp_path / "x.emb")]) == 2


def test_train_eval_report(data_dir, tmp_path, capsys):
    sched = str(data_dir / "schedule.json")
    run = tmp_path / "run"
    assert main(["train", "--schedule", sched, "--run-dir", str(run), *FAST]) == 0
    for name in ("config.json", "schedule.json", "basis.pcv1", "memory.json", "history.json", "predictions.csv",
                 "report.json", "report.txt"):
        assert (run / name).exists(), name
    assert len(list((run / "checkpoints").glob("session_*.ckpt"))) == 3
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["dim"] == 8 and cfg["base_epochs"] == 1

    run2 = tmp_path / "run2"
    assert main(["train", "--schedule", sched, "--run-dir", str(run2), *FAST]) == 0
    assert (run / "report.json").read_bytes() == (run2 / "report.json").read_bytes()

    assert main(["eval", "--run-dir", str(run)]) == 0
    assert (run / "predictions_eval.csv").read_text() == (run / "predictions.csv").read_text()

    before = (run / "report.json").read_bytes()
    assert main(["report", "--run-dir", str(run)]) == 0
    assert (run / "report.json").read_bytes() == before
    out = tmp_path / "rep"
    assert main(["report", "--predictions", str(run / "predictions.csv"), "--schedule", sched,
                 "--out-dir", str(out)]) == 0
    assert json.loads((out / "report.json").read_text())["acc"] == json.loads(before)["acc"]


def test_fit_basis_from_schedule_matches_training(data_dir, tmp_path):
    sched = str(data_dir / "schedule.json")
    run = tmp_path / "run"
    assert main(["train", "--schedule", sched, "--run-dir", str(run), "--sessions", "1", *FAST]) == 0
    assert main(["fit-basis", "--schedule", sched, "--out", str(tmp_path / "b.pcv1"), *FAST]) == 0
    assert (tmp_path / "b.pcv1").read_bytes() == (run / "basis.pcv1").read_bytes()


def test_all_off_run_has_no_basis(data_dir, tmp_path):
    run = tmp_path / "off"
    args = ["train", "--schedule", str(data_dir / "schedule.json"), "--run-dir", str(run),
            "--rfe", "off", "--snc", "off", "--cl", "off", *FAST]
    assert main(args) == 0
    assert not (run / "basis.pcv1").exists()
    cfg = json.loads((run / "config.json").read_text())
    assert not (cfg["rfe_enabled"] or cfg["snc_enabled"] or cfg["cl_enabled"])


def test_usage_and_runtime_errors(data_dir, tmp_path):
    sched = str(data_dir / "schedule.json")
    assert main(["train", "--schedule", sched, "--run-dir", str(tmp_path / "r"), "--set", "bogus=1"]) == 2
    assert main(["train", "--schedule", sched, "--run-dir", str(tmp_path / "r"), "--set", "lr=-1"]) == 2
    assert main(["eval", "--run-dir", str(tmp_path / "empty")]) == 2
    # asking for more sessions than the schedule has is a protocol error
    assert main(["train", "--schedule", sched, "--run-dir", str(tmp_path / "r"), "--sessions", "5", *FAST]) == 1


def test_ablate_grid_shape(data_dir, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--schedule", str(data_dir / "schedule.json"), "--seeds", "0", "--out-dir", str(out),
                 *FAST]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 2 * len(ABLATION_ROWS)
    assert lines[0].split()[:3] == ["RFE", "SNC", "CL"]
    doc = json.loads((out / "ablation.json").read_text())
    assert [(d["rfe"], d["snc"], d["cl"]) for d in doc] == ABLATION_ROWS
