import json
import subprocess
import sys

import numpy as np
import pytest

from ikqe.cli import RunConfig, build_parser, main, resolve_config
from ikqe.evaluation import load_predictions
from ikqe.graph import save_graph
from ikqe.query import read_queries
from ikqe.synthetic import typed_cluster_graph


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_graph(typed_cluster_graph(120)[0], d / "g.tsv")
    assert main(["split", "--input", str(d / "g.tsv"), "--ratio", "0.5", "--out", str(d / "sp")]) == 0
    assert main(["sample-queries", "--split", str(d / "sp"), "--count", "6", "--out", str(d / "train.jsonl")]) == 0
    assert main(["sample-queries", "--split", str(d / "sp"), "--which", "test", "--count", "4",
                 "--out", str(d / "test.jsonl")]) == 0
    return d


def _run(*argv):
    return main([str(a) for a in argv])


def test_traversal_is_perfect_on_training_queries(workdir, tmp_path):
    assert _run("answer", "--split", workdir / "sp", "--which", "train", "--queries", workdir / "train.jsonl",
                "--engine", "traversal", "--out", tmp_path / "p.bin") == 0
    assert _run("evaluate", "--predictions", tmp_path / "p.bin", "--queries", workdir / "train.jsonl",
                "--mode", "faithfulness", "--out", tmp_path / "rep") == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert all(row["hits@10"] == 1.0 for row in rep["per_type"].values())
    assert (tmp_path / "rep.csv").exists()


def test_split_outputs_and_manifest(workdir):
    sp = workdir / "sp"
    for name in ("train.tsv", "val_inference.tsv", "test_inference.tsv", "val_pred.tsv", "test_pred.tsv",
                 "partition.tsv", "split.meta", "resolved_config.ini", "manifest.json"):
        assert (sp / name).exists(), name
    manifest = json.loads((sp / "manifest.json").read_text())
    assert manifest["command"] == "split"
    assert set(manifest["outputs"]) >= {"train.tsv", "test_pred.tsv"}
    assert all(len(h) == 64 for h in manifest["outputs"].values())
    assert _run("verify", "--split", sp) == 0


def test_sampling_is_deterministic(workdir, tmp_path):
    for name in ("a", "b"):
        assert _run("sample-queries", "--split", workdir / "sp", "--count", "6", "--out", tmp_path / f"{name}.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() == (workdir / "train.jsonl").read_bytes()


def test_answers_identical_across_worker_counts(workdir, tmp_path):
    for w in (1, 3):
        assert _run("answer", "--split", workdir / "sp", "--queries", workdir / "test.jsonl", "--engine", "heuristic",
                    "--workers", w, "--out", tmp_path / f"h{w}.bin") == 0
    assert (tmp_path / "h1.bin").read_bytes() == (tmp_path / "h3.bin").read_bytes()


def test_test_queries_have_hard_answers(workdir):
    qs = read_queries(workdir / "test.jsonl")
    assert qs and all(q.hard for q in qs)


def test_recompute_report(workdir, tmp_path):
    out = tmp_path / "q.jsonl"
    assert _run("sample-queries", "--split", workdir / "sp", "--counts", "1p=5,2p=5", "--recompute-on", "test",
                "--out", out) == 0
    rep = json.loads((tmp_path / "q.jsonl.recompute_report.json").read_text())
    assert set(rep["by_type"]) == {"1p", "2p"}
    assert 0.0 <= rep["fraction"] <= 1.0


def test_nodepiece_rejects_negation_with_exit_3(workdir, tmp_path):
    assert _run("train-lp", "--split", workdir / "sp", "--out", tmp_path / "lp", "--epochs", 2, "--dim", 8,
                "--k", 4) == 0
    ckpt = tmp_path / "lp" / "encoder.ckpt"
    base = ["answer", "--split", workdir / "sp", "--queries", workdir / "test.jsonl", "--engine", "nodepiece",
            "--checkpoint", ckpt]
    assert _run(*base, "--out", tmp_path / "p.bin") == 3
    assert _run(*base, "--types", "1p,2p,2i,up", "--top-n", 5, "--out", tmp_path / "p.bin") == 0
    rows, index = load_predictions(tmp_path / "p.bin")
    assert len(rows) == len(index) > 0
    assert all(np.isfinite(r).sum() <= 5 for r in rows)


def test_gnnqe_train_and_answer(workdir, tmp_path):
    assert _run("train-gnnqe", "--split", workdir / "sp", "--queries", workdir / "train.jsonl", "--out",
                tmp_path / "gq", "--iterations", 2, "--gnn-batch-size", 2, "--gnn-dim", 4, "--gnn-layers", 1) == 0
    assert _run("answer", "--split", workdir / "sp", "--queries", workdir / "test.jsonl", "--engine", "gnnqe",
                "--checkpoint", tmp_path / "gq" / "gnnqe.ckpt", "--out", tmp_path / "g.bin") == 0
    rows, _ = load_predictions(tmp_path / "g.bin")
    finite = np.concatenate([r[np.isfinite(r)] for r in rows])
    assert (finite >= 0).all() and (finite <= 1).all()


@pytest.mark.parametrize("argv", [
    ["verify", "--split", "/nonexistent"],
    ["answer", "--split", "{sp}", "--queries", "/missing.jsonl", "--engine", "traversal", "--out", "{tmp}/x"],
    ["answer", "--split", "{sp}", "--queries", "{q}", "--engine", "gnnqe", "--out", "{tmp}/x"],
    ["sample-queries", "--split", "{sp}", "--counts", "9z=3", "--out", "{tmp}/x"],
    ["answer", "--split", "{sp}", "--queries", "{q}", "--types", "1p,zz", "--engine", "traversal", "--out", "{tmp}/x"],
])
def test_usage_errors_exit_2(argv, workdir, tmp_path, capsys):
    fill = {"sp": workdir / "sp", "q": workdir / "test.jsonl", "tmp": tmp_path}
    assert main([a.format(**fill) for a in argv]) == 2
    assert "error" in capsys.readouterr().err


def test_verify_reports_violations(workdir, tmp_path):
    import shutil

    sp = tmp_path / "sp"
    shutil.copytree(workdir / "sp", sp)
    # leak a held-out edge back into the training graph
    pred = (sp / "test_pred.tsv").read_text().splitlines()[0]
    with open(sp / "train.tsv", "a") as f:
        f.write(pred + "\n")
    assert _run("verify", "--split", sp) == 1


def test_unknown_config_key_exit_2(workdir, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nseed = 3\nspeed = 9\n")
    assert _run("verify", "--split", workdir / "sp", "--config", cfg) == 2


def test_precedence_defaults_config_env_flags(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nseed = 3\nworkers = 2\n[decoder]\nbeam_size = 7\n")
    parser = build_parser()
    args = parser.parse_args(["verify", "--split", "x", "--config", str(cfg)])
    c = resolve_config(args, {})
    assert (c.get("run", "seed"), c.get("run", "workers"), c.get("decoder", "beam_size")) == (3, 2, 7)
    c = resolve_config(args, {"IKQE_SEED": "11", "IKQE_WORKERS": "4"})
    assert (c.get("run", "seed"), c.get("run", "workers")) == (11, 4)
    args = parser.parse_args(["verify", "--split", "x", "--config", str(cfg), "--seed", "5"])
    c = resolve_config(args, {"IKQE_SEED": "11"})
    assert c.get("run", "seed") == 5
    assert RunConfig().get("run", "seed") == 0


def test_env_seed_changes_split(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("IKQE_SEED", "9")
    assert _run("split", "--input", workdir / "g.tsv", "--out", tmp_path / "sp") == 0
    assert "seed = 9" in (tmp_path / "sp" / "resolved_config.ini").read_text()
    assert (tmp_path / "sp" / "partition.tsv").read_bytes() != (workdir / "sp" / "partition.tsv").read_bytes()


def test_resolved_config_round_trips(workdir, tmp_path):
    cfg = workdir / "sp" / "resolved_config.ini"
    c = RunConfig().load(cfg)
    assert c.get("split", "ratio") == 0.5 and c.get("split", "inverse") is True


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "ikqe", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("split", "sample-queries", "train-lp", "train-gnnqe", "answer", "evaluate", "verify"):
        assert cmd in out.stdout
