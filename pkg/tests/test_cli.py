"""Command-line interface tests, run through real subprocesses."""

import json
import subprocess
import sys

import pytest

TINY_MODEL = {"n": 2, "c": 3, "dim": 8, "ffn_dim": 16, "heads": 2,
              "attention_dim": 8, "head_hidden": 8, "dropout": 0.0,
              "lr": 1e-3, "batch_size": 4, "epochs": 2}
TINY_GEN = {"notes": 24, "pb_rate": 0.5, "tb_rate": 0.5, "joint_rate": 0.25,
            "mean_note_len": 2.0, "mean_sentence_len": 3.0}


def run_cli(*argv, expect=0):
    proc = subprocess.run([sys.executable, "-m", "temf.cli", *map(str, argv)],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == expect, (
        f"exit {proc.returncode} != {expect}\nstdout:\n{proc.stdout}\n"
        f"stderr:\n{proc.stderr}")
    return proc


def write_config(tmp_path, name="config.json", **entries):
    path = tmp_path / name
    path.write_text(json.dumps(entries))
    return path


@pytest.fixture()
def tiny_corpus_file(tmp_path):
    config = write_config(tmp_path, name="gen.json", **TINY_GEN)
    path = tmp_path / "corpus.jsonl"
    run_cli("gen-corpus", "--config", config, "--out", path, "--seed", 5)
    return path


# ---------------------------------------------------------------------------
# gen-corpus


def test_gen_corpus_default_has_364_notes(tmp_path):
    path = tmp_path / "default.jsonl"
    proc = run_cli("gen-corpus", "--out", path)
    assert "wrote 364 notes" in proc.stdout
    assert "config:" in proc.stdout and '"note_count": 364' in proc.stdout
    assert len(path.read_text().splitlines()) == 364


def test_gen_corpus_seed_reproducible_bytes(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run_cli("gen-corpus", "--out", a, "--seed", 7, "--notes", 30)
    run_cli("gen-corpus", "--out", b, "--seed", 7, "--notes", 30)
    assert a.read_bytes() == b.read_bytes()


def test_gen_corpus_zero_notes_is_usage_error(tmp_path):
    path = tmp_path / "never.jsonl"
    proc = run_cli("gen-corpus", "--out", path, "--notes", 0, expect=1)
    assert "note_count" in proc.stderr
    assert not path.exists()


def test_gen_corpus_requires_out(tmp_path):
    proc = run_cli("gen-corpus", "--notes", 5, expect=1)
    assert "--out" in proc.stderr


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_loss_log(tmp_path, tiny_corpus_file):
    config = write_config(tmp_path, **TINY_MODEL)
    ckpt = tmp_path / "model.ckpt"
    proc = run_cli("train", "--config", config, "--corpus", tiny_corpus_file,
                   "--checkpoint", ckpt, "--seed", 1)
    lines = [line for line in proc.stdout.splitlines() if line.startswith("epoch")]
    assert len(lines) == TINY_MODEL["epochs"]
    assert all("L_pb=" in line and "L_diff=" in line for line in lines)
    first = float(lines[0].rsplit("total=", 1)[1])
    last = float(lines[-1].rsplit("total=", 1)[1])
    assert last < first
    assert ckpt.exists()


def test_train_missing_corpus_is_usage_error(tmp_path):
    proc = run_cli("train", "--corpus", tmp_path / "nope.jsonl",
                   "--checkpoint", tmp_path / "x.ckpt", expect=1)
    assert "not found" in proc.stderr


def test_train_records_ablation_in_checkpoint(tmp_path, tiny_corpus_file):
    config = write_config(tmp_path, **TINY_MODEL)
    ckpt = tmp_path / "ablated.ckpt"
    run_cli("train", "--config", config, "--corpus", tiny_corpus_file,
            "--checkpoint", ckpt, "--ablation", "no_emotion")
    payload = json.loads(ckpt.read_text())
    assert payload["format"] == "TEMF-CKPT-1"
    assert payload["config"]["ablation"] == "no_emotion"


def test_unknown_config_key_rejected(tmp_path, tiny_corpus_file):
    config = write_config(tmp_path, epochz=3)
    proc = run_cli("train", "--config", config, "--corpus", tiny_corpus_file,
                   "--checkpoint", tmp_path / "x.ckpt", expect=1)
    assert "epochz" in proc.stderr


# ---------------------------------------------------------------------------
# eval


def test_eval_cv_smoke_writes_results(tmp_path, tiny_corpus_file):
    config = write_config(tmp_path, **TINY_MODEL)
    results = tmp_path / "results.csv"
    proc = run_cli("eval", "--config", config, "--corpus", tiny_corpus_file,
                   "--cv", 2, "--runs", 1, "--results", results, "--jobs", 1)
    assert "macro-F1" in proc.stdout
    lines = results.read_text().splitlines()
    assert lines[0] == "run,fold,task,f1"
    data_rows = [line for line in lines if line and not line.startswith("#")]
    assert len(data_rows) == 1 + 4  # header + 2 folds x 2 tasks
    assert any(line.startswith("# summary") for line in lines)
    assert any(line.startswith("# config") for line in lines)


def test_eval_sweep_reports_each_length(tmp_path, tiny_corpus_file):
    config = write_config(tmp_path, **TINY_MODEL)
    results = tmp_path / "sweep.csv"
    proc = run_cli("eval", "--config", config, "--corpus", tiny_corpus_file,
                   "--cv", 2, "--runs", 1, "--sweep", "1,2",
                   "--results", results)
    assert "n=1" in proc.stdout and "n=2" in proc.stdout
    lines = results.read_text().splitlines()
    assert lines[0] == "length,run,fold,task,f1"


def test_eval_single_checkpoint_mode(tmp_path, tiny_corpus_file):
    config = write_config(tmp_path, **TINY_MODEL)
    ckpt = tmp_path / "model.ckpt"
    run_cli("train", "--config", config, "--corpus", tiny_corpus_file,
            "--checkpoint", ckpt, "--epochs", 1)
    proc = run_cli("eval", "--corpus", tiny_corpus_file, "--checkpoint", ckpt,
                   "--results", tmp_path / "single.csv")
    assert "pb macro-F1" in proc.stdout and "tb macro-F1" in proc.stdout


def test_eval_missing_corpus_is_usage_error(tmp_path):
    proc = run_cli("eval", "--corpus", tmp_path / "nope.jsonl", expect=1)
    assert "not found" in proc.stderr


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes_and_reports_per_op(tmp_path):
    proc = run_cli("gradcheck")
    assert "op.matmul" in proc.stdout
    assert "model.end_to_end" in proc.stdout
    assert "FAIL" not in proc.stdout
    assert "28/28" in proc.stdout


# ---------------------------------------------------------------------------
# kappa


def test_kappa_unanimous_fixture(tmp_path):
    path = tmp_path / "unanimous.csv"
    path.write_text("r=3\n3,0\n0,3\n3,0\n")
    proc = run_cli("kappa", path)
    assert proc.stdout.strip() == "1.0000"


def test_kappa_hand_fixture(tmp_path):
    path = tmp_path / "hand.csv"
    path.write_text("r=3\n2,1\n1,2\n")
    proc = run_cli("kappa", path)
    assert proc.stdout.strip() == "-0.3333"


def test_kappa_degenerate_fixture(tmp_path):
    path = tmp_path / "degenerate.csv"
    path.write_text("r=3\n3,0\n3,0\n")
    proc = run_cli("kappa", path)
    assert proc.stdout.strip() == "undefined (Pe=1)"


def test_kappa_malformed_matrix_reports_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("r=3\n2,nope\n")
    proc = run_cli("kappa", path, expect=1)
    assert ":2" in proc.stderr
