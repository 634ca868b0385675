import csv
import io
import subprocess
import sys

import pytest

from locas.cli import run

TINY = ["--L", "1", "--d", "16", "--m", "32", "--heads", "2", "--max_seq", "64"]
CORPUS = ["--n_docs", "1", "--doc_len", "12000", "--n_entities", "4"]
EVAL = ["--chunk_size", "16", "--window", "32", "--r", "4"]


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert run(["train-backbone", "--out", str(out), "--steps", "3", "--seq_len", "32", "--ffn_kind", "glu",
                *TINY, *CORPUS]) == 0
    return out / "backbone.loca"


def data_columns(text):
    return [row[1:] for row in csv.reader(io.StringIO(text))]


def test_param_count_prints_exact_values(capsys):
    assert run(["param-count", "--L", "28", "--d", "2048", "--r", "64", "--method", "locas-glu"]) == 0
    assert capsys.readouterr().out.strip() == "11010048"
    assert run(["param-count", "--L", "28", "--d", "2048", "--m", "6144", "--r", "64",
                "--method", "lowrank-baseline"]) == 0
    assert capsys.readouterr().out.strip() == "73400320"


def test_usage_errors_exit_2(capsys, tmp_path):
    assert run(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err
    assert run(["param-count", "--bogus", "1"]) == 2
    assert run(["param-count", "--r", "many"]) == 2
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[harness]\nwidth = 3\n")
    assert run(["param-count", "--config", str(cfg)]) == 2
    assert "width" in capsys.readouterr().err
    cfg.write_text("[tokenizer]\nx = 1\n")
    assert run(["param-count", "--config", str(cfg)]) == 2


def test_runtime_errors_exit_1_with_category(capsys, checkpoint, tmp_path):
    code = run(["eval", "--checkpoint", str(checkpoint), "--out", str(tmp_path), "--method", "locas-glu",
                "--r", "999", "--chunk_size", "16", "--window", "32", *CORPUS])
    assert code == 1
    assert "CapacityError" in capsys.readouterr().err
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.loca"), "--out", str(tmp_path)]) == 1


def test_gen_corpus_and_snapshot_rerun(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-corpus", "--out", str(a), "--seed", "5", *CORPUS, "--deterministic"]) == 0
    assert (a / "doc_000.txt").stat().st_size == 12000
    assert run(["gen-corpus", "--out", str(b), "--config", str(a / "config.ini"), "--deterministic"]) == 0
    assert (a / "doc_000.txt").read_bytes() == (b / "doc_000.txt").read_bytes()
    assert (a / "config.ini").read_bytes() == (b / "config.ini").read_bytes()


def test_config_file_values_and_flag_priority(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[backbone]\nL = 28\nd = 2048\n[harness]\nr = 64\nmethod = locas-glu\n")
    assert run(["param-count", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.strip() == "11010048"
    assert run(["param-count", "--config", str(cfg), "--r", "32"]) == 0
    assert capsys.readouterr().out.strip() == "5505024"


def test_eval_lr_zero_matches_truncation(checkpoint, tmp_path):
    t, z = tmp_path / "t", tmp_path / "z"
    assert run(["eval", "--checkpoint", str(checkpoint), "--out", str(t), "--method", "trunc", *EVAL, *CORPUS]) == 0
    assert run(["eval", "--checkpoint", str(checkpoint), "--out", str(z), "--method", "locas-glu", "--lr", "0",
                *EVAL, *CORPUS]) == 0
    trunc, zero = (t / "eval.csv").read_text(), (z / "eval.csv").read_text()
    assert data_columns(trunc) == data_columns(zero)
    assert zero.splitlines()[1].startswith("locas-glu:topk,")


def test_deterministic_runs_are_byte_identical(checkpoint, tmp_path):
    outs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert run(["memorize", "--checkpoint", str(checkpoint), "--out", str(out), "--method", "locas-glu",
                    "--strategy", "random-selection", "--seed", "9", "--deterministic", *EVAL, *CORPUS]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"config.ini", "memorize.csv", "memory_000.loca"}


def test_non_deterministic_run_writes_timing(checkpoint, tmp_path):
    assert run(["eval", "--checkpoint", str(checkpoint), "--out", str(tmp_path), *EVAL, *CORPUS]) == 0
    assert (tmp_path / "timing.json").exists()


def test_ablate_and_sweep(checkpoint, tmp_path, capsys):
    assert run(["ablate-init", "--checkpoint", str(checkpoint), "--out", str(tmp_path), "--strategies",
                "topk,gaussian", *EVAL, *CORPUS]) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == "doc_id,strategy,lr,final_quarter_nll" and len(lines) == 3
    assert run(["sweep-width", "--checkpoint", str(checkpoint), "--out", str(tmp_path), "--r_values", "2,4",
                *EVAL, *CORPUS]) == 0
    assert (tmp_path / "width.csv").read_text().count("\n") == 3


def test_compress_subcommand(tmp_path, capsys):
    ck = tmp_path / "mlp"
    assert run(["train-backbone", "--out", str(ck), "--steps", "2", "--seq_len", "32", "--ffn_kind", "mlp",
                *TINY, *CORPUS]) == 0
    out = tmp_path / "c"
    assert run(["compress", "--checkpoint", str(ck / "backbone.loca"), "--out", str(out), "--n_tokens", "40",
                "--n_capacity", "8", "--n_target", "4", "--context", "16", *CORPUS]) == 0
    assert "5 compressions" in capsys.readouterr().out
    assert len((out / "compression.jsonl").read_text().splitlines()) == 5
    assert (out / "memory.loca").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "locas", "param-count", "--L", "28", "--d", "2048", "--r", "64",
                           "--method", "locas-glu"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "11010048"


def test_corpus_follows_run_seed_unless_pinned(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run(["gen-corpus", "--out", str(a), "--seed", "5", *CORPUS]) == 0
    assert run(["gen-corpus", "--out", str(b), "--seed", "6", *CORPUS]) == 0
    assert run(["gen-corpus", "--out", str(c), "--seed", "6", "--corpus_seed", "5", *CORPUS]) == 0
    doc = lambda d: (d / "doc_000.txt").read_bytes()
    assert doc(a) != doc(b)
    assert doc(a) == doc(c)
    assert "corpus_seed = 5" in (a / "config.ini").read_text()
