import subprocess
import sys

import pytest

from opamp import cli
from opamp.checkpoint import load_checkpoint
from opamp.experiment import read_csv
from opamp.task import read_dataset
from opamp.train import InvariantError


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.mark.parametrize(
    "resistors, expected",
    [
        ((1, 2, 1, 3), ["A_d=2.125", "A_c=0.25", "K=8.5"]),
        ((1000, 10000, 1000, 10000), ["A_d=10", "A_c=0", "K=inf"]),
        ((1, 1, 1, 2), ["A_d=1.16667", "A_c=0.333333", "K=3.5"]),
    ],
)
def test_circuit(capsys, resistors, expected):
    assert run("circuit", *resistors) == 0
    assert capsys.readouterr().out.split() == expected


def test_circuit_rejects_nonpositive(capsys):
    assert run("circuit", 1, -2, 1, 3) == 1
    assert "positive" in capsys.readouterr().err


def test_module_entry_point_exit_codes():
    ok = subprocess.run([sys.executable, "-m", "opamp", "circuit", "1", "2", "1", "3"], capture_output=True, text=True)
    assert ok.returncode == 0 and "K=8.5" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "opamp", "circuit", "1", "-2", "1", "3"], capture_output=True, text=True)
    assert bad.returncode == 1


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["circuit", "1", "2"], ["eval"], ["--precision", "f16", "circuit", "1", "1", "1", "1"]])
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 1


def test_gen_data(tmp_path):
    path = tmp_path / "d.jsonl"
    assert run("--seed", 4, "gen-data", "--noise-ratio", 0.8, "--count", 12, "--golden-index", 2, "--output", path) == 0
    exs = read_dataset(path)
    assert len(exs) == 12 and all(len(e.documents) == 5 and e.golden_index == 2 for e in exs)


def test_config_errors_exit_2(tmp_path, tiny_config):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seeds": [1, 1]}')
    assert run("run", "--config", bad) == 2
    assert run("eval", tmp_path / "missing.ckpt") == 2
    assert run("sweep-cmrr", "--config", tiny_config(), "--base", tmp_path / "missing.ckpt") == 2
    assert run("gen-data", "--noise-ratio", 1.5, "--out-dir", tmp_path) == 2


def test_single_model_workflow(tmp_path, tiny_config, capsys):
    cfg = tiny_config()
    out = tmp_path / "wf"
    assert run("pretrain", "--config", cfg, "--out-dir", out) == 0
    assert load_checkpoint(out / "base.ckpt").config.attention_kind == "standard"
    assert run("finetune", "--config", cfg, "--out-dir", out, "--cmrr", 5, "--noise-ratio", 0.5) == 0
    tuned = load_checkpoint(out / "finetuned.ckpt")
    assert tuned.gains().cmrr == 5
    capsys.readouterr()
    assert run("eval", out / "finetuned.ckpt", "--config", cfg, "--noise-ratio", 0.5, "--count", 5, "--multiple-choice") == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("EM=") and "Acc=" in line
    assert run("trace", out / "finetuned.ckpt", "--config", cfg, "--out-dir", out, "--noise-ratio", 0.5, "--index", 3) == 0
    rows = read_csv(out / "trace_3.csv")
    assert len(rows) == 2 and abs(sum(float(r["score"]) for r in rows) - 1) <= 1e-5
    assert sum(int(r["golden"]) for r in rows) == 1


def test_precision_flag(tmp_path, tiny_config):
    assert run("--precision", "f64", "pretrain", "--config", tiny_config(), "--out-dir", tmp_path, "--steps", 2) == 0
    assert load_checkpoint(tmp_path / "base.ckpt").tok_emb.data.dtype.name == "float64"


def test_sweeps(tmp_path, tiny_config, capsys):
    cfg = tiny_config()
    assert run("sweep-cmrr", "--config", cfg, "--out-dir", tmp_path / "c", "--cmrr", "1,5", "--noise-ratio", 0.5, "--seed", 3) == 0
    rows = read_csv(tmp_path / "c" / "metrics.csv")
    assert {r["K"] for r in rows} == {"", "1", "5"} and {r["seed"] for r in rows} == {"3", "mean", "std"}
    assert "K=5" in capsys.readouterr().out
    base = tmp_path / "c" / "base.ckpt"
    assert run("sweep-noise", "--config", cfg, "--out-dir", tmp_path / "n", "--noise-ratios", "0.0,0.5",
               "--seeds", "0", "--base", base) == 0
    rows = read_csv(tmp_path / "n" / "metrics.csv")
    assert {r["noise_ratio"] for r in rows} == {"0", "0.5"} and {r["K"] for r in rows} == {"", "10"}
    assert not (tmp_path / "n" / "base.ckpt").exists()
    assert run("run", "--config", cfg, "--out-dir", tmp_path / "c", "--seeds", "3", "--eval-only") == 2  # K grid differs
    assert run("sweep-cmrr", "--config", cfg, "--out-dir", tmp_path / "c", "--cmrr", "1,5", "--noise-ratio", 0.5,
               "--seed", 3, "--eval-only") == 0


def test_invariant_violation_exit_3(monkeypatch, tmp_path, tiny_config):
    def broken(*args, **kwargs):
        raise InvariantError("row sums drifted")

    monkeypatch.setattr(cli, "run_experiment", broken)
    assert run("run", "--config", tiny_config()) == 3
