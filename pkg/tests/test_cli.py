import json
import subprocess
import sys

import pytest

from countkit import cli
from countkit.datadir import read_labels
from countkit.tensorio import read_tensor


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> featurize -> train on a toy corpus, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    p = lambda *parts: str(root.joinpath(*parts))
    assert cli.run(["toy-corpus", "--out", p("corpus"), "--n-speakers", "6", "--seed", "1"]) == 0
    manifest = p("corpus", "manifest.json")
    assert cli.run(["synth", "--corpus", manifest, "--kmax", "2", "--per-k", "4", "--duration", "2",
                    "--out", p("tr"), "--seed", "2"]) == 0
    assert cli.run(["synth", "--corpus", manifest, "--kmax", "2", "--per-k", "2", "--duration", "2",
                    "--out", p("va"), "--seed", "3"]) == 0
    assert cli.run(["featurize", "--feature", "mel40", "--in", p("tr"), "--out", p("ftr"),
                    "--stats", p("stats.json"), "--fit-stats"]) == 0
    assert cli.run(["featurize", "--feature", "mel40", "--in", p("va"), "--out", p("fva"),
                    "--stats", p("stats.json")]) == 0
    assert cli.run(["train", "--features", p("ftr"), "--val", p("fva"), "--head", "poisson", "--kmax", "2",
                    "--out", p("ckpt"), "--max-epochs", "2", "--excerpt", "1", "--batch-size", "4"]) == 0
    return root


def test_help_and_version():
    out = subprocess.run([sys.executable, "-m", "countkit.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "toy-experiment" in out.stdout
    out = subprocess.run(["countkit", "synth", "--nope"], capture_output=True, text=True)
    assert out.returncode == 1 and "error" in out.stderr
    assert cli.run(["--version"]) == 0
    assert cli.run(["train", "--help"]) == 0


def test_usage_errors_exit_one(tmp_path, capsys):
    assert cli.run(["synth", "--bogus"]) == 1
    assert cli.run([]) == 1
    assert cli.run(["predict", "--ckpt", str(tmp_path / "none"), "--wav", str(tmp_path / "x.wav")]) == 1
    assert "error:" in capsys.readouterr().err


def test_internal_error_exits_two(monkeypatch, tmp_path):
    def boom(args):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(cli.COMMANDS, "toy-corpus", boom)
    assert cli.run(["toy-corpus", "--out", str(tmp_path)]) == 2


def test_synth_outputs(pipeline):
    labels = read_labels(pipeline / "tr")
    assert len(labels) == 12
    assert sorted(r["k"] for r in labels) == [0] * 4 + [1] * 4 + [2] * 4
    man = json.load(open(pipeline / "tr" / "run_manifest.json"))
    assert man["command"] == "synth" and man["config"]["per_k"] == 4 and "wall_time_s" in man


def test_featurize_outputs(pipeline):
    X, header = read_tensor(pipeline / "ftr" / "features.ctk")
    assert X.shape == (12, 200, 40) and header["feature_kind"] == "mel40"
    assert header["stats_file"].endswith("stats.json")


def test_train_eval_predict(pipeline, capsys):
    ck = pipeline / "ckpt"
    assert (ck / "checkpoint.json").exists() and (ck / "weights.ctk").exists() and (ck / "stats.json").exists()
    assert len((ck / "train_log.jsonl").read_text().splitlines()) == 3
    rep = str(pipeline / "rep" / "report.json")
    assert cli.run(["eval", "--ckpt", str(ck), "--test", str(pipeline / "fva"), "--out", rep,
                    "--csv", str(pipeline / "figs")]) == 0
    report = json.load(open(rep))
    assert report["head_kind"] == "poisson" and len(report["confusion"]) == 3
    assert (pipeline / "figs" / "confusion.csv").exists()
    assert (pipeline / "rep" / "run_manifest.json").exists()
    capsys.readouterr()
    wav = str(pipeline / "va" / "audio" / "00000.wav")
    assert cli.run(["predict", "--ckpt", str(ck), "--wav", wav]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("k_hat ") and int(lines[0].split()[1]) >= 0
    assert float(lines[1].split()[1]) > 0


def test_feature_kind_mismatch(pipeline, tmp_path):
    assert cli.run(["featurize", "--feature", "stft", "--in", str(pipeline / "va"), "--out", str(tmp_path / "f")]) == 0
    assert cli.run(["eval", "--ckpt", str(pipeline / "ckpt"), "--test", str(tmp_path / "f"),
                    "--out", str(tmp_path / "r.json")]) == 1


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text(f"# toy synth\ncorpus = {pipeline / 'corpus' / 'manifest.json'}\nkmax = 1\nper-k = 2\n"
                   f"duration = 1.5\nout = {tmp_path / 'a'}\n")
    assert cli.run(["synth", "--config", str(cfg)]) == 0
    assert len(read_labels(tmp_path / "a")) == 4
    assert cli.run(["synth", "--config", str(cfg), "--per-k", "3", "--out", str(tmp_path / "b")]) == 0
    assert len(read_labels(tmp_path / "b")) == 6


def test_parallel_synth_matches_serial(pipeline, tmp_path):
    base = ["synth", "--corpus", str(pipeline / "corpus" / "manifest.json"), "--kmax", "2", "--per-k", "2",
            "--duration", "1.5", "--seed", "9"]
    assert cli.run(base + ["--out", str(tmp_path / "s")]) == 0
    assert cli.run(base + ["--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    for sub in ("labels.jsonl", "audio/00003.wav", "vad/00005.bin"):
        assert (tmp_path / "s" / sub).read_bytes() == (tmp_path / "p" / sub).read_bytes()


def test_multi_seed_training(pipeline, tmp_path):
    assert cli.run(["train", "--features", str(pipeline / "ftr"), "--val", str(pipeline / "fva"),
                    "--head", "gauss", "--kmax", "2", "--out", str(tmp_path), "--max-epochs", "1",
                    "--excerpt", "1", "--n-seeds", "2", "--seed", "4"]) == 0
    summary = json.load(open(tmp_path / "summary.json"))
    assert [r["seed"] for r in summary["runs"]] == [4, 5]
    assert (tmp_path / "seed5" / "checkpoint.json").exists()
