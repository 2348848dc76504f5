import csv
import re
import subprocess
import sys

import pytest

from msiresnet.cli import run


def cli(*argv):
    return run([str(a) for a in argv])


def test_confmat_metrics(capsys):
    assert cli("confmat-metrics", "--tp", 6338, "--fp", 1167, "--fn", 792, "--tn", 10936) == 0
    out = capsys.readouterr().out
    assert "accuracy 0.8981" in out and "f1 0.9178" in out


def test_confmat_reported_report(tmp_path, capsys):
    report = tmp_path / "r.csv"
    assert cli("confmat-metrics", "--reported", "--report", report) == 0
    rows = list(csv.DictReader(report.open()))
    assert len(rows) == 10
    assert capsys.readouterr().out == report.read_text()


def test_confmat_table_file(tmp_path, capsys):
    t = tmp_path / "t.csv"
    t.write_text("model,tp,fp,fn,tn\nmine,6338,1167,792,10936\n")
    assert cli("confmat-metrics", "--table", t) == 0
    assert "mine,6338,1167,792,10936,0.8981," in capsys.readouterr().out


def test_confmat_partial_counts(capsys):
    assert cli("confmat-metrics", "--tp", 1) == 1
    assert "--fp" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert cli("confmat-metrics", "--bogus") == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config(tmp_path, capsys):
    missing = tmp_path / "missing.cfg"
    assert cli("train", "--config", missing) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate=0.01\nfoo=1\n")
    assert cli("train", "--config", cfg, "--data", tmp_path) == 1
    assert "foo" in capsys.readouterr().err


def test_gradcheck_cnn5(capsys):
    assert cli("gradcheck", "--arch", "cnn5", "--input", 32, "--seed", 7) == 0
    assert "PASS" in capsys.readouterr().out


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "msiresnet.cli", "confmat-metrics",
                        "--tp", "1", "--fp", "0", "--fn", "0", "--tn", "1"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "accuracy 1.0000" in r.stdout


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--out", str(root / "d"), "--n-per-class", "12", "--input", "32", "--seed", "3"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text("# tiny run\narch=cnn5\ninput=32\nepochs=2\nbatch_size=8\nseed=5\n")
    assert run(["train", "--config", str(cfg), "--data", str(root / "d"),
                "--out", str(root / "e.csv"), "--ckpt", str(root / "m.ckpt")]) == 0
    return root


def test_train_outputs(trained):
    rows = list(csv.DictReader((trained / "e.csv").open()))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(re.fullmatch(r"\d+\.\d{6}", r["val_loss"]) for r in rows)
    assert (trained / "m.ckpt").read_bytes()[:4] == b"NNCK"


def test_eval_reproduces_val_loss(trained, capsys):
    capsys.readouterr()
    report = trained / "report.csv"
    assert run(["eval", "--ckpt", str(trained / "m.ckpt"), "--data", str(trained / "d"),
                "--split", "val", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    loss = float(re.search(r"loss=([0-9.]+)", out).group(1))
    last = list(csv.DictReader((trained / "e.csv").open()))[-1]
    assert abs(loss - float(last["val_loss"])) <= 1e-6
    assert report.read_text().startswith("model,tp,fp,fn,tn")


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert cli("eval", "--ckpt", tmp_path / "x.ckpt", "--data", tmp_path) == 1
    assert "x.ckpt" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNKJUNK")
    assert cli("eval", "--ckpt", bad, "--data", tmp_path) == 1
    assert "magic" in capsys.readouterr().err
