import csv
import io

import pytest

from ttrefine.cli import main
from ttrefine.config import save_config

from conftest import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_config(tiny_config(), root / "tiny.ini")
    assert main(["--config", str(root / "tiny.ini"), "--out-dir", str(root / "data"), "generate"]) == 0
    assert main(["--config", str(root / "tiny.ini"), "--out-dir", str(root / "model"), "train",
                 "--data", str(root / "data" / "train.extxyz")]) == 0
    return root


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_generate_outputs(workspace):
    names = {p.name for p in (workspace / "data").iterdir()}
    assert {"train.extxyz", "id_test.extxyz", "ood_connectivity.extxyz", "ood_force_norm.extxyz",
            "ood_unseen_element.extxyz", "ood_heldout.extxyz", "profile.txt", "config.ini"} <= names


def test_train_outputs(workspace):
    assert {"model.npz", "training_log.csv", "profile.txt"} <= {p.name for p in (workspace / "model").iterdir()}


def test_eval_prints_csv(workspace, capsys):
    rc = main(["--out-dir", str(workspace / "ev"), "eval", "--model", str(workspace / "model" / "model.npz"),
               "--structures", str(workspace / "data" / "ood_heldout.extxyz")])
    rows = read_csv(capsys.readouterr().out)
    assert rc == 0 and len(rows) == 4 * 7
    assert list(rows[0]) == ["structure_id", "energy", "atom", "species", "fx", "fy", "fz"]


def test_rr_and_diagnose_and_spectra(workspace, capsys):
    data = workspace / "data"
    assert main(["rr", "--profile", str(data / "profile.txt"),
                 "--structures", str(data / "ood_connectivity.extxyz")]) == 0
    out = capsys.readouterr()
    rows = read_csv(out.out)
    assert len(rows) == 10 and sum(r["selected"] == "true" for r in rows) == 1
    assert "selected cutoff" in out.err
    assert main(["rr", "--per-configuration", "--profile", str(data / "profile.txt"),
                 "--structures", str(data / "ood_connectivity.extxyz")]) == 0
    assert len(read_csv(capsys.readouterr().out)) == 40
    assert main(["diagnose", "--profile", str(data / "profile.txt"),
                 "--structures", str(data / "ood_unseen_element.extxyz")]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 4 and all(r["unseen_element"] == "true" for r in rows)
    assert main(["spectra", "--structures", str(data / "id_test.extxyz"), "--cutoff", "3.0"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 12 and len(rows[0]["eigenvalues"].split()) == 7


def test_ttt_command(workspace, capsys):
    out = workspace / "ttt"
    rc = main(["--out-dir", str(out), "ttt", "--model", str(workspace / "model" / "model.npz"),
               "--structures", str(workspace / "data" / "ood_heldout.extxyz"), "--preset", "md22",
               "--steps", "3", "--lr", "1e-9"])
    assert rc == 0
    assert "force MAE before" in capsys.readouterr().out
    assert (out / "model_ttt.npz").exists() and len((out / "ttt_log.csv").read_text().splitlines()) == 5


def test_simulate_reference_and_model(workspace):
    data = workspace / "data"
    assert main(["--out-dir", str(workspace / "sim"), "simulate", "--structure", str(data / "id_test.extxyz"),
                 "--time", "0.02"]) == 0
    assert main(["--out-dir", str(workspace / "sim2"), "simulate", "--structure", str(data / "id_test.extxyz"),
                 "--model", str(workspace / "model" / "model.npz"), "--ensemble", "nve", "--rr",
                 "--profile", str(data / "profile.txt"), "--time", "0.01", "--temperature", "0"]) == 0
    rows = read_csv((workspace / "sim2" / "simulation.csv").read_text())
    assert rows[0]["ensemble"] == "nve" and rows[0]["unstable"] == "false"


def test_theorem_demo(tmp_path, capsys):
    assert main(["--seed", "1", "--out-dir", str(tmp_path), "theorem-demo", "--trials", "20",
                 "--output", "t.csv"]) == 0
    assert "success_rate=" in capsys.readouterr().err
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 21


def test_experiment_command(workspace, capsys):
    out = workspace / "exp"
    assert main(["--config", str(workspace / "tiny.ini"), "--out-dir", str(out), "experiment",
                 "--pipeline", "rr-sweep"]) == 0
    assert (out / "summary.json").exists() and (out / "rr_distances.csv").exists()


def test_errors_exit_nonzero(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[run]\nseeed = 1\n")
    assert main(["--config", str(tmp_path / "bad.ini"), "generate"]) == 1
    assert "unknown key" in capsys.readouterr().err
    (tmp_path / "bad.extxyz").write_text("2\nenergy=1\nC 0 0 0\n")
    assert main(["--out-dir", str(tmp_path), "train", "--data", str(tmp_path / "bad.extxyz")]) == 1
    assert "bad.extxyz:" in capsys.readouterr().err
    assert main(["--out-dir", str(tmp_path), "simulate", "--structure", str(tmp_path / "missing.extxyz")]) == 1
    with pytest.raises(SystemExit):
        main(["frobnicate"])
