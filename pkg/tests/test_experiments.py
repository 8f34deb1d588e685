import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from ttrefine.benchmark import BenchmarkConfig, compress, generate_benchmark, template_structure
from ttrefine.experiments import (
    PipelineError,
    _cached_model,
    cached_benchmark,
    fmt,
    run_experiment,
)
from ttrefine.config import PIPELINES

from conftest import tiny_config


def clear_caches():
    cached_benchmark.cache_clear()
    _cached_model.cache_clear()


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fmt():
    assert fmt(True) == "true" and fmt(np.bool_(False)) == "false"
    assert fmt(float("nan")) == "nan" and float(fmt(0.1 + 0.2)) == 0.1 + 0.2 and fmt(3) == "3"


def test_benchmark_same_seed_identical():
    cfg = tiny_config().benchmark
    a, b = generate_benchmark(cfg), generate_benchmark(cfg)
    for x, y in zip(a.train + a.ood["heldout"], b.train + b.ood["heldout"]):
        assert np.array_equal(x.structure.positions, y.structure.positions) and x.energy == y.energy
    c = generate_benchmark(replace(cfg, seed=1))
    assert not np.array_equal(a.train[0].structure.positions, c.train[0].structure.positions)


def test_benchmark_structure(tmp_path):
    bench = generate_benchmark(tiny_config().benchmark)
    assert len(bench.train) == 3 * 8 and len(bench.id_test) == 3 * 4
    assert {x.structure.system_id for x in bench.ood["connectivity"]} == {"ring7"}
    assert all("S" in x.structure.species for x in bench.ood["unseen_element"])
    assert all(x.prior_forces is not None for x in bench.train)
    held = bench.ood["heldout"][0].structure
    ring = template_structure("ring7")
    assert held.n_atoms == ring.n_atoms
    c = compress(ring, 0.5)
    assert np.allclose(c.positions - c.positions.mean(0), 0.5 * (ring.positions - ring.positions.mean(0)))


@pytest.mark.parametrize("pipeline", PIPELINES)
def test_pipelines_run_and_are_deterministic(tmp_path, pipeline):
    cfg = tiny_config(pipeline)
    clear_caches()
    a = run_experiment(cfg, tmp_path / "a")
    clear_caches()
    b = run_experiment(cfg, tmp_path / "b")
    assert a.files == b.files and a.files
    for name in a.files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    for name in a.files:
        if name.endswith(".csv"):
            text = (tmp_path / "a" / name).read_text().splitlines()
            assert text and "," in text[0]
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["pipeline"] == pipeline and "failed_stage" not in summary


def test_zero_training_steps_gives_baseline_only(tmp_path):
    cfg = tiny_config("shift-benchmark", train_steps=0)
    rep = run_experiment(cfg, tmp_path)
    assert rep.summary["trained"] is False
    assert rep.summary["ttt"] == "skipped" and rep.summary["rr"] == "skipped"
    assert {"baseline_mae.csv", "diagnostics.csv", "error_vs_shift.csv"} <= set(rep.files)
    assert "ttt.csv" not in rep.files


def test_finetune_curve_shape(tmp_path):
    cfg = tiny_config("ttt-vs-finetune")
    cfg = replace(cfg, run=replace(cfg.run, finetune_fractions=(0.05, 0.5, 1.0)),
                  benchmark=replace(cfg.benchmark, test_frames=40))
    run_experiment(cfg, tmp_path)
    curve = rows(tmp_path / "finetune_curve.csv")
    assert [(r["method"], r["fraction"]) for r in curve] == [
        (m, f) for m in ("finetune", "ttt+finetune") for f in ("0.05", "0.5", "1.0")
    ]
    assert [int(r["n_train"]) for r in curve[:3]] == [1, 10, 20]


def test_md_transfer_outputs(tmp_path):
    run_experiment(tiny_config("md-transfer"), tmp_path)
    md = rows(tmp_path / "md_summary.csv")
    assert [r["model"] for r in md] == ["reference", "baseline", "ttt", "rr"]
    hr = rows(tmp_path / "hr_curves.csv")
    for col in ("reference", "baseline", "ttt", "rr"):
        assert abs(sum(float(r[col]) for r in hr) - 1.0) <= 1e-12


def test_failure_names_stage_and_keeps_outputs(tmp_path):
    cfg = tiny_config()
    cfg = replace(cfg, arch=replace(cfg.arch, cutoff=2.5))  # disagrees with the benchmark cutoff
    with pytest.raises(PipelineError) as err:
        run_experiment(cfg, tmp_path)
    assert err.value.stage == "train"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["failed_stage"] == "train" and summary["stages"] == ["generate"]
    assert (tmp_path / "dataset_summary.csv").exists()
