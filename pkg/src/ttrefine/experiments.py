"""Experiment pipelines: generate -> train -> diagnose -> mitigate -> simulate.

Every pipeline writes CSV tables plus ``summary.json`` into its output
directory. All randomness comes from the seeds in the config, and floats
are written as their shortest round-trip repr, so repeated runs are
byte-identical.
Wall-clock timings go to the log only.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .benchmark import Benchmark, BenchmarkConfig, generate_benchmark
from .config import ExperimentConfig, as_dict
from .diagnostics import diagnose, error_vs_shift_table
from .graph_spectra import structure_spectrum
from .md import (
    ReferenceForces,
    bonds_from_structure,
    h_of_r,
    h_of_r_mae,
    maxwell_boltzmann,
    run_nvt,
    stability_time,
)
from .model import ArchConfig, ForceField, ModelParams, force_mae, per_structure_force_mae
from .potentials import reference_energy_forces
from .rr import default_candidates, refine_radius, refine_radius_system, refined_cutoffs
from .structures import group_by_system
from .training import TrainConfig, fine_tune, init_readout_bias, pretrain_freeze_finetune, train, write_loss_log
from .ttt import ttt_adapt

log = logging.getLogger(__name__)

BOND_CUTOFF = 1.75  # A, pairs closer than this in the start frame are monitored bonds
CONNECTIVITY_SUITE = ("connectivity", "heldout")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class Report:
    pipeline: str
    out_dir: Path
    files: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)  # shortest string that round-trips exactly
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c, "")) for c in columns])


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else float(fmt(v))
    return v


class _Run:
    """Output bookkeeping plus stage-level error reporting."""

    def __init__(self, name: str, out_dir, cfg: ExperimentConfig):
        self.report = Report(name, Path(out_dir))
        self.report.out_dir.mkdir(parents=True, exist_ok=True)
        self.report.summary = {"pipeline": name, "seed": cfg.run.seed, "stages": []}
        self.cfg = cfg

    def csv(self, name: str, rows, columns) -> None:
        write_csv(self.report.out_dir / name, rows, columns)
        if name not in self.report.files:
            self.report.files.append(name)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        log.info("[%s] stage %s", self.report.pipeline, name)
        try:
            yield
        except Exception as exc:
            self.report.summary["failed_stage"] = name
            self.report.summary["error"] = str(exc)
            self.finish()
            raise PipelineError(name, exc) from exc
        self.report.summary["stages"].append(name)
        log.info("[%s] stage %s done in %.1f s", self.report.pipeline, name, time.perf_counter() - t0)

    def finish(self) -> Report:
        self.report.summary["config"] = as_dict(self.cfg)
        self.report.summary["files"] = sorted(self.report.files)
        path = self.report.out_dir / "summary.json"
        path.write_text(json.dumps(_jsonable(self.report.summary), indent=2, sort_keys=True) + "\n")
        return self.report


# Benchmark generation and base training are shared by every pipeline, so
# they are cached in-process on their (frozen, hashable) configs.


@lru_cache(maxsize=8)
def cached_benchmark(config: BenchmarkConfig) -> Benchmark:
    return generate_benchmark(config)


def _total_steps(cfg: ExperimentConfig) -> int:
    if cfg.run.regime == "pff":
        return cfg.pretrain.steps + cfg.finetune.steps
    if cfg.run.regime == "joint":
        return cfg.pretrain.steps
    return cfg.finetune.steps


@lru_cache(maxsize=8)
def _cached_model(bcfg: BenchmarkConfig, arch: ArchConfig, pre: TrainConfig, ft: TrainConfig, regime: str):
    bench = cached_benchmark(bcfg)
    params = ModelParams.initialize(arch)
    init_readout_bias(params, bench.train)
    if regime == "pff":
        res = pretrain_freeze_finetune(params, bench.train, bench.train, pre, ft)
    elif regime == "joint":
        res = train(params, bench.train, "joint", pre)
    else:
        res = train(params, bench.train, "main", ft)
    return res.params, res.history


def base_model(cfg: ExperimentConfig) -> tuple[ModelParams, list[dict]]:
    """Model trained on the benchmark's training set under ``cfg.run.regime``."""
    if cfg.arch.cutoff != cfg.benchmark.cutoff:
        raise ValueError("arch.cutoff and benchmark.cutoff must agree")
    m, hist = _cached_model(cfg.benchmark, cfg.arch, cfg.pretrain, cfg.finetune, cfg.run.regime)
    return m.copy(), list(hist)


def _prepare(run: _Run):
    cfg = run.cfg
    with run.stage("generate"):
        bench = cached_benchmark(cfg.benchmark)
        run.csv("dataset_summary.csv", dataset_rows(bench), DATASET_COLUMNS)
        run.report.summary["generation_events"] = list(bench.log)
    with run.stage("train"):
        model, history = base_model(cfg)
        path = run.report.out_dir / "training_log.csv"
        write_loss_log(history, path)
        run.report.files.append("training_log.csv")
        run.report.summary["trained"] = _total_steps(cfg) > 0
    return bench, model


def splits(bench: Benchmark) -> dict:
    return {"train": bench.train, "id_test": bench.id_test, **bench.ood}


DATASET_COLUMNS = [
    "split", "n_structures", "n_systems", "mean_atoms", "mean_force_norm", "mean_prior_force_norm",
    "mean_spectral_distance",
]


def dataset_rows(bench: Benchmark) -> list[dict]:
    rows = []
    for name, data in splits(bench).items():
        fn = [np.linalg.norm(x.forces, axis=1).mean() for x in data]
        pfn = [np.linalg.norm(x.prior_forces, axis=1).mean() for x in data]
        sd = [bench.profile.distance_to_mean(structure_spectrum(x.structure, bench.profile.train_cutoff)) for x in data]
        rows.append({
            "split": name,
            "n_structures": len(data),
            "n_systems": len(group_by_system([x.structure for x in data])),
            "mean_atoms": float(np.mean([x.structure.n_atoms for x in data])),
            "mean_force_norm": float(np.mean(fn)),
            "mean_prior_force_norm": float(np.mean(pfn)),
            "mean_spectral_distance": float(np.mean(sd)),
        })
    return rows


def _ttt_on(model, labeled, bench, cfg):
    """TTT on the structures of ``labeled`` (labels unused); MAE before/after."""
    structures = [x.structure for x in labeled]
    adapted, hist = ttt_adapt(model, structures, bench.potentials.prior, cfg.ttt)
    return adapted, hist, force_mae(model, labeled, "main"), force_mae(adapted, labeled, "main")


# --- pipelines -------------------------------------------------------------


def shift_benchmark(cfg: ExperimentConfig, out_dir) -> Report:
    run = _Run("shift-benchmark", out_dir, cfg)
    bench, model = _prepare(run)
    trained = run.report.summary["trained"]
    prior = bench.potentials.prior
    with run.stage("evaluate"):
        rows = [
            {"split": k, "n_structures": len(v), "force_mae_main": force_mae(model, v, "main"),
             "force_mae_prior": force_mae(model, v, "prior")}
            for k, v in splits(bench).items()
        ]
        run.csv("baseline_mae.csv", rows, ["split", "n_structures", "force_mae_main", "force_mae_prior"])
        run.report.summary["baseline_force_mae"] = {r["split"]: r["force_mae_main"] for r in rows}
    with run.stage("diagnose"):
        test = {"id_test": bench.id_test, **bench.ood}
        drows = []
        flagged = {}
        for name, data in test.items():
            reports = [diagnose(x.structure, bench.profile, prior) for x in data]
            drows += [{"split": name, **r.row()} for r in reports]
            flagged[name] = {
                "force_norm_ood": float(np.mean([bool(r.force_norm_ood) for r in reports])),
                "connectivity_ood": float(np.mean([r.connectivity_ood for r in reports])),
                "size_ood": float(np.mean([r.size_ood for r in reports])),
                "unseen_element": float(np.mean([r.unseen_element for r in reports])),
            }
        cols = ["split", "structure_id", "unseen_element", "size_ood", "composition_ood", "force_norm_ood",
                "connectivity_ood", "spectral_distance", "prior_force_norm", "n_atoms"]
        run.csv("diagnostics.csv", drows, cols)
        all_test = [x for data in test.values() for x in data]
        table = error_vs_shift_table(model, all_test, bench.profile, prior, cfg.run.n_bins, cfg.run.isolate_axes)
        run.csv("error_vs_shift.csv", table, ["axis", "bin", "lo", "hi", "count", "mean_force_mae"])
        run.report.summary["ood_fraction"] = flagged
        run.report.summary["error_vs_shift"] = {
            r["axis"] + ":" + r["bin"]: r["mean_force_mae"] for r in table if not r["bin"].isdigit()
        }
    if not trained or cfg.ttt.steps == 0:
        run.report.summary["ttt"] = "skipped"
    else:
        with run.stage("ttt"):
            rows = []
            for name, data in bench.ood.items():
                for sid, group in group_by_system(data).items():
                    _, hist, before, after = _ttt_on(model, group, bench, cfg)
                    rows.append({
                        "split": name, "system": sid, "n_structures": len(group), "mae_before": before,
                        "mae_after": after, "relative_change": (after - before) / before,
                        "prior_loss_before": hist[0] if hist else float("nan"),
                        "prior_loss_after": hist[-1] if hist else float("nan"), "steps": max(len(hist) - 1, 0),
                    })
            run.csv("ttt.csv", rows, ["split", "system", "n_structures", "mae_before", "mae_after",
                                      "relative_change", "prior_loss_before", "prior_loss_after", "steps"])
            run.report.summary["ttt"] = {r["split"]: [r["mae_before"], r["mae_after"]] for r in rows}
    if not trained:
        run.report.summary["rr"] = "skipped"
    else:
        with run.stage("rr"):
            rows = _rr_rows(model, bench, cfg)
            run.csv("rr.csv", rows, RR_COLUMNS)
            run.report.summary["rr"] = _rr_summary(rows)
    return run.finish()


RR_COLUMNS = [
    "split", "structure_id", "system", "distance_train", "cutoff_per_configuration",
    "distance_per_configuration", "cutoff_per_system", "mae_without", "mae_with_per_configuration",
    "mae_with_per_system",
]


def _candidates(cfg: ExperimentConfig, train_cutoff: float):
    return default_candidates(train_cutoff, cfg.rr.n_candidates, cfg.rr.low, cfg.rr.high)


def _rr_rows(model, bench, cfg, split_names=None) -> list[dict]:
    prof = bench.profile
    cands = _candidates(cfg, prof.train_cutoff)
    rows = []
    for name, data in splits(bench).items():
        if name == "train" or (split_names and name not in split_names):
            continue
        structures = [x.structure for x in data]
        per_conf = []
        for s in structures:
            best, dists = refine_radius(s, prof, cands)
            per_conf.append((best, dists[cands.index(best)], dists[cands.index(prof.train_cutoff)]))
        per_sys = refined_cutoffs(structures, prof, cands, per_configuration=False)
        base = per_structure_force_mae(model, data, "main")
        with_conf = per_structure_force_mae(model, data, "main", [c for c, _, _ in per_conf])
        with_sys = per_structure_force_mae(model, data, "main", per_sys)
        for k, x in enumerate(data):
            rows.append({
                "split": name, "structure_id": x.structure.structure_id, "system": x.structure.system_id,
                "distance_train": per_conf[k][2], "cutoff_per_configuration": per_conf[k][0],
                "distance_per_configuration": per_conf[k][1], "cutoff_per_system": per_sys[k],
                "mae_without": base[k], "mae_with_per_configuration": with_conf[k],
                "mae_with_per_system": with_sys[k],
            })
    return rows


def _rr_summary(rows) -> dict:
    out = {}
    for name in dict.fromkeys(r["split"] for r in rows):
        sel = [r for r in rows if r["split"] == name]
        out[name] = {
            "mae_without": float(np.mean([r["mae_without"] for r in sel])),
            "mae_with_per_configuration": float(np.mean([r["mae_with_per_configuration"] for r in sel])),
            "mae_with_per_system": float(np.mean([r["mae_with_per_system"] for r in sel])),
            "argmin_holds": all(r["distance_per_configuration"] <= r["distance_train"] for r in sel),
        }
    suite = [r for r in rows if r["split"] in CONNECTIVITY_SUITE]
    if suite:
        out["connectivity_suite"] = {
            "mae_without": float(np.mean([r["mae_without"] for r in suite])),
            "mae_with_per_configuration": float(np.mean([r["mae_with_per_configuration"] for r in suite])),
            "mae_with_per_system": float(np.mean([r["mae_with_per_system"] for r in suite])),
            "argmin_holds": all(r["distance_per_configuration"] <= r["distance_train"] for r in suite),
        }
    return out


def rr_sweep(cfg: ExperimentConfig, out_dir) -> Report:
    run = _Run("rr-sweep", out_dir, cfg)
    bench, model = _prepare(run)
    prof = bench.profile
    cands = _candidates(cfg, prof.train_cutoff)
    with run.stage("sweep"):
        drows, mrows = [], []
        for name, data in splits(bench).items():
            if name == "train":
                continue
            for sid, group in group_by_system(data).items():
                best, dists = refine_radius_system([x.structure for x in group], prof, cands)
                for c, d in zip(cands, dists):
                    drows.append({"split": name, "system": sid, "cutoff": c, "mean_distance": d,
                                  "selected": c == best, "train_cutoff": c == prof.train_cutoff})
                    mrows.append({"split": name, "system": sid, "cutoff": c,
                                  "force_mae": force_mae(model, group, "main", c)})
        run.csv("rr_distances.csv", drows, ["split", "system", "cutoff", "mean_distance", "selected", "train_cutoff"])
        run.csv("rr_mae_sweep.csv", mrows, ["split", "system", "cutoff", "force_mae"])
    with run.stage("select"):
        rows = _rr_rows(model, bench, cfg)
        run.csv("rr_structures.csv", rows, RR_COLUMNS)
        run.report.summary["rr"] = _rr_summary(rows)
        run.report.summary["candidates"] = cands
    return run.finish()


def ttt_vs_finetune(cfg: ExperimentConfig, out_dir) -> Report:
    run = _Run("ttt-vs-finetune", out_dir, cfg)
    bench, model = _prepare(run)
    with run.stage("split"):
        data = bench.ood["heldout"]
        perm = np.random.default_rng(cfg.run.seed).permutation(len(data))
        n_eval = max(1, int(round(cfg.run.finetune_holdout * len(data))))
        evaluation = [data[k] for k in sorted(perm[:n_eval])]
        pool = [data[k] for k in sorted(perm[n_eval:])]
        if not pool:
            raise ValueError("no structures left for fine-tuning")
    with run.stage("ttt"):
        if cfg.ttt.steps > 0:
            adapted, hist = ttt_adapt(model, [x.structure for x in data], bench.potentials.prior, cfg.ttt)
        else:
            adapted, hist = model.copy(), []
        run.report.summary["ttt_steps"] = max(len(hist) - 1, 0)
    with run.stage("finetune"):
        ft_cfg = replace(cfg.harness, freeze=frozenset({"repr", "prior_head"}))
        rows = []
        for method, start in (("finetune", model), ("ttt+finetune", adapted)):
            rows.append({"method": method, "fraction": 0.0, "n_train": 0,
                         "force_mae": force_mae(start, evaluation, "main")})
            curve = fine_tune(start, pool, ft_cfg, cfg.run.finetune_fractions, evaluation, subset_seed=cfg.run.seed)
            for frac, mae in curve:
                rows.append({"method": method, "fraction": frac, "n_train": int(round(frac * len(pool))),
                             "force_mae": mae})
        curve_rows = [r for r in rows if r["fraction"] > 0]
        run.csv("finetune_curve.csv", curve_rows, ["method", "fraction", "n_train", "force_mae"])
        run.report.summary["no_finetune_mae"] = {r["method"]: r["force_mae"] for r in rows if r["fraction"] == 0}
        run.report.summary["curve"] = {
            f"{r['method']}@{fmt(r['fraction'])}": r["force_mae"] for r in curve_rows
        }
    return run.finish()


def md_transfer(cfg: ExperimentConfig, out_dir) -> Report:
    run = _Run("md-transfer", out_dir, cfg)
    bench, model = _prepare(run)
    # TTT adapts per system, as in shift-benchmark: on the frames of the
    # simulated molecule, not pooled with its compressed variant
    start = bench.ood["connectivity"][0].structure
    molecule = group_by_system(bench.ood["connectivity"])[start.system_id]
    with run.stage("ttt"):
        if cfg.ttt.steps > 0:
            adapted, _ = ttt_adapt(model, [x.structure for x in molecule], bench.potentials.prior, cfg.ttt)
        else:
            adapted = model.copy()
        rr_cut, _ = refine_radius_system(
            [x.structure for x in bench.ood["connectivity"]], bench.profile,
            _candidates(cfg, bench.profile.train_cutoff),
        )
    with run.stage("simulate"):
        sim = cfg.md
        v0 = maxwell_boltzmann(start.masses(), sim.temperature, np.random.default_rng(sim.seed))
        providers = {
            "reference": ReferenceForces(reference_energy_forces, bench.potentials.reference, start.species),
            "baseline": ForceField(model, start.species, "main"),
            "ttt": ForceField(adapted, start.species, "main"),
            "rr": ForceField(model, start.species, "main", rr_cut),
        }
        trajs = {}
        for name, provider in providers.items():
            t0 = time.perf_counter()
            trajs[name] = run_nvt(provider, start, sim, velocities=v0)
            log.info("md %s: %d frames in %.1f s", name, len(trajs[name].frames), time.perf_counter() - t0)
            trajs[name].write(run.report.out_dir / f"traj_{name}.extxyz")
            run.report.files.append(f"traj_{name}.extxyz")
    with run.stage("observables"):
        bonds = bonds_from_structure(start, BOND_CUTOFF)
        hists = {k: h_of_r(t, cfg.run.md_r_max, cfg.run.md_bins) for k, t in trajs.items() if t.frames}
        rows = []
        for name, t in trajs.items():
            rows.append({
                "model": name, "cutoff": providers[name].cutoff if name != "reference" else float("nan"),
                "unstable": t.unstable, "reason": t.reason or "", "n_frames": len(t.frames),
                "stability_time_ps": stability_time(t, bonds, cfg.run.bond_tolerance),
                "hr_mae": h_of_r_mae(hists[name], hists["reference"]) if name in hists else float("nan"),
            })
        run.csv("md_summary.csv", rows, ["model", "cutoff", "unstable", "reason", "n_frames", "stability_time_ps", "hr_mae"])
        ref = hists["reference"]
        names = [k for k in trajs if k in hists]
        hrows = [
            {"r_lo": ref.edges[b], "r_hi": ref.edges[b + 1], **{k: hists[k].mass[b] for k in names}}
            for b in range(len(ref.mass))
        ]
        run.csv("hr_curves.csv", hrows, ["r_lo", "r_hi", *names])
        run.report.summary["md"] = {r["model"]: {"stability_time_ps": r["stability_time_ps"], "hr_mae": r["hr_mae"]} for r in rows}
        run.report.summary["rr_cutoff"] = rr_cut
    return run.finish()


PIPELINE_FUNCS = {
    "shift-benchmark": shift_benchmark,
    "ttt-vs-finetune": ttt_vs_finetune,
    "rr-sweep": rr_sweep,
    "md-transfer": md_transfer,
}


def run_experiment(cfg: ExperimentConfig, out_dir) -> Report:
    """Run ``cfg.run.pipeline``; raises PipelineError naming the failed stage."""
    return PIPELINE_FUNCS[cfg.run.pipeline](cfg, out_dir)
