"""Run experiment pipelines over several seeds and print median headline numbers.

    python3 scripts/run_all.py --seeds 0 1 2 --out-dir runs
    python3 scripts/run_all.py --pipelines rr-sweep --config scripts/default.ini

Each (pipeline, seed) pair writes into ``<out-dir>/<pipeline>/seed<k>``.
Benchmark generation and base training are cached per seed, so running all
pipelines in one process trains each seed's model once.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from ttrefine.config import PIPELINES, ExperimentConfig, load_config
from ttrefine.experiments import run_experiment


def headline(pipeline: str, summary: dict) -> dict:
    """Scalar results worth aggregating across seeds."""
    out = {}
    if pipeline == "shift-benchmark" and isinstance(summary.get("ttt"), dict):
        for split, (before, after) in summary["ttt"].items():
            out[f"ttt_relative_change:{split}"] = (after - before) / before
        for key, value in summary.get("error_vs_shift", {}).items():
            if value is not None and not math.isnan(value):  # empty bin
                out[f"error_vs_shift:{key}"] = value
    if pipeline in ("shift-benchmark", "rr-sweep") and isinstance(summary.get("rr"), dict):
        suite = summary["rr"].get("connectivity_suite", {})
        for key in ("mae_without", "mae_with_per_system", "mae_with_per_configuration"):
            if key in suite:
                out[f"rr_suite:{key}"] = suite[key]
    if pipeline == "ttt-vs-finetune":
        out.update({f"finetune:{k}": v for k, v in summary.get("curve", {}).items()})
    if pipeline == "md-transfer":
        for model, vals in summary.get("md", {}).items():
            out[f"md:{model}:stability_time_ps"] = vals["stability_time_ps"]
            if vals["hr_mae"] is not None and not math.isnan(vals["hr_mae"]):
                out[f"md:{model}:hr_mae"] = vals["hr_mae"]
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--pipelines", nargs="+", choices=PIPELINES, default=list(PIPELINES))
    p.add_argument("--config", type=Path, help="INI file (default: built-in defaults)")
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")

    base = load_config(args.config) if args.config else ExperimentConfig()
    results: dict[str, dict[str, list[float]]] = {}
    for seed in args.seeds:
        for pipeline in args.pipelines:
            cfg = base.with_seed(seed)
            cfg = replace(cfg, run=replace(cfg.run, pipeline=pipeline))
            t0 = time.perf_counter()
            report = run_experiment(cfg, args.out_dir / pipeline / f"seed{seed}")
            print(f"{pipeline} seed {seed}: {time.perf_counter() - t0:.1f} s -> {report.out_dir}", flush=True)
            for key, value in headline(pipeline, report.summary).items():
                results.setdefault(pipeline, {}).setdefault(key, []).append(value)

    medians = {
        pipeline: {key: float(np.median(vals)) for key, vals in table.items()}
        for pipeline, table in results.items()
    }
    text = json.dumps({"seeds": args.seeds, "median": medians, "per_seed": results}, indent=2)
    (args.out_dir / "medians.json").write_text(text + "\n")
    for pipeline, table in medians.items():
        print(f"\n[{pipeline}] median over seeds {args.seeds}")
        for key, value in table.items():
            print(f"  {key:55s} {value: .6g}")


if __name__ == "__main__":
    main()
