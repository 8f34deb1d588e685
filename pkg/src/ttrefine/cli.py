"""Command-line interface: ``ttrefine <subcommand> [options]``.

Global flags (``--seed``, ``--config``, ``--out-dir``) come before the
subcommand. Exit code is 0 only when the command fully succeeds.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .benchmark import generate_benchmark
from .config import PIPELINES, REGIMES, ConfigError, ExperimentConfig, load_config, save_config
from .diagnostics import diagnose
from .experiments import PipelineError, fmt, run_experiment
from .extxyz import ExtXYZError, parse_extxyz, read_structures, write_extxyz
from .graph_spectra import TrainingProfile, build_training_profile, structure_spectrum
from .linear_ttt import DimerGenerator, verify_theorem
from .md import (
    ReferenceForces, bonds_from_structure, nve_energy_deviation, run_nve, run_nvt, stability_time,
)
from .model import ForceField, ModelParams, force_mae, predict
from .potentials import default_potentials, reference_energy_forces
from .rr import default_candidates, refine_radius, refine_radius_system
from .structures import StructureError, group_by_system
from .training import init_readout_bias, pretrain_freeze_finetune, train, write_loss_log
from .ttt import PRESETS, preset, ttt_adapt

log = logging.getLogger("ttrefine")


def _writer(out_dir: Path, name: str | None):
    if name is None:
        return csv.writer(sys.stdout, lineterminator="\n"), None
    fh = open(out_dir / name, "w", newline="")
    return csv.writer(fh, lineterminator="\n"), fh


def _emit(out_dir: Path, name: str | None, header, rows) -> None:
    w, fh = _writer(out_dir, name)
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    if fh is not None:
        fh.close()
        print(out_dir / name)


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


# --- subcommands -------------------------------------------------------------


def cmd_generate(args, cfg, out: Path) -> None:
    bench = generate_benchmark(cfg.benchmark)
    write_extxyz(bench.train, out / "train.extxyz")
    write_extxyz(bench.id_test, out / "id_test.extxyz")
    for name, data in bench.ood.items():
        write_extxyz(data, out / f"ood_{name}.extxyz")
    bench.profile.save(out / "profile.txt")
    save_config(cfg, out / "config.ini")
    for line in bench.log:
        log.warning(line)
    print(f"wrote {len(bench.train)} training and {sum(map(len, bench.ood.values())) + len(bench.id_test)} "
          f"test structures to {out}")


def cmd_train(args, cfg, out: Path) -> None:
    data = parse_extxyz(args.data)
    regime = args.regime or cfg.run.regime
    params = ModelParams.initialize(cfg.arch)
    init_readout_bias(params, data)
    if regime == "pff":
        res = pretrain_freeze_finetune(params, data, data, cfg.pretrain, cfg.finetune)
    elif regime == "joint":
        res = train(params, data, "joint", cfg.pretrain)
    else:
        res = train(params, data, "main", cfg.finetune)
    res.params.save(out / "model.npz")
    write_loss_log(res.history, out / "training_log.csv")
    build_training_profile(data, cfg.arch.cutoff).save(out / "profile.txt")
    print(f"train force MAE (main head): {force_mae(res.params, data, 'main'):.6g} eV/A")
    print(out / "model.npz")


def _load_any(path):
    try:
        return parse_extxyz(path)
    except ExtXYZError:
        return None


def cmd_ttt(args, cfg, out: Path) -> None:
    model = ModelParams.load(args.model)
    structures = read_structures(args.structures)
    tcfg = preset(args.preset) if args.preset else cfg.ttt
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    if args.lr is not None:
        tcfg = replace(tcfg, learning_rate=args.lr)
    adapted, hist = ttt_adapt(model, structures, default_potentials().prior, tcfg)
    adapted.save(out / "model_ttt.npz")
    _emit(out, "ttt_log.csv", ["step", "prior_loss"], list(enumerate(hist)))
    labeled = _load_any(args.structures)
    if labeled is not None:
        print(f"force MAE before {force_mae(model, labeled):.6g} after {force_mae(adapted, labeled):.6g} eV/A")
    print(out / "model_ttt.npz")


def cmd_rr(args, cfg, out: Path) -> None:
    profile = TrainingProfile.load(args.profile)
    structures = read_structures(args.structures)
    cands = default_candidates(profile.train_cutoff, cfg.rr.n_candidates, cfg.rr.low, cfg.rr.high)
    rows = []
    if args.per_configuration or cfg.rr.per_configuration:
        for s in structures:
            best, dists = refine_radius(s, profile, cands)
            rows += [(s.structure_id, c, d, c == best) for c, d in zip(cands, dists)]
    else:
        for sid, group in group_by_system(structures).items():
            best, dists = refine_radius_system(group, profile, cands)
            rows += [(sid, c, d, c == best) for c, d in zip(cands, dists)]
    _emit(out, args.output, ["id", "cutoff", "spectral_distance", "selected"], rows)
    for r in rows:
        if r[3]:
            print(f"# {r[0]}: selected cutoff {fmt(r[1])} A", file=sys.stderr)


def cmd_diagnose(args, cfg, out: Path) -> None:
    profile = TrainingProfile.load(args.profile)
    prior = default_potentials().prior
    reports = [diagnose(s, profile, prior).row() for s in read_structures(args.structures)]
    cols = ["structure_id", "unseen_element", "size_ood", "composition_ood", "force_norm_ood",
            "connectivity_ood", "spectral_distance", "prior_force_norm", "n_atoms"]
    _emit(out, args.output, cols, [[r[c] for c in cols] for r in reports])


def cmd_simulate(args, cfg, out: Path) -> None:
    structure = read_structures(args.structure)[args.frame]
    sim = replace(cfg.md, **{k: v for k, v in (
        ("dt", args.dt), ("total_time", args.time), ("temperature", args.temperature)) if v is not None})
    if args.model:
        model = ModelParams.load(args.model)
        cutoff = None
        if args.rr:
            if not args.profile:
                raise ValueError("--rr needs --profile")
            profile = TrainingProfile.load(args.profile)
            cutoff, _ = refine_radius(structure, profile)
            print(f"refined cutoff {fmt(cutoff)} A", file=sys.stderr)
        provider = ForceField(model, structure.species, "main", cutoff)
    else:
        provider = ReferenceForces(reference_energy_forces, default_potentials().reference, structure.species)
    runner = run_nve if args.ensemble == "nve" else run_nvt
    traj = runner(provider, structure, sim)
    traj.write(out / "trajectory.extxyz")
    stab = stability_time(traj, bonds_from_structure(structure, 1.75), cfg.run.bond_tolerance)
    rows = [[args.ensemble, traj.unstable, traj.reason, len(traj.frames), stab,
             nve_energy_deviation(traj) if args.ensemble == "nve" else float("nan")]]
    _emit(out, "simulation.csv", ["ensemble", "unstable", "reason", "n_frames", "stability_time_ps",
                                  "energy_deviation"], rows)
    if traj.unstable:
        raise RuntimeError(f"simulation unstable: {traj.reason}")


def cmd_spectra(args, cfg, out: Path) -> None:
    cutoff = args.cutoff if args.cutoff is not None else cfg.arch.cutoff
    rows = []
    for s in read_structures(args.structures):
        sp = structure_spectrum(s, cutoff)
        rows.append([s.structure_id, cutoff, " ".join(fmt(x) for x in sp.eigenvalues)])
    _emit(out, args.output, ["structure_id", "cutoff", "eigenvalues"], rows)


def cmd_eval(args, cfg, out: Path) -> None:
    model = ModelParams.load(args.model)
    structures = read_structures(args.structures)
    rows = []
    for s, (e, f) in zip(structures, predict(model, structures, args.head, args.cutoff)):
        for i in range(s.n_atoms):
            rows.append([s.structure_id, e, i, s.species[i], *f[i]])
    _emit(out, args.output, ["structure_id", "energy", "atom", "species", "fx", "fy", "fz"], rows)


def cmd_theorem(args, cfg, out: Path) -> None:
    seed = args.seed if args.seed is not None else 0
    report = verify_theorem(DimerGenerator(), trials=args.trials, eta=args.eta, seed=seed)
    if args.output:
        (out / args.output).write_text(report.to_csv())
    else:
        sys.stdout.write(report.to_csv())
    print(report.summary(), file=sys.stderr)


def cmd_experiment(args, cfg, out: Path) -> None:
    if args.pipeline:
        cfg = replace(cfg, run=replace(cfg.run, pipeline=args.pipeline))
    if args.regime:
        cfg = replace(cfg, run=replace(cfg.run, regime=args.regime))
    report = run_experiment(cfg, out)
    for name in sorted(report.files) + ["summary.json"]:
        print(report.out_dir / name)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttrefine", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="seed propagated into every stage")
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", help="generate the synthetic shift benchmark")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="train a model on a labeled extxyz file")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--regime", choices=REGIMES)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ttt", help="test-time training on unlabeled structures")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--structures", required=True, type=Path)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_ttt)

    s = sub.add_parser("rr", help="radius refinement: candidate vs spectral distance")
    s.add_argument("--profile", required=True, type=Path)
    s.add_argument("--structures", required=True, type=Path)
    s.add_argument("--per-configuration", action="store_true")
    s.add_argument("--output", help="CSV file name inside --out-dir (default: stdout)")
    s.set_defaults(func=cmd_rr)

    s = sub.add_parser("diagnose", help="one shift report row per structure")
    s.add_argument("--profile", required=True, type=Path)
    s.add_argument("--structures", required=True, type=Path)
    s.add_argument("--output")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("simulate", help="run MD with a model or the reference potential")
    s.add_argument("--structure", required=True, type=Path)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--model", type=Path, help="model checkpoint (default: reference potential)")
    s.add_argument("--ensemble", choices=("nvt", "nve"), default="nvt")
    s.add_argument("--rr", action="store_true", help="pick the cutoff by radius refinement first")
    s.add_argument("--profile", type=Path)
    s.add_argument("--dt", type=float)
    s.add_argument("--time", type=float, help="total time, ps")
    s.add_argument("--temperature", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("spectra", help="normalized-Laplacian eigenvalues per structure")
    s.add_argument("--structures", required=True, type=Path)
    s.add_argument("--cutoff", type=float)
    s.add_argument("--output")
    s.set_defaults(func=cmd_spectra)

    s = sub.add_parser("eval", help="energies and per-atom forces as CSV")
    s.add_argument("--model", required=True, type=Path)
    s.add_argument("--structures", required=True, type=Path)
    s.add_argument("--head", choices=("main", "prior"), default="main")
    s.add_argument("--cutoff", type=float)
    s.add_argument("--output")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("theorem-demo", help="linear-model TTT check over generated trials")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--eta", type=float, default=1e-4)
    s.add_argument("--output")
    s.set_defaults(func=cmd_theorem)

    s = sub.add_parser("experiment", help="run a named pipeline")
    s.add_argument("--pipeline", choices=PIPELINES)
    s.add_argument("--regime", choices=REGIMES)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, args.out_dir)
    except (ConfigError, ExtXYZError, StructureError, PipelineError, ValueError, RuntimeError, OSError) as exc:
        print(f"ttrefine {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
