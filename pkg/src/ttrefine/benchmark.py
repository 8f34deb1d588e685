"""Synthetic distribution-shift benchmark.

Configurations are sampled by Langevin MD on the reference potential from a
handful of template pseudo-molecules and labeled with both the reference and
the Lennard-Jones prior. Held-out splits shift one axis each:

* ``connectivity``: a template whose radius graph differs from the training ones
* ``force_norm``: training templates compressed toward their centroid
* ``unseen_element``: a template containing a species absent from training
* ``heldout``: the connectivity template, compressed (connectivity + force norm)

The default templates all have seven atoms, so the size axis stays in
distribution and does not confound the connectivity and force-norm axes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph_spectra import TrainingProfile, build_training_profile
from .md import ReferenceForces, SimConfig, run_nvt
from .potentials import PotentialSet, default_potentials, label_structure, reference_energy_forces
from .structures import LabeledStructure, Structure

log = logging.getLogger(__name__)

BOND = 1.4  # A, template bond length


def zigzag(n: int, bond: float = BOND) -> np.ndarray:
    k = np.arange(n)
    return np.stack(
        [k * bond * np.cos(np.pi / 6), (k % 2) * bond * np.sin(np.pi / 6), np.zeros(n)], axis=1
    )


def ring(n: int, bond: float = BOND) -> np.ndarray:
    radius = bond / (2 * np.sin(np.pi / n))
    a = 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(a), radius * np.sin(a), np.zeros(n)], axis=1)


def branched(arm: int, bond: float = BOND) -> np.ndarray:
    """Central atom with three zigzag arms at 120 degrees."""
    pts = [np.zeros(3)]
    for a in range(3):
        phi = 2 * np.pi * a / 3
        direction = np.array([np.cos(phi), np.sin(phi), 0.0])
        side = np.array([-np.sin(phi), np.cos(phi), 0.0])
        for k in range(1, arm + 1):
            along = k * bond * np.cos(np.pi / 6)
            off = (k % 2) * bond * np.sin(np.pi / 6)
            pts.append(along * direction + off * side)
    return np.array(pts)


def tetrahedral(extra: int, bond: float = BOND) -> np.ndarray:
    """Atom with four tetrahedral neighbours; ``extra`` of them carry one more atom."""
    dirs = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / np.sqrt(3.0)
    pts = [np.zeros(3)] + [bond * d for d in dirs]
    for d in dirs[:extra]:
        side = np.cross(d, [0.0, 0.0, 1.0])
        side /= np.linalg.norm(side)
        # continue the arm at 120 degrees to the central bond
        pts.append(bond * d + bond * (0.5 * d + np.sqrt(0.75) * side))
    return np.array(pts)


TEMPLATES = {
    "chain6": ("CCCCCC", lambda: zigzag(6)),
    "chain8": ("CCNCCOCC", lambda: zigzag(8)),
    "branch7": ("CCCCNCO", lambda: branched(2)),
    "ring6": ("CCCCCN", lambda: ring(6)),
    "ring5": ("CCCCN", lambda: ring(5)),
    "chain6s": ("CCSCCC", lambda: zigzag(6)),
    "chain7": ("CCNCCOC", lambda: zigzag(7)),
    "chain7b": ("NCCCCCO", lambda: zigzag(7)),
    "ring7": ("CCCCCCN", lambda: ring(7)),
    "tetra7": ("CCCCCNO", lambda: tetrahedral(2)),
    "chain7s": ("CCSCCCC", lambda: zigzag(7)),
}


def template_structure(name: str, jitter: float = 0.05, rng=None) -> Structure:
    species, geometry = TEMPLATES[name]
    pos = geometry()
    if rng is not None and jitter > 0:
        pos = pos + rng.normal(scale=jitter, size=pos.shape)
    return Structure(tuple(species), pos, structure_id=name, system_id=name)


@dataclass(frozen=True)
class BenchmarkConfig:
    train_templates: tuple[str, ...] = ("chain7", "branch7", "chain7b")
    connectivity_template: str = "ring7"
    unseen_template: str = "chain7s"
    train_frames: int = 160  # per template
    test_frames: int = 40  # per template and split
    temperature: float = 300.0  # K
    compression: float = 0.9  # force-norm split scale factor
    dt: float = 0.5  # fs
    friction: float = 0.02  # 1/fs
    equilibration_steps: int = 200  # per burst
    sample_interval: int = 20  # steps between kept frames
    frames_per_burst: int = 4
    cutoff: float = 3.0  # training radius-graph cutoff, A
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_templates", tuple(self.train_templates))


@dataclass
class Benchmark:
    config: BenchmarkConfig
    train: list[LabeledStructure]
    id_test: list[LabeledStructure]
    ood: dict[str, list[LabeledStructure]]
    profile: TrainingProfile
    potentials: PotentialSet = field(repr=False, default_factory=default_potentials)
    log: list[str] = field(default_factory=list)


def sample_configurations(
    template: Structure,
    n_frames: int,
    potentials: PotentialSet,
    config: BenchmarkConfig,
    seed: int,
    temperature: float | None = None,
    tag: str = "",
    events: list | None = None,
) -> list[Structure]:
    """Reference-potential Langevin frames from independent short bursts.

    Every burst restarts from the template with fresh velocities, runs
    ``equilibration_steps`` and then keeps ``frames_per_burst`` frames spaced
    ``sample_interval`` steps apart. The reference has no torsion term, so
    one long trajectory would drift between folded and extended conformers;
    short bursts keep frames near the template's conformation. An unstable
    burst is retried at 0.7x the temperature and the event is logged.
    """
    rng = np.random.default_rng(seed)
    provider = ReferenceForces(reference_energy_forces, potentials.reference, template.species)
    steps = config.equilibration_steps + config.frames_per_burst * config.sample_interval
    skip = config.equilibration_steps // config.sample_interval
    frames: list[np.ndarray] = []
    while len(frames) < n_frames:
        temp = config.temperature if temperature is None else temperature
        for attempt in range(5):
            sim = SimConfig(
                dt=config.dt,
                total_time=steps * config.dt / 1000.0,
                temperature=temp,
                friction=config.friction,
                seed=int(rng.integers(0, 2**31 - 1)),
                record_interval=config.sample_interval,
            )
            traj = run_nvt(provider, template, sim)
            if not traj.unstable:
                break
            msg = f"{template.system_id}{tag}: unstable at {temp:.0f} K ({traj.reason}); retrying cooler"
            log.warning(msg)
            if events is not None:
                events.append(msg)
            temp *= 0.7
        else:
            raise RuntimeError(f"could not sample {template.system_id} stably")
        frames += [f.positions for f in traj.frames[skip + 1 : skip + 1 + config.frames_per_burst]]
    return [
        Structure(
            template.species,
            pos,
            structure_id=f"{template.system_id}{tag}-{k:04d}",
            system_id=template.system_id + tag,
        )
        for k, pos in enumerate(frames[:n_frames])
    ]


def compress(structure: Structure, factor: float, tag: str = "-compressed") -> Structure:
    pos = structure.positions
    center = pos.mean(axis=0)
    return Structure(
        structure.species,
        center + factor * (pos - center),
        structure_id=structure.structure_id.replace(structure.system_id, structure.system_id + tag, 1),
        system_id=structure.system_id + tag,
    )


def _label(structures, potentials):
    return [label_structure(s, potentials.reference, potentials.prior) for s in structures]


def generate_benchmark(config: BenchmarkConfig = BenchmarkConfig(), potentials: PotentialSet | None = None) -> Benchmark:
    potentials = potentials or default_potentials()
    rng = np.random.default_rng(config.seed)
    events: list[str] = []

    def seeds():
        return int(rng.integers(0, 2**31 - 1))

    train, id_test, force_norm = [], [], []
    for name in config.train_templates:
        tmpl = template_structure(name, rng=rng)
        train += sample_configurations(tmpl, config.train_frames, potentials, config, seeds(), events=events)
        test = sample_configurations(tmpl, config.test_frames, potentials, config, seeds(), tag="-test", events=events)
        id_test += test
        test_fn = sample_configurations(tmpl, config.test_frames, potentials, config, seeds(), tag="-fn", events=events)
        force_norm += [compress(s, config.compression, tag="") for s in test_fn]

    conn_t = template_structure(config.connectivity_template, rng=rng)
    conn = sample_configurations(conn_t, config.test_frames, potentials, config, seeds(), events=events)
    held = sample_configurations(conn_t, config.test_frames, potentials, config, seeds(), tag="-held", events=events)
    held = [compress(s, config.compression, tag="") for s in held]
    unseen_t = template_structure(config.unseen_template, rng=rng)
    unseen = sample_configurations(unseen_t, config.test_frames, potentials, config, seeds(), events=events)

    train_l = _label(train, potentials)
    ood = {
        "connectivity": _label(conn, potentials),
        "force_norm": _label(force_norm, potentials),
        "unseen_element": _label(unseen, potentials),
        "heldout": _label(held, potentials),
    }
    profile = build_training_profile(train_l, config.cutoff)
    return Benchmark(config, train_l, _label(id_test, potentials), ood, profile, potentials, events)
