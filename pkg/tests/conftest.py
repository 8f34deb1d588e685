import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ttrefine.model import ArchConfig, ModelParams
from ttrefine.potentials import default_potentials, label_structure
from ttrefine.structures import Structure

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

SPECIES = ("C", "N", "O", "S")


def random_molecule(rng, n=None, species=SPECIES, min_dist=1.0, box=None, sid="mol"):
    """Random non-overlapping cluster (rejection sampling)."""
    n = n or int(rng.integers(2, 9))
    box = box or 1.2 * n ** (1 / 3) + 1.0
    pos = []
    while len(pos) < n:
        p = rng.uniform(-box, box, 3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pos):
            pos.append(p)
    sp = tuple(species[k] for k in rng.integers(0, len(species), n))
    return Structure(sp, np.array(pos), structure_id=sid, system_id=sid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def potentials():
    return default_potentials()


@pytest.fixture(scope="session")
def small_arch():
    return ArchConfig(n_radial_basis=6, hidden_width=8, cutoff=3.0, seed=3)


@pytest.fixture
def small_model(small_arch):
    return ModelParams.initialize(small_arch)


@pytest.fixture(scope="session")
def labeled_set(potentials):
    rng = np.random.default_rng(7)
    out = []
    for k in range(12):
        s = random_molecule(rng, n=int(rng.integers(3, 7)), species=("C", "N", "O"), min_dist=1.2,
                            sid=f"s{k % 3}")
        s = Structure(s.species, s.positions, structure_id=f"m{k}", system_id=f"sys{k % 3}")
        out.append(label_structure(s, potentials.reference, potentials.prior))
    return out


@pytest.fixture(scope="session")
def shared_model(small_arch):
    """Read-only model for property tests; never mutate it."""
    return ModelParams.initialize(small_arch)


def tiny_config(pipeline="shift-benchmark", seed=0, train_steps=5):
    """Desk-scale config that runs every pipeline stage in seconds."""
    from dataclasses import replace

    from ttrefine.benchmark import BenchmarkConfig
    from ttrefine.config import ExperimentConfig, RunConfig
    from ttrefine.md import SimConfig
    from ttrefine.training import TrainConfig
    from ttrefine.ttt import TTTConfig

    tc = TrainConfig(optimizer="adam", learning_rate=3e-3, steps=train_steps, batch_size=8)
    cfg = ExperimentConfig(
        run=RunConfig(pipeline=pipeline, n_bins=3),
        benchmark=BenchmarkConfig(train_frames=8, test_frames=4, equilibration_steps=20, sample_interval=5),
        arch=ArchConfig(n_radial_basis=6, hidden_width=8),
        pretrain=tc,
        finetune=tc,
        ttt=TTTConfig(steps=2, learning_rate=1e-8),
        md=SimConfig(total_time=0.05, temperature=300.0, record_interval=10),
        harness=replace(tc, steps=3),
    )
    return cfg.with_seed(seed)


# PASS/FAIL lines recorded by test_acceptance.py, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
