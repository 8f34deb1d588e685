"""Velocity-Verlet (NVE) and BAOAB Langevin (NVT) integrators plus observables.

Units: positions in A, velocities in A/fs, masses in amu, energies in eV,
time in fs internally (SimConfig.total_time is in ps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .extxyz import write_frames
from .graph_spectra import build_radius_graph, pairwise_distances
from .structures import Structure

# 1 eV / (A amu) expressed in A / fs^2
ACCEL_CONV = 9.648533212331e-3
KB = 8.617333262e-5  # eV / K
MIN_DISTANCE = 0.3  # A, closer pairs abort the run


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.5  # fs
    total_time: float = 10.0  # ps
    temperature: float = 500.0  # K
    friction: float = 0.01  # 1/fs
    seed: int = 0
    record_interval: int = 20  # steps

    def __post_init__(self):
        if not self.dt > 0 or not self.total_time > 0:
            raise ValueError("dt and total_time must be positive")
        if self.temperature < 0 or self.friction < 0:
            raise ValueError("temperature and friction must be non-negative")
        if self.record_interval < 1:
            raise ValueError("record_interval must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.total_time * 1000.0 / self.dt))


@dataclass
class Frame:
    time: float  # fs
    positions: np.ndarray
    velocities: np.ndarray
    potential_energy: float
    total_energy: float


@dataclass
class Trajectory:
    species: tuple[str, ...]
    frames: list[Frame]
    config: SimConfig
    ensemble: str
    unstable: bool = False
    abort_time: float | None = None  # fs
    reason: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def duration_ps(self) -> float:
        return self.config.n_steps * self.config.dt / 1000.0

    def positions(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames])

    def write(self, path) -> None:
        frames = []
        for f in self.frames:
            info = {
                "time_fs": float(f.time),
                "potential_energy": float(f.potential_energy),
                "total_energy": float(f.total_energy),
            }
            frames.append((self.species, f.positions, info, {"velocities": f.velocities}))
        write_frames(frames, path)


def kinetic_energy(masses: np.ndarray, velocities: np.ndarray) -> float:
    return float(0.5 * np.sum(masses[:, None] * velocities**2) / ACCEL_CONV)


def maxwell_boltzmann(masses: np.ndarray, temperature: float, rng) -> np.ndarray:
    """Seeded Maxwell-Boltzmann velocities with zero net momentum."""
    if temperature == 0:
        return np.zeros((len(masses), 3))
    sigma = np.sqrt(KB * temperature * ACCEL_CONV / masses)
    v = rng.normal(size=(len(masses), 3)) * sigma[:, None]
    if len(masses) > 1:
        v -= (masses[:, None] * v).sum(axis=0) / masses.sum()
    return v


def _bad_state(positions, forces) -> str:
    if not np.all(np.isfinite(forces)) or not np.all(np.isfinite(positions)):
        return "non-finite forces or positions"
    if len(positions) > 1:
        d = pairwise_distances(positions)
        np.fill_diagonal(d, np.inf)
        if d.min() < MIN_DISTANCE:
            return f"pair distance {d.min():.3f} A below {MIN_DISTANCE} A"
    return ""


def _forces(force_provider, x):
    try:
        e, f = force_provider(x)
    except (ValueError, ArithmeticError):
        return float("nan"), np.full_like(x, np.nan)
    return e, np.asarray(f, dtype=float)


def _run(force_provider, structure: Structure, config: SimConfig, ensemble: str, velocities=None):
    masses = structure.masses()
    inv_m = ACCEL_CONV / masses[:, None]
    rng = np.random.default_rng(config.seed)
    x = np.array(structure.positions, dtype=float)
    if velocities is None:
        v = maxwell_boltzmann(masses, config.temperature, rng)
    else:
        v = np.array(velocities, dtype=float).reshape(x.shape)
    e_pot, f = _forces(force_provider, x)
    traj = Trajectory(structure.species, [], config, ensemble)
    reason = _bad_state(x, f)
    if reason:
        traj.unstable, traj.abort_time, traj.reason = True, 0.0, reason
        return traj
    traj.frames.append(Frame(0.0, x.copy(), v.copy(), e_pot, e_pot + kinetic_energy(masses, v)))

    dt = config.dt
    if ensemble == "nvt":
        c1 = math.exp(-config.friction * dt)
        c2 = np.sqrt((1 - c1 * c1) * KB * config.temperature * ACCEL_CONV / masses)[:, None]
    for step in range(1, config.n_steps + 1):
        if ensemble == "nve":
            v = v + 0.5 * dt * f * inv_m
            x = x + dt * v
        else:
            v = v + 0.5 * dt * f * inv_m
            x = x + 0.5 * dt * v
            v = c1 * v + c2 * rng.normal(size=x.shape)
            x = x + 0.5 * dt * v
        e_pot, f = _forces(force_provider, x)
        reason = _bad_state(x, f)
        if reason:
            traj.unstable, traj.abort_time, traj.reason = True, step * dt, reason
            return traj
        v = v + 0.5 * dt * f * inv_m
        if step % config.record_interval == 0:
            traj.frames.append(
                Frame(step * dt, x.copy(), v.copy(), e_pot, e_pot + kinetic_energy(masses, v))
            )
    return traj


def run_nve(force_provider, structure: Structure, config: SimConfig, velocities=None) -> Trajectory:
    """Velocity-Verlet. Initial velocities are Maxwell-Boltzmann at
    ``config.temperature`` unless given explicitly."""
    return _run(force_provider, structure, config, "nve", velocities)


def run_nvt(force_provider, structure: Structure, config: SimConfig, velocities=None) -> Trajectory:
    """BAOAB Langevin dynamics at ``config.temperature``."""
    return _run(force_provider, structure, config, "nvt", velocities)


def bonds_from_structure(structure: Structure, cutoff: float) -> list[tuple[int, int]]:
    g = build_radius_graph(structure, cutoff)
    return [(i, int(j)) for i in range(g.n) for j in g.neighbors[i] if j > i]


def stability_time(trajectory: Trajectory, reference_bonds, tolerance: float = 0.5) -> float:
    """Time (ps) of the first frame with a bond deviating more than ``tolerance``
    from its length in the first frame; the full duration if none does."""
    end = trajectory.duration_ps
    if trajectory.unstable and trajectory.abort_time is not None:
        end = trajectory.abort_time / 1000.0
    if not trajectory.frames or not reference_bonds:
        return end
    bonds = np.array(reference_bonds, dtype=int)
    pos0 = trajectory.frames[0].positions
    l0 = np.linalg.norm(pos0[bonds[:, 0]] - pos0[bonds[:, 1]], axis=1)
    for frame in trajectory.frames:
        p = frame.positions
        length = np.linalg.norm(p[bonds[:, 0]] - p[bonds[:, 1]], axis=1)
        if np.any(np.abs(length - l0) > tolerance):
            return frame.time / 1000.0
    return end


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    mass: np.ndarray  # probability mass per bin, sums to 1

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def density(self) -> np.ndarray:
        return self.mass / self.width


def _frame_hist(positions: np.ndarray, edges: np.ndarray) -> np.ndarray:
    n = len(positions)
    d = pairwise_distances(positions)[~np.eye(n, dtype=bool)]
    nb = len(edges) - 1
    idx = np.floor((d - edges[0]) / (edges[1] - edges[0])).astype(np.int64)
    # distances beyond r_max are folded into the last bin so each frame keeps mass 1
    idx = np.clip(idx, 0, nb - 1)
    return np.bincount(idx, minlength=nb) / (n * (n - 1))


def h_of_r(trajectory, r_max: float, n_bins: int) -> Histogram:
    """Time-averaged distribution of interatomic distances.

    Accepts a Trajectory or an array of frames (T, n, 3).
    """
    frames = trajectory.positions() if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.shape[1] < 2:
        raise ValueError("h(r) needs at least two atoms")
    edges = np.linspace(0.0, r_max, n_bins + 1)
    mass = np.mean([_frame_hist(p, edges) for p in frames], axis=0)
    return Histogram(edges, mass)


def h_of_r_mae(predicted: Histogram, reference: Histogram) -> float:
    """Integral of |<h> - <h_hat>| dr, summed over bins of width dr."""
    if predicted.edges.shape != reference.edges.shape or not np.allclose(
        predicted.edges, reference.edges, rtol=0, atol=1e-12
    ):
        raise ValueError("histograms use different binning")
    return float(np.sum(np.abs(predicted.density() - reference.density())) * predicted.width)


def nve_energy_deviation(trajectory: Trajectory) -> float:
    e = np.array([f.total_energy for f in trajectory.frames])
    if len(e) == 0:
        return float("nan")
    return float(np.max(np.abs(e - e[0])))


class ReferenceForces:
    """Force provider backed by an analytic potential function."""

    def __init__(self, fn, params, species):
        self.fn = fn
        self.params = params
        self.species = tuple(species)

    def __call__(self, positions):
        return self.fn(Structure(self.species, positions), self.params)
