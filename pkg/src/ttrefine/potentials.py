"""Analytic pair/three-body potentials used as prior and reference labels.

The prior is a Lennard-Jones pair potential. The reference stands in for
quantum-mechanical labels: Morse pairs, a short-range repulsive core that
makes the energy diverge as any pair distance goes to zero, and a
cosine-harmonic three-body angle term. Parameters are given per species and
combined per pair with Lorentz-Berthelot rules (arithmetic mean for lengths,
geometric mean for energies).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .structures import LabeledStructure, Structure, StructureError

MIN_PAIR_DISTANCE = 1e-10


def _combine_length(table, a, b):
    return 0.5 * (table[a] + table[b])


def _combine_energy(table, a, b):
    return float(np.sqrt(table[a] * table[b]))


@dataclass(frozen=True)
class PairParams:
    """Per-species LJ parameters: ``epsilon`` (eV) and ``sigma`` (A)."""

    epsilon: dict[str, float]
    sigma: dict[str, float]

    def __post_init__(self):
        if set(self.epsilon) != set(self.sigma):
            raise ValueError("epsilon and sigma must cover the same species")
        if any(v <= 0 for v in self.epsilon.values()) or any(
            v <= 0 for v in self.sigma.values()
        ):
            raise ValueError("epsilon and sigma must be positive")

    @property
    def species(self) -> frozenset[str]:
        return frozenset(self.epsilon)

    def pair(self, a: str, b: str) -> tuple[float, float]:
        return _combine_energy(self.epsilon, a, b), _combine_length(self.sigma, a, b)


@dataclass(frozen=True)
class ReferenceOracleParams:
    morse_depth: dict[str, float]  # eV, combined geometrically
    morse_r0: dict[str, float]  # A, combined arithmetically
    morse_width: float = 3.8  # 1/A
    three_body_strength: float = 0.6  # eV
    three_body_cos0: float = -0.5
    three_body_cutoff: float = 1.9  # A
    three_body_taper: float = 0.3  # switching width below the cutoff, A
    core_fraction: float = 0.6  # core radius as a fraction of the pair r0
    core_strength: float = 5.0  # eV

    def __post_init__(self):
        if set(self.morse_depth) != set(self.morse_r0):
            raise ValueError("morse_depth and morse_r0 must cover the same species")
        positive = [
            *self.morse_depth.values(),
            *self.morse_r0.values(),
            self.morse_width,
            self.three_body_strength,
            self.three_body_cutoff,
            self.three_body_taper,
            self.core_fraction,
            self.core_strength,
        ]
        if any(v <= 0 for v in positive):
            raise ValueError("reference parameters must be positive")
        if not -1.0 <= self.three_body_cos0 <= 1.0:
            raise ValueError("three_body_cos0 must lie in [-1, 1]")
        if self.three_body_taper > self.three_body_cutoff:
            raise ValueError("three_body_taper exceeds the cutoff")

    @property
    def species(self) -> frozenset[str]:
        return frozenset(self.morse_depth)


def _pairs(structure: Structure):
    pos = structure.positions
    n = structure.n_atoms
    i, j = np.triu_indices(n, k=1)
    rij = pos[j] - pos[i]
    r = np.linalg.norm(rij, axis=1)
    if np.any(r < MIN_PAIR_DISTANCE):
        k = int(np.argmin(r))
        raise StructureError(
            f"coincident atoms {i[k]} and {j[k]} in {structure.structure_id!r}"
        )
    return i, j, rij, r


def _pair_table(species, i, j, fn):
    cache = {}
    out = []
    for a, b in zip(i, j):
        key = (species[a], species[b])
        if key not in cache:
            cache[key] = fn(*key)
        out.append(cache[key])
    return np.array(out, dtype=float).reshape(len(i), -1)


def _check_species(structure: Structure, known, what: str):
    missing = set(structure.species) - set(known)
    if missing:
        raise StructureError(f"{what} has no parameters for {sorted(missing)}")


def _accumulate_pair_forces(n, i, j, rij, r, dv_dr):
    # dv_dr is dE/dr per pair; r_ij points from i to j
    fvec = (dv_dr / r)[:, None] * rij
    forces = np.zeros((n, 3))
    np.add.at(forces, i, fvec)
    np.add.at(forces, j, -fvec)
    return forces


def lj_energy_forces(structure: Structure, params: PairParams) -> tuple[float, np.ndarray]:
    """E = sum_{i<j} 4 eps [(sigma/r)^12 - (sigma/r)^6] and F = -dE/dx."""
    _check_species(structure, params.species, "Lennard-Jones prior")
    n = structure.n_atoms
    if n < 2:
        return 0.0, np.zeros((n, 3))
    i, j, rij, r = _pairs(structure)
    es = _pair_table(structure.species, i, j, params.pair)
    eps, sig = es[:, 0], es[:, 1]
    sr6 = (sig / r) ** 6
    sr12 = sr6 * sr6
    energy = float(np.sum(4.0 * eps * (sr12 - sr6)))
    dv_dr = 4.0 * eps * (-12.0 * sr12 + 6.0 * sr6) / r
    return energy, _accumulate_pair_forces(n, i, j, rij, r, dv_dr)


def _switch(r, r_on, r_off):
    """Cosine switch: 1 below r_on, 0 above r_off, C1 in between."""
    x = np.clip((r - r_on) / (r_off - r_on), 0.0, 1.0)
    s = 0.5 * (1.0 + np.cos(np.pi * x))
    ds = np.where((r > r_on) & (r < r_off), -0.5 * np.pi * np.sin(np.pi * x) / (r_off - r_on), 0.0)
    return s, ds


def _morse_core(r, depth, r0, width, core_r, core_c):
    ex = np.exp(-width * (r - r0))
    e = depth * (ex * ex - 2.0 * ex)
    de = depth * (-2.0 * width * ex * ex + 2.0 * width * ex)
    inside = r < core_r
    u = np.where(inside, core_r / r - 1.0, 0.0)
    e = e + core_c * u**3
    de = de + np.where(inside, 3.0 * core_c * u**2 * (-core_r / r**2), 0.0)
    return e, de


def reference_energy_forces(
    structure: Structure, params: ReferenceOracleParams
) -> tuple[float, np.ndarray]:
    _check_species(structure, params.species, "reference oracle")
    n = structure.n_atoms
    if n < 2:
        return 0.0, np.zeros((n, 3))
    i, j, rij, r = _pairs(structure)

    def combo(a, b):
        r0 = _combine_length(params.morse_r0, a, b)
        return _combine_energy(params.morse_depth, a, b), r0

    tab = _pair_table(structure.species, i, j, combo)
    depth, r0 = tab[:, 0], tab[:, 1]
    e_pair, de = _morse_core(
        r, depth, r0, params.morse_width, params.core_fraction * r0, params.core_strength
    )
    energy = float(e_pair.sum())
    forces = _accumulate_pair_forces(n, i, j, rij, r, de)

    e3, f3 = _three_body(structure.positions, params)
    return energy + e3, forces + f3


def lj_dimer_energy(r, a: str, b: str, params: PairParams) -> np.ndarray:
    """LJ energy of an isolated a-b dimer at separation(s) ``r``."""
    eps, sig = params.pair(a, b)
    sr6 = (sig / np.asarray(r, dtype=float)) ** 6
    return 4.0 * eps * (sr6 * sr6 - sr6)


def reference_dimer_energy(r, a: str, b: str, params: ReferenceOracleParams) -> np.ndarray:
    """Reference energy of an isolated a-b dimer (no three-body term)."""
    r0 = _combine_length(params.morse_r0, a, b)
    depth = _combine_energy(params.morse_depth, a, b)
    e, _ = _morse_core(
        np.asarray(r, dtype=float), depth, r0, params.morse_width,
        params.core_fraction * r0, params.core_strength,
    )
    return e


def _three_body(pos: np.ndarray, params: ReferenceOracleParams):
    n = pos.shape[0]
    r_off = params.three_body_cutoff
    r_on = r_off - params.three_body_taper
    k3, c0 = params.three_body_strength, params.three_body_cos0
    diff = pos[None, :, :] - pos[:, None, :]  # diff[i, j] = r_j - r_i
    dist = np.linalg.norm(diff, axis=2)
    energy = 0.0
    forces = np.zeros((n, 3))
    for c in range(n):
        nb = np.flatnonzero((dist[c] < r_off) & (np.arange(n) != c))
        if len(nb) < 2:
            continue
        a_idx, b_idx = np.triu_indices(len(nb), k=1)
        ja, kb = nb[a_idx], nb[b_idx]
        u, v = diff[c, ja], diff[c, kb]
        ru, rv = dist[c, ja], dist[c, kb]
        cos = np.einsum("ij,ij->i", u, v) / (ru * rv)
        su, dsu = _switch(ru, r_on, r_off)
        sv, dsv = _switch(rv, r_on, r_off)
        g = (cos - c0) ** 2
        dg = 2.0 * (cos - c0)
        energy += float(np.sum(k3 * g * su * sv))
        dcos_du = v / (ru * rv)[:, None] - (cos / ru**2)[:, None] * u
        dcos_dv = u / (ru * rv)[:, None] - (cos / rv**2)[:, None] * v
        de_du = k3 * ((dg * su * sv)[:, None] * dcos_du + (g * dsu * sv / ru)[:, None] * u)
        de_dv = k3 * ((dg * su * sv)[:, None] * dcos_dv + (g * su * dsv / rv)[:, None] * v)
        np.add.at(forces, ja, -de_du)
        np.add.at(forces, kb, -de_dv)
        forces[c] += de_du.sum(axis=0) + de_dv.sum(axis=0)
    return energy, forces


def force_norm_stats(labeled: list[LabeledStructure], task: str = "main") -> tuple[float, float]:
    """Mean and population std of per-atom force norms (eV/A)."""
    if not labeled:
        raise ValueError("no structures given")
    norms = np.concatenate([np.linalg.norm(x.labels_for(task)[1], axis=1) for x in labeled])
    return float(norms.mean()), float(norms.std())


def label_structure(
    structure: Structure, reference: ReferenceOracleParams, prior: PairParams | None = None
) -> LabeledStructure:
    """Reference labels, plus prior labels side by side when ``prior`` is given."""
    e, f = reference_energy_forces(structure, reference)
    if prior is None:
        return LabeledStructure(structure, e, f, label_source="reference")
    ep, fp = lj_energy_forces(structure, prior)
    return LabeledStructure(
        structure, e, f, label_source="reference", prior_energy=ep, prior_forces=fp
    )


def label_with_prior(structure: Structure, prior: PairParams) -> LabeledStructure:
    e, f = lj_energy_forces(structure, prior)
    return LabeledStructure(structure, e, f, label_source="prior")


@dataclass(frozen=True)
class PotentialSet:
    """The reference/prior pair used throughout an experiment."""

    reference: ReferenceOracleParams
    prior: PairParams
    notes: dict = field(default_factory=dict)


def default_potentials() -> PotentialSet:
    """Desk-scale parameter set for C/N/O/S pseudo-molecules.

    The LJ prior places its minimum at the Morse r0 with a well depth close
    to the Morse depth, so curvatures at the minimum nearly agree; it has no
    angle term and a harder core, so it is correlated with, but not equal
    to, the reference.
    """
    r0_half = {"C": 0.70, "N": 0.66, "O": 0.62, "S": 0.90}
    depth = {"C": 1.0, "N": 0.9, "O": 0.8, "S": 1.1}
    reference = ReferenceOracleParams(morse_depth=depth, morse_r0={k: 2 * v for k, v in r0_half.items()})
    # sigma_ii = r0_ii / 2^(1/6) keeps the LJ minimum at the Morse minimum
    prior = PairParams(
        epsilon={k: 0.9 * v for k, v in depth.items()},
        sigma={k: 2 * v / 2 ** (1 / 6) for k, v in r0_half.items()},
    )
    return PotentialSet(reference=reference, prior=prior)
