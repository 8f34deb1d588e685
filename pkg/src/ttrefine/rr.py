"""Test-time radius refinement: pick the graph cutoff whose Laplacian spectrum
is closest to the training mean spectrum."""

from __future__ import annotations

import numpy as np

from .graph_spectra import TrainingProfile, structure_spectrum
from .model import ForceField, ModelParams
from .structures import Structure, group_by_system

TIE_TOL = 1e-12


def default_candidates(train_cutoff: float, k: int = 10, low: float = 0.7, high: float = 1.6) -> list[float]:
    """``k`` cutoffs spanning [low, high] x train_cutoff, plus train_cutoff itself."""
    grid = np.linspace(low, high, k) * train_cutoff
    vals = sorted(set(np.round(np.append(grid, train_cutoff), 12).tolist()))
    return [float(v) for v in vals]


def _validate(profile: TrainingProfile, candidates) -> list[float]:
    cands = [float(c) for c in candidates]
    if not cands:
        raise ValueError("no candidate cutoffs")
    if not any(abs(c - profile.train_cutoff) <= 1e-12 for c in cands):
        raise ValueError(
            f"candidates must include the training cutoff {profile.train_cutoff}"
        )
    if any(c <= 0 for c in cands):
        raise ValueError("cutoffs must be positive")
    return cands


def _argmin(cands, dists, train_cutoff) -> int:
    best = min(dists)
    tied = [k for k, d in enumerate(dists) if d - best <= TIE_TOL]
    return min(tied, key=lambda k: (abs(cands[k] - train_cutoff), cands[k]))


def refine_radius(
    structure: Structure, profile: TrainingProfile, candidates=None
) -> tuple[float, list[float]]:
    """Best cutoff and the spectral distance at every candidate.

    Ties go to the candidate nearest the training cutoff, then to the smaller one.
    """
    cands = _validate(profile, default_candidates(profile.train_cutoff) if candidates is None else candidates)
    dists = [profile.distance_to_mean(structure_spectrum(structure, c)) for c in cands]
    return cands[_argmin(cands, dists, profile.train_cutoff)], dists


def refine_radius_system(
    structures, profile: TrainingProfile, candidates=None
) -> tuple[float, list[float]]:
    """One cutoff for all configurations of a system (mean distance over them)."""
    structures = list(structures)
    cands = _validate(profile, default_candidates(profile.train_cutoff) if candidates is None else candidates)
    per = np.array([refine_radius(s, profile, cands)[1] for s in structures])
    dists = per.mean(axis=0).tolist()
    return cands[_argmin(cands, dists, profile.train_cutoff)], dists


def refined_cutoffs(structures, profile: TrainingProfile, candidates=None, per_configuration: bool = False) -> list[float]:
    """Cutoff for each structure: per system by default, per configuration on request."""
    structures = list(structures)
    if per_configuration:
        return [refine_radius(s, profile, candidates)[0] for s in structures]
    chosen = {
        sid: refine_radius_system(group, profile, candidates)[0]
        for sid, group in group_by_system(structures).items()
    }
    return [chosen[s.system_id] for s in structures]


def apply_refined_cutoff(model: ModelParams, structure: Structure, best_cutoff: float, head: str = "main") -> ForceField:
    """Force field whose graph and envelope are built at ``best_cutoff``."""
    if not best_cutoff > 0:
        raise ValueError("cutoff must be positive")
    return ForceField(model, structure.species, head=head, cutoff=best_cutoff)
