"""In/out-of-distribution flags along atomic-feature, force-norm and
connectivity axes, and error-versus-shift tables."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph_spectra import TrainingProfile, composition, structure_spectrum
from .model import ModelParams, per_structure_force_mae
from .potentials import PairParams, lj_energy_forces
from .structures import Structure

AXES = ("force_norm", "connectivity", "size")


@dataclass(frozen=True)
class ShiftReport:
    structure_id: str
    unseen_element: bool
    size_ood: bool
    composition_ood: bool
    force_norm_ood: bool | None  # None when the prior cannot evaluate the structure
    connectivity_ood: bool
    spectral_distance: float
    prior_force_norm: float
    n_atoms: int

    @property
    def any_ood(self) -> bool:
        return bool(
            self.unseen_element
            or self.size_ood
            or self.composition_ood
            or self.force_norm_ood
            or self.connectivity_ood
        )

    def row(self) -> dict:
        d = asdict(self)
        d["force_norm_ood"] = "indeterminate" if self.force_norm_ood is None else self.force_norm_ood
        return d


def _beyond(value: float, mean: float, std: float) -> bool:
    return abs(value - mean) > std


def prior_force_norm(structure: Structure, prior: PairParams) -> float | None:
    if not set(structure.species) <= prior.species:
        return None
    _, f = lj_energy_forces(structure, prior)
    return float(np.linalg.norm(f, axis=1).mean())


def diagnose(structure: Structure, profile: TrainingProfile, prior: PairParams) -> ShiftReport:
    """Apply the one-standard-deviation rule on each axis.

    The force-norm axis uses the prior's mean per-atom force norm as a
    label-free proxy for the reference force norm.
    """
    sd = profile.distance_to_mean(structure_spectrum(structure, profile.train_cutoff))
    fn = prior_force_norm(structure, prior)
    comp = composition(structure)
    comp_ood = any(
        _beyond(comp.get(sp, 0.0), profile.composition_mean[sp], profile.composition_std.get(sp, 0.0))
        for sp in profile.composition_mean
    )
    return ShiftReport(
        structure_id=structure.structure_id,
        unseen_element=any(s not in profile.seen_elements for s in structure.species),
        size_ood=_beyond(structure.n_atoms, profile.size_mean, profile.size_std),
        composition_ood=comp_ood,
        force_norm_ood=None if fn is None else _beyond(fn, profile.force_norm_mean, profile.force_norm_std),
        connectivity_ood=sd > profile.spectral_distance_mean + profile.spectral_distance_std,
        spectral_distance=sd,
        prior_force_norm=float("nan") if fn is None else fn,
        n_atoms=structure.n_atoms,
    )


def _axis_value(report: ShiftReport, axis: str) -> float:
    return {
        "force_norm": report.prior_force_norm,
        "connectivity": report.spectral_distance,
        "size": float(report.n_atoms),
    }[axis]


def _axis_flag(report: ShiftReport, axis: str) -> bool:
    return {
        "force_norm": bool(report.force_norm_ood),
        "connectivity": report.connectivity_ood,
        "size": report.size_ood,
    }[axis]


def _other_axes_ood(report: ShiftReport, axis: str) -> bool:
    others = [a for a in AXES if a != axis]
    return report.unseen_element or any(_axis_flag(report, a) for a in others)


def error_vs_shift_table(
    model: ModelParams,
    labeled,
    profile: TrainingProfile,
    prior: PairParams,
    n_bins: int = 8,
    isolate: bool = True,
    cutoff=None,
) -> list[dict]:
    """Mean main-head force MAE per shift bin, for each axis.

    With ``isolate`` set, structures that are out of distribution on another
    axis (or contain unseen elements) are dropped when tabulating an axis.
    Each axis also gets two summary rows, ``in_distribution`` and
    ``out_of_distribution``, grouping structures by their own flag.
    """
    labeled = list(labeled)
    if not labeled:
        return []
    reports = [diagnose(x.structure, profile, prior) for x in labeled]
    maes = per_structure_force_mae(model, labeled, "main", cutoff)
    rows = []
    for axis in AXES:
        keep = [k for k, r in enumerate(reports) if not (isolate and _other_axes_ood(r, axis))]
        keep = [k for k in keep if np.isfinite(_axis_value(reports[k], axis))]
        values = np.array([_axis_value(reports[k], axis) for k in keep])
        errs = maes[keep]
        if len(values):
            lo, hi = float(values.min()), float(values.max())
            if hi == lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, n_bins + 1)
            idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
        else:
            edges = np.linspace(0.0, 1.0, n_bins + 1)
            idx = np.zeros(0, dtype=int)
        for b in range(n_bins):
            sel = idx == b
            rows.append({
                "axis": axis,
                "bin": str(b),
                "lo": float(edges[b]),
                "hi": float(edges[b + 1]),
                "count": int(sel.sum()),
                "mean_force_mae": float(errs[sel].mean()) if sel.any() else float("nan"),
            })
        flags = np.array([_axis_flag(reports[k], axis) for k in keep], dtype=bool)
        for name, sel in (("in_distribution", ~flags), ("out_of_distribution", flags)):
            rows.append({
                "axis": axis,
                "bin": name,
                "lo": float("nan"),
                "hi": float("nan"),
                "count": int(sel.sum()),
                "mean_force_mae": float(errs[sel].mean()) if sel.any() else float("nan"),
            })
    return rows
