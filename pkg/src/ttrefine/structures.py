"""Atomic structure containers shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Standard atomic masses (amu) for the species this toolkit generates.
ATOMIC_MASSES = {
    "H": 1.008,
    "He": 4.0026,
    "Li": 6.94,
    "B": 10.81,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "F": 18.998,
    "Ne": 20.180,
    "Si": 28.085,
    "P": 30.974,
    "S": 32.06,
    "Cl": 35.45,
    "Ar": 39.948,
}


class StructureError(ValueError):
    """Raised for malformed structures or labels."""


@dataclass(frozen=True)
class Structure:
    species: tuple[str, ...]
    positions: np.ndarray
    structure_id: str = ""
    system_id: str = ""

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        species = tuple(str(s) for s in self.species)
        if len(species) == 0:
            raise StructureError("structure must contain at least one atom")
        if pos.shape[0] != len(species):
            raise StructureError(
                f"{len(species)} species but {pos.shape[0]} position rows"
            )
        if not np.all(np.isfinite(pos)):
            raise StructureError(f"non-finite coordinates in {self.structure_id!r}")
        if any(not s for s in species):
            raise StructureError("empty species symbol")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "species", species)

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def with_positions(self, positions: np.ndarray) -> Structure:
        return replace(self, positions=positions)

    def masses(self) -> np.ndarray:
        try:
            return np.array([ATOMIC_MASSES[s] for s in self.species])
        except KeyError as err:
            raise StructureError(f"no mass known for species {err.args[0]}") from None


@dataclass(frozen=True)
class LabeledStructure:
    """A structure with energy (eV) and forces (eV/A) from one label source.

    ``prior_energy``/``prior_forces`` optionally carry a second set of labels
    from the prior so joint training can see both on the same structure.
    """

    structure: Structure
    energy: float
    forces: np.ndarray
    label_source: str = "reference"
    prior_energy: float | None = None
    prior_forces: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.label_source not in ("reference", "prior"):
            raise StructureError(f"unknown label_source {self.label_source!r}")
        forces = np.array(self.forces, dtype=float).reshape(-1, 3)
        if forces.shape[0] != self.structure.n_atoms:
            raise StructureError(
                f"forces have {forces.shape[0]} rows for {self.structure.n_atoms} atoms"
            )
        forces.setflags(write=False)
        object.__setattr__(self, "forces", forces)
        object.__setattr__(self, "energy", float(self.energy))
        if self.prior_forces is not None:
            pf = np.array(self.prior_forces, dtype=float).reshape(-1, 3)
            if pf.shape[0] != self.structure.n_atoms:
                raise StructureError("prior forces do not match atom count")
            pf.setflags(write=False)
            object.__setattr__(self, "prior_forces", pf)
            object.__setattr__(self, "prior_energy", float(self.prior_energy))

    @property
    def has_prior(self) -> bool:
        return self.label_source == "prior" or self.prior_forces is not None

    @property
    def has_reference(self) -> bool:
        return self.label_source == "reference"

    def labels_for(self, task: str) -> tuple[float, np.ndarray]:
        """(energy, forces) for ``task`` in {"main", "prior"}."""
        if task == "main":
            if self.label_source != "reference":
                raise StructureError(
                    f"{self.structure.structure_id!r} has no reference labels"
                )
            return self.energy, self.forces
        if task == "prior":
            if self.label_source == "prior":
                return self.energy, self.forces
            if self.prior_forces is None:
                raise StructureError(
                    f"{self.structure.structure_id!r} has no prior labels"
                )
            return self.prior_energy, self.prior_forces
        raise ValueError(f"unknown task {task!r}")


def group_by_system(items) -> dict[str, list]:
    """Group structures (or labeled structures) by system_id, keeping order."""
    groups: dict[str, list] = {}
    for item in items:
        s = item.structure if isinstance(item, LabeledStructure) else item
        groups.setdefault(s.system_id, []).append(item)
    return groups
