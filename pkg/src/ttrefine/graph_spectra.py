"""Radius graphs, normalized-Laplacian spectra and spectral distances."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .structures import Structure, StructureError

PROFILE_FORMAT_VERSION = 1
ZERO_TOL = 1e-8


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class RadiusGraph:
    n: int
    cutoff: float
    neighbors: tuple[np.ndarray, ...]
    degrees: np.ndarray

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed edge arrays (receiver, sender), both directions present."""
        if self.n == 0 or int(self.degrees.sum()) == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty.copy()
        recv = np.repeat(np.arange(self.n), self.degrees)
        send = np.concatenate(self.neighbors).astype(np.int64)
        return recv, send

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        recv, send = self.edge_index()
        a[recv, send] = 1.0
        return a


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray  # sorted descending
    n: int

    def __len__(self) -> int:
        return len(self.eigenvalues)


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_radius_graph(structure: Structure, cutoff: float) -> RadiusGraph:
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    pos = np.asarray(structure.positions, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise StructureError("non-finite coordinates")
    n = pos.shape[0]
    adj = pairwise_distances(pos) <= cutoff
    np.fill_diagonal(adj, False)
    neighbors = tuple(np.flatnonzero(row) for row in adj)
    degrees = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    return RadiusGraph(n=n, cutoff=float(cutoff), neighbors=neighbors, degrees=degrees)


def normalized_laplacian(graph: RadiusGraph) -> np.ndarray:
    """I - D^-1/2 A D^-1/2 with zero diagonal at isolated nodes."""
    a = graph.adjacency()
    deg = graph.degrees.astype(float)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = -(inv_sqrt[:, None] * a * inv_sqrt[None, :])
    lap[np.diag_indices_from(lap)] = (deg > 0).astype(float)
    return lap


@numba.njit(cache=True)
def _jacobi_sweeps(a, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if np.sqrt(off) <= tol:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                sign = 1.0 if theta >= 0.0 else -1.0
                t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
    return -1


def jacobi_eigenvalues(
    matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100
) -> np.ndarray:
    """Eigenvalues of a dense symmetric matrix by cyclic Jacobi rotations.

    Converged when the off-diagonal Frobenius norm is <= ``tol``. Returned in
    descending order.
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if a.shape[0] == 0:
        return np.zeros(0)
    if not np.allclose(a, a.T, atol=1e-14):
        raise ValueError("matrix must be symmetric")
    if _jacobi_sweeps(a, tol, max_sweeps) < 0:
        raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.sort(np.diag(a))[::-1].copy()


def laplacian_spectrum(graph: RadiusGraph) -> Spectrum:
    return Spectrum(jacobi_eigenvalues(normalized_laplacian(graph)), graph.n)


def structure_spectrum(structure: Structure, cutoff: float) -> Spectrum:
    return laplacian_spectrum(build_radius_graph(structure, cutoff))


def pad_spectrum(spectrum: Spectrum | np.ndarray, target_len: int) -> np.ndarray:
    vals = spectrum.eigenvalues if isinstance(spectrum, Spectrum) else np.asarray(spectrum)
    if target_len < len(vals):
        raise ValueError(f"target_len {target_len} shorter than spectrum ({len(vals)})")
    out = np.zeros(target_len)
    out[: len(vals)] = vals
    return out


def spectral_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared spectral distance between two padded spectra."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}; pad first")
    d = a - b
    return float(d @ d)


def count_within_cutoff(
    test_spectrum: Spectrum, training_spectra: list[Spectrum], epsilon: float
) -> int:
    """Number of training spectra within squared distance ``epsilon`` of the test one."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    count = 0
    for sp in training_spectra:
        m = max(len(sp), len(test_spectrum))
        if spectral_distance(pad_spectrum(test_spectrum, m), pad_spectrum(sp, m)) <= epsilon:
            count += 1
    return count


@dataclass
class TrainingProfile:
    mean_spectrum: np.ndarray
    spectral_distance_mean: float
    spectral_distance_std: float
    force_norm_mean: float
    force_norm_std: float
    size_mean: float
    size_std: float
    seen_elements: frozenset[str]
    train_cutoff: float
    composition_mean: dict[str, float] = field(default_factory=dict)
    composition_std: dict[str, float] = field(default_factory=dict)

    def distance_to_mean(self, spectrum: Spectrum) -> float:
        m = max(len(self.mean_spectrum), len(spectrum))
        return spectral_distance(
            pad_spectrum(self.mean_spectrum, m), pad_spectrum(spectrum, m)
        )

    def save(self, path) -> None:
        def vec(v):
            return ",".join(repr(float(x)) for x in v)

        species = sorted(self.composition_mean)
        lines = [
            f"format_version = {PROFILE_FORMAT_VERSION}",
            f"train_cutoff = {self.train_cutoff!r}",
            f"mean_spectrum = {vec(self.mean_spectrum)}",
            f"spectral_distance_mean = {self.spectral_distance_mean!r}",
            f"spectral_distance_std = {self.spectral_distance_std!r}",
            f"force_norm_mean = {self.force_norm_mean!r}",
            f"force_norm_std = {self.force_norm_std!r}",
            f"size_mean = {self.size_mean!r}",
            f"size_std = {self.size_std!r}",
            f"seen_elements = {','.join(sorted(self.seen_elements))}",
            f"composition_species = {','.join(species)}",
            f"composition_mean = {vec(self.composition_mean[s] for s in species)}",
            f"composition_std = {vec(self.composition_std[s] for s in species)}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> TrainingProfile:
        kv = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        version = int(kv.get("format_version", -1))
        if version != PROFILE_FORMAT_VERSION:
            raise ValueError(f"unsupported profile format_version {version}")

        def vec(key):
            return np.array([float(x) for x in kv[key].split(",") if x])

        species = [s for s in kv.get("composition_species", "").split(",") if s]
        cmean = vec("composition_mean") if species else []
        cstd = vec("composition_std") if species else []
        return cls(
            mean_spectrum=vec("mean_spectrum"),
            spectral_distance_mean=float(kv["spectral_distance_mean"]),
            spectral_distance_std=float(kv["spectral_distance_std"]),
            force_norm_mean=float(kv["force_norm_mean"]),
            force_norm_std=float(kv["force_norm_std"]),
            size_mean=float(kv["size_mean"]),
            size_std=float(kv["size_std"]),
            seen_elements=frozenset(s for s in kv["seen_elements"].split(",") if s),
            train_cutoff=float(kv["train_cutoff"]),
            composition_mean=dict(zip(species, map(float, cmean))),
            composition_std=dict(zip(species, map(float, cstd))),
        )


def composition(structure: Structure) -> dict[str, float]:
    n = structure.n_atoms
    out: dict[str, float] = {}
    for s in structure.species:
        out[s] = out.get(s, 0.0) + 1.0 / n
    return out


def build_training_profile(dataset, cutoff: float) -> TrainingProfile:
    """Summarise a reference-labeled training set.

    Spectra are padded to the largest training graph before averaging.
    All standard deviations use the population convention.
    """
    if not dataset:
        raise ValueError("empty training set")
    structures = [item.structure for item in dataset]
    spectra = [structure_spectrum(s, cutoff) for s in structures]
    width = max(len(sp) for sp in spectra)
    padded = np.stack([pad_spectrum(sp, width) for sp in spectra])
    mean_spec = np.clip(padded.mean(axis=0), 0.0, 2.0)
    dists = np.array([spectral_distance(row, mean_spec) for row in padded])

    norms = np.concatenate(
        [np.linalg.norm(item.labels_for("main")[1], axis=1) for item in dataset]
    )
    sizes = np.array([s.n_atoms for s in structures], dtype=float)
    seen = frozenset(sp for s in structures for sp in s.species)
    comps = [composition(s) for s in structures]
    comp_mean = {sp: float(np.mean([c.get(sp, 0.0) for c in comps])) for sp in seen}
    comp_std = {sp: float(np.std([c.get(sp, 0.0) for c in comps])) for sp in seen}
    return TrainingProfile(
        mean_spectrum=mean_spec,
        spectral_distance_mean=float(dists.mean()),
        spectral_distance_std=float(dists.std()),
        force_norm_mean=float(norms.mean()),
        force_norm_std=float(norms.std()),
        size_mean=float(sizes.mean()),
        size_std=float(sizes.std()),
        seen_elements=seen,
        train_cutoff=float(cutoff),
        composition_mean=comp_mean,
        composition_std=comp_std,
    )
