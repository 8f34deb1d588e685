"""Small conservative force field with a shared representation and two heads.

Architecture (all float64)::

    species embedding --+
                        +-- x_i = e_{z_i} + sum_j env(r_ij) (rbf(r_ij) W_mix) * e_{z_j}
    Gaussian rbf * env -+
    interaction block(s): h_i <- h_i + ssp(h_i W_s + b_s + sum_j env (rbf W_r) * (h_j W_m))
    head (main | prior):  eps_i = w . ssp(... ssp(h_i W_1 + b_1) ...) + b_out
    E = sum_i eps_i,  F = -dE/dr

Embedding, mixing and interaction weights form the representation partition;
each head owns its own MLP. The activation is the shifted softplus
``ssp(x) = softplus(x) - ln 2``, which keeps E smooth in positions. Forces
come from autograd on the same graph that produced E, so they are exactly
conservative.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .graph_spectra import build_radius_graph
from .structures import Structure, StructureError

torch.set_default_dtype(torch.float64)

PARTITIONS = ("repr", "main_head", "prior_head")
HEADS = {"main": "main_head", "prior": "prior_head"}
CHECKPOINT_VERSION = 1
LN2 = math.log(2.0)


@dataclass(frozen=True)
class ArchConfig:
    species: tuple[str, ...] = ("C", "N", "O", "S")
    n_radial_basis: int = 12
    hidden_width: int = 24
    repr_blocks: int = 1
    head_blocks: int = 1
    cutoff: float = 3.0
    seed: int = 0
    envelope_exponent: int = 5

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        counts = (self.n_radial_basis, self.hidden_width, self.repr_blocks, self.head_blocks)
        if min(counts) < 1:
            raise ValueError("architecture counts must be >= 1")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if len(set(self.species)) != len(self.species) or not self.species:
            raise ValueError("species must be a nonempty list of distinct symbols")


def _layout(cfg: ArchConfig) -> list[tuple[str, tuple[int, ...], str]]:
    h, k = cfg.hidden_width, cfg.n_radial_basis
    entries = [
        ("embedding", (len(cfg.species), h), "repr"),
        ("rbf_mix", (k, h), "repr"),
    ]
    for b in range(cfg.repr_blocks):
        entries += [
            (f"block{b}.w_self", (h, h), "repr"),
            (f"block{b}.b_self", (h,), "repr"),
            (f"block{b}.w_rbf", (k, h), "repr"),
            (f"block{b}.w_msg", (h, h), "repr"),
        ]
    for head, part in (("main", "main_head"), ("prior", "prior_head")):
        for layer in range(cfg.head_blocks):
            entries += [
                (f"{head}.w{layer}", (h, h), part),
                (f"{head}.b{layer}", (h,), part),
            ]
        entries += [(f"{head}.w_out", (h,), part), (f"{head}.b_out", (), part)]
    return entries


@dataclass
class ModelParams:
    """Flat parameter vector plus the index mapping names/partitions to slices."""

    config: ArchConfig
    theta: torch.Tensor
    layout: dict[str, tuple[slice, tuple[int, ...], str]] = field(repr=False)

    @classmethod
    def initialize(cls, config: ArchConfig) -> ModelParams:
        entries = _layout(config)
        layout = {}
        offset = 0
        for name, shape, part in entries:
            size = int(np.prod(shape)) if shape else 1
            layout[name] = (slice(offset, offset + size), shape, part)
            offset += size
        gen = torch.Generator().manual_seed(config.seed)
        theta = torch.zeros(offset)
        for name, (sl, shape, _) in layout.items():
            if name.rsplit(".", 1)[-1].startswith("b"):
                continue
            fan_in = 1 if name == "embedding" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            theta[sl] = (torch.rand(sl.stop - sl.start, generator=gen) * 2 - 1) * bound
        return cls(config, theta, layout)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, self.theta.detach().clone(), self.layout)

    @property
    def size(self) -> int:
        return self.theta.numel()

    def partition_mask(self, partitions) -> torch.Tensor:
        mask = torch.zeros(self.size, dtype=torch.bool)
        for sl, _, part in self.layout.values():
            if part in partitions:
                mask[sl] = True
        return mask

    def partition_index(self) -> np.ndarray:
        """Per-entry partition id (index into PARTITIONS)."""
        idx = np.empty(self.size, dtype=np.int64)
        for sl, _, part in self.layout.values():
            idx[sl] = PARTITIONS.index(part)
        return idx

    def partition(self, name: str) -> torch.Tensor:
        return self.theta[self.partition_mask({name})]

    def checksum(self, name: str) -> str:
        data = self.partition(name).detach().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()

    def view(self, name: str, theta: torch.Tensor | None = None) -> torch.Tensor:
        sl, shape, _ = self.layout[name]
        t = self.theta if theta is None else theta
        return t[sl].reshape(shape)

    def species_index(self, species) -> torch.Tensor:
        lookup = {s: k for k, s in enumerate(self.config.species)}
        try:
            return torch.tensor([lookup[s] for s in species], dtype=torch.long)
        except KeyError as err:
            raise StructureError(f"unknown species {err.args[0]!r} for this model") from None

    def set_readout_bias(self, head: str, value: float) -> None:
        sl, _, _ = self.layout[f"{head}.b_out"]
        self.theta[sl] = float(value)

    def save(self, path) -> None:
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "layout": [[n, sl.start, sl.stop, list(shape), part] for n, (sl, shape, part) in self.layout.items()],
        }
        np.savez(
            path,
            meta=np.array(json.dumps(meta)),
            theta=self.theta.detach().numpy(),
            partition_index=self.partition_index(),
        )

    @classmethod
    def load(cls, path) -> ModelParams:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            theta = torch.from_numpy(data["theta"].copy())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg = ArchConfig(**{**meta["config"], "species": tuple(meta["config"]["species"])})
        layout = {n: (slice(a, b), tuple(shape), part) for n, a, b, shape, part in meta["layout"]}
        return cls(cfg, theta, layout)


def envelope(r, r_cut: float, exponent: int = 5):
    """Polynomial cutoff 1 + a x^p + b x^(p+1) + c x^(p+2), x = r / r_cut.

    Equals 1 at r = 0; value, slope and curvature vanish at r_cut; zero beyond.
    Works on floats, numpy arrays and torch tensors.
    """
    p = exponent
    a = -(p + 1) * (p + 2) / 2
    b = p * (p + 2)
    c = -p * (p + 1) / 2
    x = r / r_cut
    val = 1 + a * x**p + b * x ** (p + 1) + c * x ** (p + 2)
    if isinstance(r, torch.Tensor):
        return torch.where(x < 1, val, torch.zeros_like(val))
    return np.where(x < 1, val, 0.0) if isinstance(r, np.ndarray) else (val if x < 1 else 0.0)


def envelope_derivative(r: float, r_cut: float, exponent: int = 5) -> float:
    p = exponent
    a = -(p + 1) * (p + 2) / 2
    b = p * (p + 2)
    c = -p * (p + 1) / 2
    x = r / r_cut
    if x >= 1:
        return 0.0
    return (a * p * x ** (p - 1) + b * (p + 1) * x**p + c * (p + 2) * x ** (p + 1)) / r_cut


def rbf_centers(config: ArchConfig) -> tuple[torch.Tensor, float]:
    """Gaussian centers spanning [0, cutoff] of the architecture, and their width."""
    k = config.n_radial_basis
    centers = torch.linspace(0.0, config.cutoff, k)
    width = config.cutoff / max(k - 1, 1)
    return centers, width


def radial_basis(r: torch.Tensor, config: ArchConfig) -> torch.Tensor:
    centers, width = rbf_centers(config)
    return torch.exp(-(((r[:, None] - centers[None, :]) / width) ** 2))


def ssp(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(x) - LN2


@dataclass
class GraphBatch:
    """Several structures concatenated into one disjoint graph."""

    positions: torch.Tensor
    species: torch.Tensor
    recv: torch.Tensor
    send: torch.Tensor
    batch: torch.Tensor
    n_structures: int
    cutoff: float

    @classmethod
    def build(cls, params: ModelParams, structures, cutoff: float | None = None) -> GraphBatch:
        cutoff = params.config.cutoff if cutoff is None else float(cutoff)
        pos, spec, recv, send, batch = [], [], [], [], []
        offset = 0
        for k, s in enumerate(structures):
            g = build_radius_graph(s, cutoff)
            r, se = g.edge_index()
            recv.append(r + offset)
            send.append(se + offset)
            pos.append(np.asarray(s.positions))
            spec.append(params.species_index(s.species))
            batch.append(np.full(s.n_atoms, k))
            offset += s.n_atoms
        return cls(
            positions=torch.from_numpy(np.concatenate(pos)),
            species=torch.cat(spec),
            recv=torch.from_numpy(np.concatenate(recv)),
            send=torch.from_numpy(np.concatenate(send)),
            batch=torch.from_numpy(np.concatenate(batch)),
            n_structures=len(structures),
            cutoff=cutoff,
        )


def _edge_terms(params, theta, positions, recv, send, cutoff):
    vec = positions[send] - positions[recv]
    r = torch.sqrt((vec * vec).sum(dim=1))
    env = envelope(r, cutoff, params.config.envelope_exponent)
    return radial_basis(r, params.config) * env[:, None]


def representation(params: ModelParams, theta, gb: GraphBatch, positions) -> torch.Tensor:
    emb = params.view("embedding", theta)[gb.species]
    basis = _edge_terms(params, theta, positions, gb.recv, gb.send, gb.cutoff)
    msg = (basis @ params.view("rbf_mix", theta)) * emb[gb.send]
    h = emb.index_add(0, gb.recv, msg)
    for b in range(params.config.repr_blocks):
        w_self = params.view(f"block{b}.w_self", theta)
        b_self = params.view(f"block{b}.b_self", theta)
        filt = basis @ params.view(f"block{b}.w_rbf", theta)
        m = filt * (h @ params.view(f"block{b}.w_msg", theta))[gb.send]
        pre = (h @ w_self + b_self).index_add(0, gb.recv, m)
        h = h + ssp(pre)
    return h


def head_energy(params: ModelParams, theta, h: torch.Tensor, head: str) -> torch.Tensor:
    z = h
    for layer in range(params.config.head_blocks):
        z = ssp(z @ params.view(f"{head}.w{layer}", theta) + params.view(f"{head}.b{layer}", theta))
    return z @ params.view(f"{head}.w_out", theta) + params.view(f"{head}.b_out", theta)


def batch_energy_forces(
    params: ModelParams,
    gb: GraphBatch,
    head: str,
    theta: torch.Tensor | None = None,
    create_graph: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-structure energies (S,) and per-atom forces (N, 3) for one head."""
    if head not in HEADS:
        raise ValueError(f"head must be one of {sorted(HEADS)}")
    theta = params.theta if theta is None else theta
    positions = gb.positions.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        h = representation(params, theta, gb, positions)
        atom_e = head_energy(params, theta, h, head)
        energies = torch.zeros(gb.n_structures).index_add(0, gb.batch, atom_e)
        (grad,) = torch.autograd.grad(
            energies.sum(), positions, create_graph=create_graph
        )
    if not create_graph:
        return energies.detach(), -grad.detach()
    return energies, -grad


def featurize(params: ModelParams, structure: Structure, graph=None) -> np.ndarray:
    """Per-atom descriptors x_i (embedding plus envelope-weighted neighbor sum)."""
    cutoff = params.config.cutoff if graph is None else graph.cutoff
    if graph is not None and graph.n != structure.n_atoms:
        raise StructureError(f"graph has {graph.n} nodes, structure has {structure.n_atoms}")
    gb = GraphBatch.build(params, [structure], cutoff)
    theta = params.theta
    emb = params.view("embedding", theta)[gb.species]
    basis = _edge_terms(params, theta, gb.positions, gb.recv, gb.send, cutoff)
    msg = (basis @ params.view("rbf_mix", theta)) * emb[gb.send]
    return emb.index_add(0, gb.recv, msg).detach().numpy()


def forward_energy_forces(
    params: ModelParams, structure: Structure, head: str = "main", cutoff: float | None = None
) -> tuple[float, np.ndarray]:
    gb = GraphBatch.build(params, [structure], cutoff)
    e, f = batch_energy_forces(params, gb, head)
    return float(e[0]), f.detach().numpy()


@dataclass(frozen=True)
class LossWeights:
    energy: float = 1.0
    forces: float = 100.0


def batch_loss(
    params: ModelParams,
    gb: GraphBatch,
    energies: torch.Tensor,
    forces: torch.Tensor,
    head: str,
    weights: LossWeights,
    theta: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over structures of lam_E (E - E^)^2 + lam_F sum_i |F_i - F^_i|^2."""
    e_hat, f_hat = batch_energy_forces(params, gb, head, theta=theta, create_graph=True)
    de = (e_hat - energies) ** 2
    df = torch.zeros(gb.n_structures).index_add(0, gb.batch, ((f_hat - forces) ** 2).sum(dim=1))
    return (weights.energy * de + weights.forces * df).mean()


def label_tensors(labeled, task: str) -> tuple[torch.Tensor, torch.Tensor]:
    es, fs = [], []
    for item in labeled:
        e, f = item.labels_for(task)
        es.append(e)
        fs.append(np.asarray(f))
    return torch.tensor(es), torch.from_numpy(np.concatenate(fs))


def loss_and_grad(
    params: ModelParams, labeled, head: str, weights: LossWeights = LossWeights(),
    cutoff: float | None = None,
) -> tuple[float, torch.Tensor]:
    """Loss value and its gradient w.r.t. the flat parameter vector."""
    task = head
    gb = GraphBatch.build(params, [x.structure for x in labeled], cutoff)
    energies, forces = label_tensors(labeled, task)
    theta = params.theta.detach().clone().requires_grad_(True)
    loss = batch_loss(params, gb, energies, forces, head, weights, theta=theta)
    (grad,) = torch.autograd.grad(loss, theta)
    return float(loss), grad


def grad_params(
    params: ModelParams,
    structure: Structure,
    labels: tuple[float, np.ndarray],
    head: str,
    loss_weights: LossWeights = LossWeights(),
    mask: set[str] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the single-structure supervised loss, plus the partition index.

    Partitions named in ``mask`` have their slice zeroed.
    """
    energy, forces = labels
    forces = np.asarray(forces, dtype=float)
    if forces.shape != (structure.n_atoms, 3):
        raise StructureError("label forces do not match structure size")
    gb = GraphBatch.build(params, [structure])
    theta = params.theta.detach().clone().requires_grad_(True)
    loss = batch_loss(
        params, gb, torch.tensor([float(energy)]), torch.from_numpy(forces), head, loss_weights, theta=theta
    )
    (grad,) = torch.autograd.grad(loss, theta)
    if mask:
        grad = grad.masked_fill(params.partition_mask(mask), 0.0)
    return grad.numpy(), params.partition_index()


class ForceField:
    """Model bound to a head and a graph cutoff; callable on positions.

    The cutoff (and therefore the envelope) is fixed at construction, which is
    how a refined radius is held constant over a simulation.
    """

    def __init__(self, params: ModelParams, species, head: str = "main", cutoff: float | None = None):
        self.params = params
        self.species = tuple(species)
        self.head = head
        self.cutoff = params.config.cutoff if cutoff is None else float(cutoff)
        self._species_idx = params.species_index(self.species)

    def __call__(self, positions: np.ndarray) -> tuple[float, np.ndarray]:
        s = Structure(self.species, positions)
        gb = GraphBatch.build(self.params, [s], self.cutoff)
        e, f = batch_energy_forces(self.params, gb, self.head)
        return float(e[0]), f.detach().numpy()

    def predict(self, structure: Structure) -> tuple[float, np.ndarray]:
        return forward_energy_forces(self.params, structure, self.head, self.cutoff)


def predict(
    params: ModelParams, structures, head: str = "main", cutoff: float | None = None,
    chunk: int = 64,
) -> list[tuple[float, np.ndarray]]:
    """Batched (E, F) predictions, one tuple per structure."""
    out = []
    structures = list(structures)
    for start in range(0, len(structures), chunk):
        part = structures[start : start + chunk]
        gb = GraphBatch.build(params, part, cutoff)
        e, f = batch_energy_forces(params, gb, head)
        f = f.numpy()
        offset = 0
        for k, s in enumerate(part):
            out.append((float(e[k]), f[offset : offset + s.n_atoms]))
            offset += s.n_atoms
    return out


def force_mae(
    params: ModelParams, labeled, head: str = "main", cutoff: float | None = None
) -> float:
    """Mean absolute force-component error (eV/A) over a labeled set."""
    preds = predict(params, [x.structure for x in labeled], head, cutoff)
    task = "main" if head == "main" else "prior"
    errs = [np.abs(f - x.labels_for(task)[1]).ravel() for (_, f), x in zip(preds, labeled)]
    return float(np.concatenate(errs).mean())


def per_structure_force_mae(
    params: ModelParams, labeled, head: str = "main", cutoff=None
) -> np.ndarray:
    """Force MAE per structure; ``cutoff`` may be a scalar or one value per structure."""
    labeled = list(labeled)
    if cutoff is None or np.isscalar(cutoff):
        preds = predict(params, [x.structure for x in labeled], head, cutoff)
    else:
        preds = [None] * len(labeled)
        for c in sorted(set(map(float, cutoff))):
            idx = [k for k, ck in enumerate(cutoff) if float(ck) == c]
            for k, p in zip(idx, predict(params, [labeled[k].structure for k in idx], head, c)):
                preds[k] = p
    task = "main" if head == "main" else "prior"
    return np.array(
        [np.abs(f - x.labels_for(task)[1]).mean() for (_, f), x in zip(preds, labeled)]
    )
