"""Supervised, prior-pretraining and joint training regimes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .model import (
    PARTITIONS,
    GraphBatch,
    LossWeights,
    ModelParams,
    batch_loss,
    force_mae,
    label_tensors,
)
from .structures import StructureError

log = logging.getLogger(__name__)

TASK_HEADS = {"main": ("main",), "prior": ("prior",), "joint": ("main", "prior")}


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 1000
    loss_weights: LossWeights = LossWeights()
    seed: int = 0
    freeze: frozenset[str] = frozenset()
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "freeze", frozenset(self.freeze))
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not self.freeze <= set(PARTITIONS):
            raise ValueError(f"unknown partitions in freeze: {sorted(self.freeze - set(PARTITIONS))}")
        if self.freeze == set(PARTITIONS):
            raise ValueError("cannot freeze every partition")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)


class FlatOptimizer:
    """SGD-momentum or Adam on a flat vector; frozen entries are never written.

    Weight decay is decoupled (applied to the parameters, not the gradient)
    and only touches trainable entries.
    """

    def __init__(self, kind, lr, momentum, weight_decay, trainable: torch.Tensor):
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.idx = torch.nonzero(trainable).squeeze(1)
        n = len(self.idx)
        self.buf = torch.zeros(n)
        self.v = torch.zeros(n)
        self.t = 0

    def step(self, theta: torch.Tensor, grad: torch.Tensor) -> None:
        g = grad[self.idx]
        p = theta[self.idx]
        self.t += 1
        if self.kind == "sgd_momentum":
            self.buf = self.momentum * self.buf + g
            update = self.buf
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            self.buf = b1 * self.buf + (1 - b1) * g
            self.v = b2 * self.v + (1 - b2) * g * g
            mhat = self.buf / (1 - b1**self.t)
            vhat = self.v / (1 - b2**self.t)
            update = mhat / (torch.sqrt(vhat) + eps)
        p = p - self.lr * self.weight_decay * p - self.lr * update
        theta[self.idx] = p


def _check_labels(data, task):
    for x in data:
        for head in TASK_HEADS[task]:
            x.labels_for(head)  # raises StructureError when missing


def task_loss(params, batch, task, weights, theta=None, cutoff=None):
    """L_M, L_P or L_M + L_P on one batch; returns (total, {head: value})."""
    gb = GraphBatch.build(params, [x.structure for x in batch], cutoff)
    parts = {}
    total = 0.0
    for head in TASK_HEADS[task]:
        e, f = label_tensors(batch, head)
        loss = batch_loss(params, gb, e, f, head, weights, theta=theta)
        parts[head] = loss
        total = total + loss
    return total, parts


def init_readout_bias(params: ModelParams, data, heads=("main", "prior")) -> None:
    """Set each head's output bias to the mean per-atom energy of its labels."""
    for head in heads:
        try:
            vals = [x.labels_for(head)[0] / x.structure.n_atoms for x in data]
        except StructureError:
            continue
        params.set_readout_bias(head, float(np.mean(vals)))


def train(params: ModelParams, data, task: str, config: TrainConfig) -> TrainResult:
    """Mini-batch training of ``task`` in {main, prior, joint}.

    Returns a new ModelParams; the input is not modified. Partitions listed
    in ``config.freeze`` come back bit-identical.
    """
    if task not in TASK_HEADS:
        raise ValueError(f"unknown task {task!r}")
    data = list(data)
    if not data:
        raise ValueError("no training data")
    _check_labels(data, task)
    out = params.copy()
    history: list[dict] = []
    if config.steps == 0:
        return TrainResult(out, history)

    trainable = ~out.partition_mask(config.freeze)
    opt = FlatOptimizer(
        config.optimizer, config.learning_rate, config.momentum, config.weight_decay, trainable
    )
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(data))
    order: list[int] = []
    theta = out.theta
    for step in range(1, config.steps + 1):
        if len(order) < bs:
            order.extend(rng.permutation(len(data)).tolist())
        batch = [data[k] for k in order[:bs]]
        del order[:bs]
        th = theta.detach().clone().requires_grad_(True)
        total, parts = task_loss(out, batch, task, config.loss_weights, theta=th)
        (grad,) = torch.autograd.grad(total, th)
        with torch.no_grad():
            opt.step(theta, grad)
        if step == 1 or step % config.log_every == 0 or step == config.steps:
            row = {"step": step, "L_M": float("nan"), "L_P": float("nan")}
            if "main" in parts:
                row["L_M"] = float(parts["main"].detach())
            if "prior" in parts:
                row["L_P"] = float(parts["prior"].detach())
            history.append(row)
            if not math.isfinite(float(total.detach())):
                raise FloatingPointError(f"loss diverged at step {step}")
    return TrainResult(out, history)


def pretrain_freeze_finetune(
    params: ModelParams, prior_data, ref_data, cfg_pre: TrainConfig, cfg_ft: TrainConfig
) -> TrainResult:
    """Phase 1: fit {repr, prior_head} on the prior loss.
    Phase 2: fit main_head on the reference loss with repr and prior_head frozen.
    """
    pre = train(params, prior_data, "prior", replace(cfg_pre, freeze=frozenset({"main_head"})))
    ft = train(pre.params, ref_data, "main", replace(cfg_ft, freeze=frozenset({"repr", "prior_head"})))
    hist = [{**r, "phase": "pretrain"} for r in pre.history]
    hist += [{**r, "phase": "finetune"} for r in ft.history]
    return TrainResult(ft.params, hist)


def nested_subsets(n: int, fractions, seed: int) -> list[tuple[float, np.ndarray]]:
    """Seeded nested index subsets, one per fraction (smaller subset is a prefix)."""
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    for frac in fractions:
        if not 0 < frac <= 1:
            raise ValueError(f"fraction {frac} outside (0, 1]")
        k = int(round(frac * n))
        if k == 0:
            log.warning("fraction %s of %d structures rounds to zero; skipped", frac, n)
            continue
        out.append((float(frac), np.sort(perm[:k])))
    return out


def fine_tune(
    params: ModelParams, new_ref_data, config: TrainConfig, budget_fractions, heldout,
    subset_seed: int = 0,
) -> list[tuple[float, float]]:
    """Fine-tune a copy on nested fractions of ``new_ref_data``.

    Returns (fraction, held-out main-head force MAE) per fraction.
    """
    data = list(new_ref_data)
    curve = []
    for frac, idx in nested_subsets(len(data), budget_fractions, subset_seed):
        res = train(params, [data[k] for k in idx], "main", config)
        curve.append((frac, force_mae(res.params, heldout, "main")))
    return curve


def write_loss_log(history, path) -> None:
    keys = ["step", "L_M", "L_P", "force_mae"]
    extra = sorted({k for r in history for k in r} - set(keys))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys + extra, restval="")
        w.writeheader()
        for r in history:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
