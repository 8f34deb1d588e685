"""Test-time training on prior labels of unlabeled test structures."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import torch

from .model import LossWeights, ModelParams, predict
from .potentials import PairParams, label_with_prior
from .structures import group_by_system
from .training import FlatOptimizer, task_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TTTConfig:
    steps: int = 250
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.001
    early_stop_patience: int = 10
    min_delta: float = 1e-6
    early_stop_target_loss: float | None = None
    batch_size: int | None = None  # None: the whole adaptation set each step
    loss_weights: LossWeights = LossWeights()
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


# SGD + momentum 0.9 + weight decay 1e-3 in all three.
PRESETS = {
    "spice": TTTConfig(steps=250, learning_rate=1e-4),
    "md17": TTTConfig(steps=3000, learning_rate=1e-3),
    "md22": TTTConfig(steps=50, learning_rate=1e-5),
}


def preset(name: str, **overrides) -> TTTConfig:
    try:
        return replace(PRESETS[name], **overrides)
    except KeyError:
        raise ValueError(f"unknown TTT preset {name!r}; choose from {sorted(PRESETS)}") from None


def ttt_adapt(
    model: ModelParams, test_structures, prior: PairParams, config: TTTConfig
) -> tuple[ModelParams, list[float]]:
    """Fit the representation to prior labels of ``test_structures``.

    Only the representation partition moves; both heads come back
    bit-identical. Stops after ``config.steps`` updates, when the prior loss
    has not improved by ``min_delta`` for ``early_stop_patience`` steps, or
    once it reaches ``early_stop_target_loss``. The history holds the prior
    loss evaluated before each update and once after the last one.
    """
    structures = list(test_structures)
    if not structures:
        raise ValueError("no test structures to adapt on")
    labeled = [label_with_prior(s, prior) for s in structures]
    adapted = model.copy()
    history: list[float] = []
    if config.steps == 0:
        return adapted, history

    trainable = adapted.partition_mask({"repr"})
    opt = FlatOptimizer(
        "sgd_momentum", config.learning_rate, config.momentum, config.weight_decay, trainable
    )
    rng = np.random.default_rng(config.seed)
    bs = len(labeled) if config.batch_size is None else min(config.batch_size, len(labeled))
    theta = adapted.theta
    best = float("inf")
    stale = 0
    order: list[int] = []
    for step in range(config.steps):
        if bs == len(labeled):
            batch = labeled
        else:
            if len(order) < bs:
                order.extend(rng.permutation(len(labeled)).tolist())
            batch = [labeled[k] for k in order[:bs]]
            del order[:bs]
        th = theta.detach().clone().requires_grad_(True)
        loss, _ = task_loss(adapted, batch, "prior", config.loss_weights, theta=th)
        value = float(loss.detach())
        history.append(value)
        if config.early_stop_target_loss is not None and value <= config.early_stop_target_loss:
            log.info("TTT reached target prior loss %.4g at step %d", value, step)
            return adapted, history
        if value < best - config.min_delta:
            best, stale = value, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                log.info("TTT prior loss stalled at step %d", step)
                return adapted, history
        (grad,) = torch.autograd.grad(loss, th)
        with torch.no_grad():
            opt.step(theta, grad)
    final, _ = task_loss(adapted, labeled, "prior", config.loss_weights)
    history.append(float(final.detach()))
    return adapted, history


def predict_after_ttt(adapted: ModelParams, structures, cutoff: float | None = None):
    """Main-head (E, F) per structure using the adapted representation."""
    return predict(adapted, list(structures), "main", cutoff)


def ttt_per_system(
    model: ModelParams, structures, prior: PairParams, config: TTTConfig
) -> dict[str, tuple[ModelParams, list[float]]]:
    """One adaptation per system_id, each restarted from ``model``."""
    return {
        sid: ttt_adapt(model, group, prior, config)
        for sid, group in group_by_system(structures).items()
    }
