"""Epoch loop shared by the flow and energy models."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .diffnet import MlpModel, Trainer
from .errors import NonFiniteError

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "fit", "FitResult"]


@dataclass
class TrainConfig:
    """Optimisation and architecture settings.

    ``early_stop`` is the number of epochs without validation improvement
    after which training stops (0 disables it). ``lr_schedule`` is
    ``"plateau"`` (divide by ``lr_factor`` after ``lr_patience`` flat epochs)
    or ``"cosine"`` (anneal from ``lr`` to ``min_lr`` over ``epochs``).
    """

    epochs: int = 1000
    batch_size: int = 512
    lr: float = 1e-3
    min_lr: float = 1e-5
    lr_patience: int = 20
    lr_factor: float = 2.0
    lr_schedule: str = "plateau"
    ema_decay: float = 0.999
    ema_every: int = 10
    early_stop: int = 100
    val_fraction: float = 0.1
    hidden: tuple = (128, 128, 128)
    n_freqs: int = 8
    activation: str = "silu"
    t_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr_schedule not in ("plateau", "cosine"):
            raise ValueError("lr_schedule must be 'plateau' or 'cosine'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def make_net(self, dim: int, out_dim: int | None) -> MlpModel:
        return MlpModel(dim, out_dim, hidden=self.hidden, n_freqs=self.n_freqs,
                        activation=self.activation, seed=self.seed)


@dataclass
class FitResult:
    trainer: Trainer
    history: list = field(default_factory=list)
    stopped_early: bool = False

    def summary(self) -> dict:
        last = self.history[-1] if self.history else {}
        return {"epochs_run": len(self.history), "stopped_early": self.stopped_early,
                "final_train_loss": last.get("train_loss"), "final_val_loss": last.get("val_loss"),
                "final_lr": last.get("lr"), "iterations": self.trainer.iteration}


BatchLoss = Callable[[torch.nn.Module, np.ndarray, np.random.Generator], torch.Tensor]


def fit(model: torch.nn.Module, data: np.ndarray, batch_loss: BatchLoss, config: TrainConfig,
        rng: np.random.Generator) -> FitResult:
    """Minimise ``batch_loss`` over epochs of shuffled mini-batches of ``data``.

    A fixed validation split is scored every epoch with the same random draws,
    so epoch-to-epoch comparisons are not dominated by sampling noise. On
    return the model holds the EMA weights.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or len(data) < 2:
        raise ValueError("training data must be an (n >= 2, dim) array")
    order = rng.permutation(len(data))
    n_val = int(round(config.val_fraction * len(data)))
    val, train = data[order[:n_val]], data[order[n_val:]]
    val_seed = int(rng.integers(2**63 - 1))
    batch = min(config.batch_size, len(train))
    n_batches = max(len(train) // batch, 1)

    trainer = Trainer(model, lr=config.lr, patience=config.lr_patience, factor=config.lr_factor,
                      min_lr=config.min_lr, ema_decay=config.ema_decay, ema_every=config.ema_every)
    result = FitResult(trainer)
    best_val, since_best = math.inf, 0

    for epoch in range(config.epochs):
        if config.lr_schedule == "cosine":
            lr = config.min_lr + 0.5 * (config.lr - config.min_lr) * (
                1 + math.cos(math.pi * epoch / config.epochs))
            for group in trainer.optimizer.param_groups:
                group["lr"] = lr
        perm = rng.permutation(len(train))
        total = 0.0
        for b in range(n_batches):
            x0 = train[perm[b * batch:(b + 1) * batch]]
            total += trainer.step(batch_loss(model, x0, rng))
        train_loss = total / n_batches

        val_loss = None
        if n_val >= 2:
            val_loss = _score(model, val, batch_loss, val_seed, batch)
            if not math.isfinite(val_loss):
                raise NonFiniteError(f"validation loss became non-finite at epoch {epoch}")
        metric = val_loss if val_loss is not None else train_loss
        trainer.end_epoch(metric)
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                               "lr": trainer.scheduler.lr})
        if metric < best_val:
            best_val, since_best = metric, 0
        else:
            since_best += 1
        if config.early_stop and since_best >= config.early_stop:
            result.stopped_early = True
            log.info("early stop at epoch %d (best %.5g)", epoch, best_val)
            break

    trainer.raw_params = [p.detach().clone() for p in model.parameters()]
    trainer.ema.copy_to(model)
    return result


def _score(model, val, batch_loss, seed, batch) -> float:
    rng = np.random.default_rng(seed)
    losses, weights = [], []
    for start in range(0, len(val), batch):
        chunk = val[start:start + batch]
        if len(chunk) < 2:
            continue
        loss = batch_loss(model, chunk, rng)
        losses.append(float(loss.detach()))
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))
