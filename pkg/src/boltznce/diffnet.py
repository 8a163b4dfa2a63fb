"""Small smooth MLPs conditioned on time, plus the training plumbing around them.

The networks are twice differentiable (SiLU or tanh), so losses built on
input gradients can be differentiated again with respect to parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteError, NonFiniteInputError

__all__ = [
    "MlpModel",
    "predict",
    "input_gradient",
    "loss_parameter_gradient",
    "flat_parameters",
    "set_flat_parameters",
    "EmaShadow",
    "PlateauScheduler",
    "Trainer",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_FORMAT = "boltznce.checkpoint"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {"silu": nn.SiLU, "tanh": nn.Tanh}


class MlpModel(nn.Module):
    """``(t, x) -> R^out`` MLP on ``[x, t, sin(w_k t), cos(w_k t)]``.

    ``out_dim=None`` gives a scalar head whose forward returns shape ``(n,)``.
    The last layer is zero-initialised by default so the model starts as the
    zero function.
    """

    def __init__(self, dim: int, out_dim: int | None = None, hidden: Sequence[int] = (128, 128, 128),
                 n_freqs: int = 8, activation: str = "silu", zero_last: bool = True, seed: int = 0,
                 dtype: torch.dtype = torch.float64):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        self.dim = int(dim)
        self.out_dim = None if out_dim is None else int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freqs = int(n_freqs)
        self.activation = activation
        self.zero_last = bool(zero_last)
        self.seed = int(seed)
        self.register_buffer("freqs", math.pi * torch.arange(1, n_freqs + 1, dtype=dtype))

        widths = [self.dim + 1 + 2 * self.n_freqs, *self.hidden, self.out_dim or 1]
        layers: list[nn.Module] = []
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(w_in, w_out, dtype=dtype))
            if i < len(widths) - 2:
                layers.append(_ACTIVATIONS[activation]())
        self.net = nn.Sequential(*layers)
        self.reset_parameters()

    @property
    def dtype(self) -> torch.dtype:
        return self.freqs.dtype

    @property
    def scalar_head(self) -> bool:
        return self.out_dim is None

    def architecture(self) -> dict:
        return {
            "dim": self.dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "n_freqs": self.n_freqs,
            "activation": self.activation,
            "zero_last": self.zero_last,
            "seed": self.seed,
            "dtype": str(self.dtype).replace("torch.", ""),
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "MlpModel":
        arch = dict(arch)
        arch["dtype"] = getattr(torch, arch.get("dtype", "float64"))
        return cls(**arch)

    @torch.no_grad()
    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.seed)
        linears = [m for m in self.net if isinstance(m, nn.Linear)]
        for i, lin in enumerate(linears):
            bound = 1.0 / math.sqrt(lin.in_features)
            if self.zero_last and i == len(linears) - 1:
                lin.weight.zero_()
                lin.bias.zero_()
                continue
            lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen, dtype=torch.float64)
                             .mul(2 * bound).sub(bound))
            lin.bias.copy_(torch.rand(lin.bias.shape, generator=gen, dtype=torch.float64)
                           .mul(2 * bound).sub(bound))

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        wt = t[:, None] * self.freqs
        return torch.cat([t[:, None], torch.sin(wt), torch.cos(wt)], dim=1)

    def forward(self, t, x: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if not (torch.isfinite(x).all() and torch.isfinite(t).all()):
            raise NonFiniteInputError("non-finite input to network")
        out = self.net(torch.cat([x, self.embed_time(t)], dim=1))
        return out[:, 0] if self.scalar_head else out


def predict(model: MlpModel, t, x) -> np.ndarray:
    """Numpy-in, numpy-out evaluation without gradient tracking."""
    x = torch.as_tensor(np.asarray(x), dtype=model.dtype)
    t = torch.as_tensor(np.asarray(t), dtype=model.dtype)
    with torch.no_grad():
        return model(t, x).numpy()


def input_gradient(model: MlpModel, t, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Reverse-mode ``∇_x f(t, x)`` of a scalar-head model, one row per sample."""
    if not model.scalar_head:
        raise ValueError("input_gradient requires a scalar-output model")
    with torch.enable_grad():
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        out = model(t, x)
        (grad,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph)
    return grad


def loss_parameter_gradient(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor]):
    """Exact gradient of ``loss_fn(model)`` with respect to every parameter.

    ``loss_fn`` may contain input gradients built with ``create_graph=True``;
    the second-order pathway is then included.
    """
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss.item()}")
    params = [p for p in model.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def set_flat_parameters(model: nn.Module, flat) -> None:
    flat = torch.as_tensor(flat, dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        torch.nn.utils.vector_to_parameters(flat, model.parameters())


# ---------------------------------------------------------------------------
# Optimisation state
# ---------------------------------------------------------------------------


class EmaShadow:
    """Exponential moving average of parameters, applied every ``every`` calls to ``step``."""

    def __init__(self, model: nn.Module, decay: float = 0.999, every: int = 10):
        if not 0.0 <= decay < 1.0:
            raise ValueError("EMA decay must be in [0, 1)")
        if every < 1:
            raise ValueError("EMA stride must be >= 1")
        self.decay = float(decay)
        self.every = int(every)
        self.calls = 0
        self.updates = 0
        self.shadow = [p.detach().clone() for p in model.parameters()]

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for s, p in zip(self.shadow, model.parameters()):
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)
        self.updates += 1

    def step(self, model: nn.Module) -> None:
        self.calls += 1
        if self.calls % self.every == 0:
            self.update(model)

    @torch.no_grad()
    def copy_to(self, model: nn.Module) -> None:
        for s, p in zip(self.shadow, model.parameters()):
            p.copy_(s)

    def flat(self) -> torch.Tensor:
        return torch.cat([s.reshape(-1) for s in self.shadow])

    def state(self) -> dict:
        return {"decay": self.decay, "every": self.every, "calls": self.calls,
                "updates": self.updates, "shadow": self.flat().tolist()}


class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: torch.optim.Optimizer, patience: int = 20, factor: float = 2.0,
                 min_lr: float = 1e-5):
        self.optimizer = optimizer
        self.patience = int(patience)
        self.factor = float(factor)
        self.min_lr = float(min_lr)
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            new_lr = max(self.lr / self.factor, self.min_lr)
            for group in self.optimizer.param_groups:
                group["lr"] = new_lr
            self.bad_epochs = 0

    def state(self) -> dict:
        return {"patience": self.patience, "factor": self.factor, "min_lr": self.min_lr,
                "best": self.best if math.isfinite(self.best) else None,
                "bad_epochs": self.bad_epochs, "lr": self.lr}


@dataclass
class Trainer:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) with plateau schedule and EMA shadow."""

    model: nn.Module
    lr: float = 1e-3
    patience: int = 20
    factor: float = 2.0
    min_lr: float = 1e-5
    ema_decay: float = 0.999
    ema_every: int = 10
    iteration: int = field(init=False, default=0)
    raw_params: list | None = field(init=False, default=None)

    def __post_init__(self):
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.lr,
                                          betas=(0.9, 0.999), eps=1e-8)
        self.scheduler = PlateauScheduler(self.optimizer, self.patience, self.factor, self.min_lr)
        self.ema = EmaShadow(self.model, self.ema_decay, self.ema_every)

    def apply_gradients(self, grads) -> None:
        for p, g in zip(self.model.parameters(), grads):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
            p.grad = g.detach().clone()
        self.optimizer.step()
        self.iteration += 1
        self.ema.step(self.model)

    def step(self, loss: torch.Tensor) -> float:
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite training loss at iteration {self.iteration}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.iteration += 1
        self.ema.step(self.model)
        return value

    def end_epoch(self, metric: float) -> None:
        self.scheduler.step(metric)

    def optimizer_state(self) -> dict:
        sd = self.optimizer.state_dict()
        state = {
            str(k): {"step": float(v["step"]), "exp_avg": v["exp_avg"].reshape(-1).tolist(),
                     "exp_avg_sq": v["exp_avg_sq"].reshape(-1).tolist()}
            for k, v in sd["state"].items()
        }
        return {"adam": {"state": state, "lr": self.scheduler.lr},
                "scheduler": self.scheduler.state(), "iteration": self.iteration}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: MlpModel, *, kind: str, extra: dict | None = None,
                    trainer: Trainer | None = None, inference_weights: str = "ema") -> None:
    """Write a JSON checkpoint: layer shapes, flat parameters, EMA shadow, optimizer state.

    With a trainer, ``params`` holds the raw training weights (taken from
    ``trainer.raw_params`` when the model already carries the EMA copy) and
    ``inference_weights`` records which set consumers should load.
    """
    raw = getattr(trainer, "raw_params", None)
    flat = (torch.cat([p.reshape(-1) for p in raw]) if raw is not None
            else flat_parameters(model))
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "architecture": model.architecture(),
        "shapes": [[name, list(p.shape)] for name, p in model.named_parameters()],
        "params": flat.tolist(),
        "inference_weights": inference_weights if trainer is not None else "raw",
        "ema": trainer.ema.state() if trainer is not None else None,
        "optimizer": trainer.optimizer_state() if trainer is not None else None,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path, weights: str | None = None) -> tuple[MlpModel, dict]:
    """Return ``(model, document)``; ``weights`` overrides the recorded choice ('ema'|'raw')."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = MlpModel.from_architecture(doc["architecture"])
    shapes = [[n, list(p.shape)] for n, p in model.named_parameters()]
    if shapes != doc["shapes"]:
        raise ValueError("checkpoint layer shapes do not match the architecture")
    which = weights or doc.get("inference_weights", "raw")
    if which == "ema" and doc.get("ema"):
        set_flat_parameters(model, doc["ema"]["shadow"])
    else:
        set_flat_parameters(model, doc["params"])
    model.eval()
    return model, doc
