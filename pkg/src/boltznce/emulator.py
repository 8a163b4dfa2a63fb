"""Flow-based Boltzmann emulator: training, sampling and exact likelihoods.

Convention: ``x0`` is data (t=0), ``x1 ~ N(0, I)`` is the prior (t=1).
Sampling integrates the probability-flow ODE from t=1 down to ``t_min``
(0 for vector-field models, 1e-3 for endpoint models).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .coupling import couple
from .diffnet import MlpModel, flat_parameters, load_checkpoint, save_checkpoint
from .errors import NumericalError
from .interpolant import (
    ENDPOINT_T_MIN,
    InterpolantSchedule,
    endpoint_coefficient,
    endpoint_vector_field,
    interpolate,
    make_schedule,
)
from .io import coordinate_columns, read_csv, read_json, write_csv, write_json
from .ode import integrate, integrate_with_logdet
from .training import FitResult, TrainConfig, fit

__all__ = [
    "FlowModel",
    "EmulatorSampleSet",
    "NllResult",
    "vector_field_loss",
    "endpoint_loss",
    "cfm_loss",
    "train_vector_field",
    "train_endpoint",
    "train_cfm",
    "train_emulator",
    "sample",
    "exact_log_likelihood",
    "standard_normal_logpdf",
    "nll",
    "OBJECTIVES",
]

OBJECTIVES = ("vector_field", "endpoint", "cfm")


def standard_normal_logpdf(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return -0.5 * (x**2).sum(-1) - 0.5 * x.shape[-1] * math.log(2 * math.pi)


@dataclass
class FlowModel:
    """A trained (or untrained) flow; the network output is a velocity or an endpoint guess."""

    net: MlpModel
    parameterization: str = "vector_field"
    schedule: InterpolantSchedule = field(default_factory=InterpolantSchedule)
    objective: str = "vector_field"
    cfm_sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.parameterization not in ("vector_field", "endpoint"):
            raise ValueError("parameterization must be 'vector_field' or 'endpoint'")
        self.schedule = make_schedule(self.schedule)

    @property
    def dim(self) -> int:
        return self.net.dim

    @property
    def t_min(self) -> float:
        return ENDPOINT_T_MIN if self.parameterization == "endpoint" else 0.0

    @property
    def likelihood_is_approximate(self) -> bool:
        return self.parameterization == "endpoint"

    def velocity(self, t, x: torch.Tensor) -> torch.Tensor:
        out = self.net(t, x)
        if self.parameterization == "endpoint":
            return endpoint_vector_field(self.schedule, t, x, out)
        return out

    def model_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.net.architecture(), sort_keys=True).encode())
        h.update(flat_parameters(self.net).numpy().astype(np.float64).tobytes())
        return h.hexdigest()[:16]

    def header(self) -> dict:
        return {"parameterization": self.parameterization, "schedule": self.schedule.kind,
                "objective": self.objective, "cfm_sigma": self.cfm_sigma, "meta": self.meta}

    def save(self, path, trainer=None) -> None:
        save_checkpoint(path, self.net, kind="flow", extra=self.header(), trainer=trainer)

    @classmethod
    def load(cls, path, weights: str | None = None) -> "FlowModel":
        net, doc = load_checkpoint(path, weights)
        if doc["kind"] != "flow":
            raise ValueError(f"{path} holds a {doc['kind']!r} checkpoint, not a flow")
        ex = doc["extra"]
        return cls(net, ex["parameterization"], make_schedule(ex["schedule"]), ex["objective"],
                   ex.get("cfm_sigma", 0.0), ex.get("meta", {}))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def _t(a, like: MlpModel):
    return torch.as_tensor(np.asarray(a), dtype=like.dtype)


def vector_field_loss(net, schedule, t, x0, x1):
    """Mean ``|v(t, x_t) - (alpha_dot x0 + sigma_dot x1)|^2``."""
    x_t = interpolate(schedule, t, x0, x1)
    tc = t[:, None]
    target = schedule.alpha_dot(tc) * x0 + schedule.sigma_dot(tc) * x1
    return ((net(t, x_t) - target) ** 2).sum(1).mean()


def endpoint_loss(net, schedule, t, x0, x1):
    """Mean ``t_w |x0_hat(t, x_t) - x0|^2`` with the clamped endpoint weight ``t_w``."""
    x_t = interpolate(schedule, t, x0, x1)
    weight = endpoint_coefficient(schedule, t)
    return (weight * ((net(t, x_t) - x0) ** 2).sum(1)).mean()


def cfm_loss(net, t, x0, x1, sigma: float, noise):
    """Mean ``|v(t, x) - (x1 - x0)|^2`` with ``x ~ N(t x1 + (1-t) x0, sigma^2)``."""
    tc = t[:, None]
    x = tc * x1 + (1 - tc) * x0 + sigma * noise
    return ((net(t, x) - (x1 - x0)) ** 2).sum(1).mean()


def _pair(x0, rng, coupling_mode):
    x1 = rng.standard_normal(x0.shape)
    return x0, couple(coupling_mode, x0, x1).apply(x1)


def train_emulator(data, objective: str = "vector_field", schedule="linear",
                   coupling_mode: str = "ot", config: TrainConfig | None = None,
                   cfm_sigma: float = 0.0) -> tuple[FlowModel, FitResult]:
    """Train a flow on ``data`` (an ``(n, dim)`` array of x0 samples)."""
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    config = config or TrainConfig()
    data = np.asarray(data, dtype=float)
    schedule = make_schedule("linear" if objective == "cfm" else schedule)
    if cfm_sigma < 0:
        raise ValueError("cfm sigma must be non-negative")
    net = config.make_net(data.shape[1], data.shape[1])
    lo, hi = config.t_eps, 1.0 - config.t_eps

    def batch_loss(model, x0, rng):
        x0, x1 = _pair(x0, rng, coupling_mode)
        t = rng.uniform(lo, hi, size=len(x0))
        x0, x1, t = _t(x0, model), _t(x1, model), _t(t, model)
        if objective == "vector_field":
            return vector_field_loss(model, schedule, t, x0, x1)
        if objective == "endpoint":
            return endpoint_loss(model, schedule, t, x0, x1)
        noise = _t(rng.standard_normal(x0.shape), model)
        return cfm_loss(model, t, x0, x1, cfm_sigma, noise)

    rng = np.random.default_rng(config.seed)
    result = fit(net, data, batch_loss, config, rng)
    parameterization = "endpoint" if objective == "endpoint" else "vector_field"
    meta = {"train": config.to_dict(), "coupling": coupling_mode, "fit": result.summary()}
    model = FlowModel(net, parameterization, schedule, objective, cfm_sigma, meta)
    return model, result


def train_vector_field(data, schedule="linear", coupling_mode="ot", config=None):
    return train_emulator(data, "vector_field", schedule, coupling_mode, config)


def train_endpoint(data, schedule="linear", coupling_mode="ot", config=None):
    return train_emulator(data, "endpoint", schedule, coupling_mode, config)


def train_cfm(data, sigma: float = 0.0, config=None, coupling_mode="ot"):
    return train_emulator(data, "cfm", "linear", coupling_mode, config, cfm_sigma=sigma)


# ---------------------------------------------------------------------------
# Sampling and likelihoods
# ---------------------------------------------------------------------------


@dataclass
class EmulatorSampleSet:
    samples: np.ndarray
    loglik: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def columns(self) -> dict:
        cols = {f"x_{i}": self.samples[:, i] for i in range(self.samples.shape[1])}
        if self.loglik is not None:
            cols["loglik"] = self.loglik
        return cols

    def to_csv(self, path) -> None:
        """Write ``path`` plus a JSON metadata sidecar next to it."""
        path = Path(path)
        write_csv(path, self.columns())
        write_json(path.with_suffix(".json"), self.meta)

    @classmethod
    def from_csv(cls, path) -> "EmulatorSampleSet":
        path = Path(path)
        table = read_csv(path)
        side = path.with_suffix(".json")
        meta = read_json(side) if side.exists() else {}
        return cls(coordinate_columns(table), table.get("loglik"), meta)


def _chunks(n, size):
    size = n if not size else int(size)
    for start in range(0, n, max(size, 1)):
        yield slice(start, min(start + size, n))


def sample(model: FlowModel, n: int, seed: int, atol: float = 1e-5, rtol: float = 1e-5,
           with_loglik: bool = False, divergence_mode: str = "exact_autodiff",
           chunk_size: int | None = None) -> EmulatorSampleSet:
    """Push ``n`` prior draws (seeded) through the flow from t=1 to ``model.t_min``."""
    meta = {"seed": int(seed), "atol": atol, "rtol": rtol, "model_hash": model.model_hash(),
            "t_min": model.t_min, "with_loglik": with_loglik,
            "loglik_approximate": bool(with_loglik and model.likelihood_is_approximate)}
    if n == 0:
        return EmulatorSampleSet(np.zeros((0, model.dim)), np.zeros(0) if with_loglik else None, meta)
    x1 = np.random.default_rng(seed).standard_normal((n, model.dim))
    out, logliks = [], []
    with torch.no_grad():
        for sl in _chunks(n, chunk_size):
            x = _t(x1[sl], model.net)
            try:
                if with_loglik:
                    res = integrate_with_logdet(model.velocity, 1.0, model.t_min, x,
                                                divergence_mode, atol, rtol)
                    out.append(res.x.numpy())
                    logliks.append(standard_normal_logpdf(x1[sl]) + res.delta_logp.numpy())
                else:
                    sol = integrate(model.velocity, 1.0, model.t_min, x, atol=atol, rtol=rtol)
                    out.append(sol.y.numpy())
            except NumericalError as err:
                raise type(err)(f"sampling with seed {seed} failed: {err}") from err
    samples = np.concatenate(out)
    return EmulatorSampleSet(samples, np.concatenate(logliks) if with_loglik else None, meta)


def exact_log_likelihood(model: FlowModel, x, atol: float = 1e-5, rtol: float = 1e-5,
                         divergence_mode: str = "exact_autodiff",
                         chunk_size: int | None = None) -> np.ndarray:
    """``log p(x) = log q(x1) + ∫_{t_min}^1 div v dt`` by integrating x up to t=1.

    Endpoint models start at t=1e-3, so their values are approximate
    (``model.likelihood_is_approximate``).
    """
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return np.zeros(0)
    result = []
    for sl in _chunks(len(x), chunk_size):
        res = integrate_with_logdet(model.velocity, model.t_min, 1.0, _t(x[sl], model.net),
                                    divergence_mode, atol, rtol)
        div = res.delta_logp.numpy()
        if not np.all(np.isfinite(div)):
            raise NumericalError("non-finite divergence integral")
        result.append(standard_normal_logpdf(res.x.numpy()) - div)
    return np.concatenate(result)


@dataclass
class NllResult:
    """``std`` is the per-sample spread over the whole hold-out set;
    ``batch_std`` the spread of per-batch means."""

    mean: float
    std: float
    batch_std: float
    n: int
    n_batches: int
    approximate: bool

    def to_dict(self):
        return dict(self.__dict__)


def nll(model: FlowModel, holdout, batch_size: int = 1000, atol: float = 1e-5,
        rtol: float = 1e-5, divergence_mode: str = "exact_autodiff") -> NllResult:
    holdout = np.asarray(holdout, dtype=float)
    if len(holdout) == 0:
        raise ValueError("nll needs at least one sample")
    values = -exact_log_likelihood(model, holdout, atol, rtol, divergence_mode,
                                   chunk_size=batch_size)
    means = [values[sl].mean() for sl in _chunks(len(values), batch_size)]
    return NllResult(float(values.mean()), float(values.std()), float(np.std(means)),
                     len(values), len(means), model.likelihood_is_approximate)
