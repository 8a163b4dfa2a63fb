"""Time-conditioned energy-based model trained with InfoNCE over time and score matching.

``E(t, x)`` is an unnormalised log-density of the interpolant marginal at
time ``t``: ``log p(t, x) = E(t, x) - log Z(t)``. ``Z(t)`` is never
computed; every consumer (InfoNCE, scores, self-normalised weights) is
invariant to it. ``E(0, x)`` is the learned log-density of the data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .coupling import couple
from .errors import NonFiniteError, NonFiniteInputError
from .diffnet import MlpModel, input_gradient, load_checkpoint, save_checkpoint
from .interpolant import InterpolantSchedule, interpolate, make_schedule
from .training import FitResult, TrainConfig, fit

__all__ = [
    "EbmConfig",
    "EnergyModel",
    "NegativeTimeSampler",
    "info_nce_loss",
    "time_log_density",
    "score_matching_loss",
    "ebm_batch_loss",
    "train_ebm",
    "log_density",
    "ABLATION_VARIANTS",
]

ABLATION_VARIANTS = {
    "both": (1.0, 1.0),
    "nce_only": (0.0, 1.0),
    "sm_only": (1.0, 0.0),
}


@dataclass
class EbmConfig:
    """Loss settings; weights multiply the score-matching and InfoNCE terms.

    ``coupling`` defaults to independent pairing: the score-matching target
    ``-x1 / sigma`` is the marginal score only when ``x1`` is independent of
    ``x0``, and a mini-batch OT pairing biases it. Training times are drawn
    as ``u ** time_power`` with ``u`` uniform, which puts more draws near the
    data end where the density is sharpest.
    """

    negatives_count: int = 1
    negatives_std: float = 0.025
    sm_weight: float = 1.0
    nce_weight: float = 1.0
    schedule: str = "trig"
    coupling: str = "independent"
    time_power: float = 3.0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.negatives_count < 1:
            raise ValueError("need at least one negative time per sample")
        if not self.negatives_std > 0:
            raise ValueError("negatives_std must be positive")
        if self.sm_weight < 0 or self.nce_weight < 0 or self.sm_weight + self.nce_weight == 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    @classmethod
    def variant(cls, name: str, **kwargs) -> "EbmConfig":
        sm, nce = ABLATION_VARIANTS[name]
        return cls(sm_weight=sm, nce_weight=nce, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


@dataclass
class NegativeTimeSampler:
    """Negative times ``t' ~ N(t, std^2)`` reflected into ``[lo, hi]``.

    Reflection keeps the proposal kernel symmetric in ``(t, t')``; clipping
    would pile negatives on the boundary, and a classifier can then tell
    them apart by time alone.
    """

    count: int = 1
    std: float = 0.025
    lo: float = 0.0
    hi: float = 1.0

    def sample(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        draws = t[:, None] + self.std * rng.standard_normal((len(t), self.count))
        width = self.hi - self.lo
        y = np.mod(draws - self.lo, 2 * width)
        return self.lo + np.where(y > width, 2 * width - y, y)


def time_log_density(t, lo: float, hi: float, power: float):
    """Log-density of ``t = lo + (hi - lo) u ** power`` with ``u`` uniform, up to a constant."""
    s = ((t - lo) / (hi - lo)).clamp_min(1e-300)
    return (1.0 / power - 1.0) * torch.log(s)


@dataclass
class EnergyModel:
    net: MlpModel
    schedule: InterpolantSchedule = field(default_factory=lambda: InterpolantSchedule("trig"))
    config: EbmConfig = field(default_factory=EbmConfig)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.net.scalar_head:
            raise ValueError("an energy model needs a scalar-output network")
        self.schedule = make_schedule(self.schedule)

    def energy(self, t, x: torch.Tensor) -> torch.Tensor:
        return self.net(t, x)

    def __call__(self, t, x):
        return self.net(t, x)

    def save(self, path, trainer=None) -> None:
        extra = {"schedule": self.schedule.kind, "config": self.config.to_dict(), "meta": self.meta}
        save_checkpoint(path, self.net, kind="energy", extra=extra, trainer=trainer)

    @classmethod
    def load(cls, path, weights: str | None = None) -> "EnergyModel":
        net, doc = load_checkpoint(path, weights)
        if doc["kind"] != "energy":
            raise ValueError(f"{path} holds a {doc['kind']!r} checkpoint, not an energy model")
        ex = doc["extra"]
        return cls(net, make_schedule(ex["schedule"]), EbmConfig(**ex["config"]), ex.get("meta", {}))


def _energy_fn(model):
    return model.net if isinstance(model, EnergyModel) else model


def info_nce_loss(model, t: torch.Tensor, x_t: torch.Tensor, negatives: torch.Tensor,
                  energy_pos: torch.Tensor | None = None, time_log_prior=None) -> torch.Tensor:
    """Mean over the batch of ``-log softmax`` of the true time among ``{t} ∪ negatives``.

    ``negatives`` has shape ``(n, K)``; ``energy_pos`` may pass precomputed
    ``E(t, x_t)``. With non-uniform training times the optimal logit is
    ``log p_t(x) + log pi(t)``; passing ``time_log_prior = log pi`` adds
    that term to the logits so the energy itself stays the log-density.
    """
    if negatives.ndim != 2 or negatives.shape[1] == 0:
        raise ValueError("need at least one negative time per sample")
    f = _energy_fn(model)
    n, k = negatives.shape
    if energy_pos is None:
        energy_pos = f(t, x_t)
    x_rep = x_t.repeat(k, 1)
    t_neg = negatives.T.reshape(-1)
    energy_neg = f(t_neg, x_rep).reshape(k, n).T
    logits = torch.cat([energy_pos[:, None], energy_neg], dim=1)
    if time_log_prior is not None:
        logits = logits + time_log_prior(torch.cat([t.expand(n)[:, None], negatives], dim=1))
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def score_matching_loss(model, schedule: InterpolantSchedule, t: torch.Tensor, x0: torch.Tensor,
                        x1: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Mean ``|sigma(t) ∇_x E(t, x_t) + x1|^2`` with ``x_t = alpha x0 + sigma x1``."""
    x_t = interpolate(schedule, t, x0, x1)
    grad = input_gradient(_energy_fn(model), t, x_t, create_graph=create_graph)
    if not torch.isfinite(grad).all():
        raise NonFiniteError("non-finite energy gradient")
    return ((schedule.sigma(t)[:, None] * grad + x1) ** 2).sum(1).mean()


def ebm_batch_loss(net: MlpModel, schedule: InterpolantSchedule, config: EbmConfig,
                   x0: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
    """One step of the joint objective on a data batch (coupling, times, negatives drawn here)."""
    lo, hi = config.train.t_eps, 1.0 - config.train.t_eps
    x1 = rng.standard_normal(x0.shape)
    x1 = couple(config.coupling, x0, x1).apply(x1)
    t_np = lo + (hi - lo) * rng.uniform(0.0, 1.0, size=len(x0)) ** config.time_power
    neg_np = NegativeTimeSampler(config.negatives_count, config.negatives_std, lo, hi).sample(t_np, rng)
    as_t = lambda a: torch.as_tensor(a, dtype=net.dtype)  # noqa: E731
    x0, x1, t, neg = as_t(x0), as_t(x1), as_t(t_np), as_t(neg_np)

    x_t = interpolate(schedule, t, x0, x1)
    loss = torch.zeros((), dtype=net.dtype)
    with torch.enable_grad():
        if config.sm_weight > 0:
            x_t = x_t.detach().requires_grad_(True)
        energy_pos = net(t, x_t)
        if config.sm_weight > 0:
            (grad,) = torch.autograd.grad(energy_pos.sum(), x_t, create_graph=True)
            sm = ((schedule.sigma(t)[:, None] * grad + x1) ** 2).sum(1).mean()
            loss = loss + config.sm_weight * sm
        if config.nce_weight > 0:
            prior = None
            if config.time_power != 1.0:
                def prior(times):
                    return time_log_density(times, lo, hi, config.time_power)
            nce = info_nce_loss(net, t, x_t.detach(), neg, energy_pos=energy_pos, time_log_prior=prior)
            loss = loss + config.nce_weight * nce
    return loss


def train_ebm(data, schedule=None, config: EbmConfig | None = None) -> tuple[EnergyModel, FitResult]:
    """Fit an energy model to samples ``data`` (emulator output, or exact target draws)."""
    config = config or EbmConfig()
    schedule = make_schedule(schedule or config.schedule)
    data = np.asarray(data, dtype=float)
    net = config.train.make_net(data.shape[1], None)

    def batch_loss(model, x0, rng):
        return ebm_batch_loss(model, schedule, config, x0, rng)

    result = fit(net, data, batch_loss, config.train, np.random.default_rng(config.train.seed))
    model = EnergyModel(net, schedule, config, {"fit": result.summary()})
    return model, result


def log_density(model: EnergyModel, x) -> np.ndarray:
    """``E(0, x)``: the data log-density up to an additive constant."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("non-finite input")
    if len(x) == 0:
        return np.zeros(0)
    with torch.no_grad():
        xt = torch.as_tensor(x, dtype=model.net.dtype)
        return model.net(torch.zeros((), dtype=xt.dtype), xt).numpy()
