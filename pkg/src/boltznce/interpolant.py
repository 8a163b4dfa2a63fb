"""Stochastic-interpolant schedules ``x_t = alpha(t) x0 + sigma(t) x1``.

``x0`` is the data endpoint (t=0) and ``x1`` the Gaussian prior endpoint
(t=1). All functions accept numpy arrays or torch tensors and return the
same kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "InterpolantSchedule",
    "make_schedule",
    "interpolate",
    "endpoint_coefficient",
    "endpoint_vector_field",
    "ENDPOINT_T_MIN",
    "EP_WEIGHT_MIN",
    "EP_WEIGHT_MAX",
]

ENDPOINT_T_MIN = 1e-3
EP_WEIGHT_MIN = 0.005
EP_WEIGHT_MAX = 100.0

_KINDS = {"linear": "linear", "trig": "trig", "trigonometric": "trig"}


def _xp(t):
    return torch if isinstance(t, torch.Tensor) else np


@dataclass(frozen=True)
class InterpolantSchedule:
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "trig"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t):
        if self.kind == "linear":
            return 1 - t
        return _xp(t).cos(0.5 * math.pi * t)

    def sigma(self, t):
        if self.kind == "linear":
            return t
        return _xp(t).sin(0.5 * math.pi * t)

    def alpha_dot(self, t):
        if self.kind == "linear":
            return -_xp(t).ones_like(t)
        return -0.5 * math.pi * _xp(t).sin(0.5 * math.pi * t)

    def sigma_dot(self, t):
        if self.kind == "linear":
            return _xp(t).ones_like(t)
        return 0.5 * math.pi * _xp(t).cos(0.5 * math.pi * t)


def make_schedule(kind) -> InterpolantSchedule:
    if isinstance(kind, InterpolantSchedule):
        return kind
    try:
        return InterpolantSchedule(_KINDS[kind])
    except KeyError:
        raise ValueError(f"unknown schedule {kind!r}; use 'linear' or 'trig'") from None


def _column(t, like):
    """Broadcast per-sample times of shape (n,) against points of shape (n, d)."""
    if isinstance(like, torch.Tensor):
        t = torch.as_tensor(t, dtype=like.dtype)
    else:
        t = np.asarray(t, dtype=float)
    return t[..., None] if t.ndim == like.ndim - 1 and t.ndim > 0 else t


def _check_unit(t, lo=0.0, hi=1.0):
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if tt.size and (np.nanmin(tt) < lo or np.nanmax(tt) > hi or np.isnan(tt).any()):
        raise ValueError(f"time must lie in [{lo}, {hi}]")


def interpolate(schedule: InterpolantSchedule, t, x0, x1):
    _check_unit(t)
    tc = _column(t, x0)
    return schedule.alpha(tc) * x0 + schedule.sigma(tc) * x1


def endpoint_coefficient(schedule: InterpolantSchedule, t, clamp: bool = True):
    """``|(alpha_dot sigma - sigma_dot alpha) / sigma|``, clamped to [0.005, 100] by default.

    For the linear schedule ``sigma_dot = 1`` and this is
    ``|(alpha_dot sigma - alpha) / sigma|``.
    """
    xp = _xp(t)
    t = t if xp is torch else np.asarray(t, dtype=float)
    num = schedule.alpha_dot(t) * schedule.sigma(t) - schedule.sigma_dot(t) * schedule.alpha(t)
    sig = schedule.sigma(t)
    if xp is torch:
        coef = torch.abs(num / sig)
        return torch.clamp(coef, EP_WEIGHT_MIN, EP_WEIGHT_MAX) if clamp else coef
    with np.errstate(divide="ignore"):
        coef = np.abs(num / sig)
    return np.clip(coef, EP_WEIGHT_MIN, EP_WEIGHT_MAX) if clamp else coef


def endpoint_vector_field(schedule: InterpolantSchedule, t, x, x0_hat):
    """Velocity implied by an endpoint prediction ``x0_hat`` at ``(t, x)``.

    ``(sigma_dot x + (alpha_dot sigma - sigma_dot alpha) x0_hat) / sigma``,
    which reduces to ``(sigma_dot x + (alpha_dot sigma - alpha) x0_hat) / sigma``
    for the linear schedule.
    """
    _check_unit(t, lo=ENDPOINT_T_MIN * (1 - 1e-12))
    tc = _column(t, x)
    a, s = schedule.alpha(tc), schedule.sigma(tc)
    sd = schedule.sigma_dot(tc)
    return (sd * x + (schedule.alpha_dot(tc) * s - sd * a) * x0_hat) / s
