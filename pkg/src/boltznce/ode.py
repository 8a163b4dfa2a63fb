"""Adaptive Dormand-Prince 5(4) integration, with optional log-density tracking.

States may be numpy arrays or torch tensors; the right-hand side receives
the time as a Python float and a state of the same kind. A batch of
trajectories is integrated as one system sharing the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch

from .errors import NonFiniteError, NumericalError, StepSizeUnderflow

__all__ = [
    "OdeSolution",
    "FlowResult",
    "integrate",
    "integrate_with_logdet",
    "divergence",
    "DIVERGENCE_MODES",
]

DIVERGENCE_MODES = ("exact_autodiff", "exact_finite_difference")

# Dormand & Prince (1980) coefficients
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6]
# fifth-order minus embedded fourth-order weights
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
PI_ALPHA = 0.7 / 5
PI_BETA = 0.4 / 5


@dataclass
class OdeSolution:
    t: float
    y: object
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0
    times: list = field(default_factory=list)
    errors: list = field(default_factory=list)


class FlowResult(NamedTuple):
    x: torch.Tensor
    delta_logp: torch.Tensor
    solution: OdeSolution


def _abs(y):
    return y.abs() if isinstance(y, torch.Tensor) else np.abs(y)


def _maximum(a, b):
    return torch.maximum(a, b) if isinstance(a, torch.Tensor) else np.maximum(a, b)


def _all_finite(y) -> bool:
    if isinstance(y, torch.Tensor):
        return bool(torch.isfinite(y).all())
    return bool(np.isfinite(y).all())


def _norm(r, kind: str) -> float:
    if isinstance(r, torch.Tensor):
        if r.numel() == 0:
            return 0.0
        return float(r.abs().max()) if kind == "max" else float(r.pow(2).mean().sqrt())
    r = np.asarray(r)
    if r.size == 0:
        return 0.0
    return float(np.abs(r).max()) if kind == "max" else float(np.sqrt(np.mean(r**2)))


def _initial_step(f, t0, y0, f0, direction, atol, rtol, norm):
    scale = atol + rtol * _abs(y0)
    d0 = _norm(y0 / scale, norm)
    d1 = _norm(f0 / scale, norm)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = f(t0 + direction * h0, y1)
    d2 = _norm((f1 - f0) / scale, norm) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def integrate(f: Callable, t_start: float, t_end: float, y0, atol: float = 1e-5,
              rtol: float = 1e-5, h0: float | None = None, norm: str = "max",
              max_steps: int = 100_000) -> OdeSolution:
    """Integrate ``dy/dt = f(t, y)`` from ``t_start`` to ``t_end`` (either direction).

    Steps are accepted when the embedded error, scaled componentwise by
    ``atol + rtol * max(|y_old|, |y_new|)``, has ``norm`` at most 1
    (``"max"`` bounds every component; ``"rms"`` is the Hairer norm). A PI
    controller picks the next step; the last step is clipped so the
    solution ends exactly at ``t_end``.
    """
    t_start, t_end = float(t_start), float(t_end)
    if t_start == t_end:
        raise ValueError("t_start and t_end must differ")
    if norm not in ("max", "rms"):
        raise ValueError("norm must be 'max' or 'rms'")
    direction = 1.0 if t_end > t_start else -1.0
    span = abs(t_end - t_start)
    sol = OdeSolution(t=t_start, y=y0)

    def rhs(t, y):
        out = f(t, y)
        sol.n_evals += 1
        if not _all_finite(out):
            raise NonFiniteError(f"right-hand side returned non-finite values at t={t:.6g}")
        return out

    t, y = t_start, y0
    k1 = rhs(t, y)
    h = h0 if h0 is not None else _initial_step(rhs, t, y, k1, direction, atol, rtol, norm)
    h = min(abs(h), span)
    prev_err = 1.0
    just_rejected = False

    while direction * (t_end - t) > 0:
        if sol.n_accepted + sol.n_rejected >= max_steps:
            raise NumericalError(f"exceeded {max_steps} steps at t={t:.6g}")
        remaining = abs(t_end - t)
        last = h >= remaining
        if last:
            h = remaining
        if h <= 16 * np.finfo(float).eps * max(abs(t), span):
            raise StepSizeUnderflow(
                f"step size {h:.3e} underflowed at t={t:.6g} after {sol.n_accepted} accepted "
                f"and {sol.n_rejected} rejected steps"
            )
        hs = direction * h
        ks = [k1]
        for i in range(1, 7):
            yi = y
            for a, k in zip(_A[i], ks):
                if a != 0.0:
                    yi = yi + (hs * a) * k
            ks.append(rhs(t + _C[i] * hs, yi))
        y_new = yi  # stage 7 is evaluated at the fifth-order solution (FSAL)
        err_vec = 0.0
        for e, k in zip(_E, ks):
            if e != 0.0:
                err_vec = err_vec + (hs * e) * k
        scale = atol + rtol * _maximum(_abs(y), _abs(y_new))
        err = _norm(err_vec / scale, norm)

        if err <= 1.0:
            t = t_end if last else t + hs
            y = y_new
            k1 = ks[6]
            sol.n_accepted += 1
            sol.times.append(t)
            sol.errors.append(err)
            if err == 0.0:
                factor = MAX_FACTOR
            else:
                factor = SAFETY * err ** (-PI_ALPHA) * prev_err ** PI_BETA
            factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
            if just_rejected:
                factor = min(1.0, factor)
            prev_err = max(err, 1e-4)
            just_rejected = False
            h = h * factor
        else:
            sol.n_rejected += 1
            h = h * max(MIN_FACTOR, SAFETY * err ** (-1 / 5))
            just_rejected = True

    sol.t = t_end
    sol.y = y
    return sol


def divergence(v: Callable, t: float, x: torch.Tensor, mode: str = "exact_autodiff",
               eps: float = 1e-4) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(v(t, x), div_x v(t, x))`` with the full Jacobian trace."""
    d = x.shape[1]
    if mode == "exact_autodiff":
        with torch.enable_grad():
            xg = x.detach().requires_grad_(True)
            out = v(t, xg)
            div = torch.zeros(x.shape[0], dtype=x.dtype)
            for i in range(d):
                if not out.requires_grad:  # field independent of x
                    break
                (g,) = torch.autograd.grad(out[:, i].sum(), xg, retain_graph=i < d - 1,
                                           allow_unused=True)
                if g is not None:
                    div = div + g[:, i]
        return out.detach(), div.detach()
    if mode == "exact_finite_difference":
        with torch.no_grad():
            out = v(t, x)
            div = torch.zeros(x.shape[0], dtype=x.dtype)
            for i in range(d):
                step = torch.zeros(d, dtype=x.dtype)
                step[i] = eps
                div = div + (v(t, x + step)[:, i] - v(t, x - step)[:, i]) / (2 * eps)
        return out, div
    raise ValueError(f"divergence mode must be one of {DIVERGENCE_MODES}")


def integrate_with_logdet(v: Callable, t_start: float, t_end: float, x0: torch.Tensor,
                          divergence_mode: str = "exact_autodiff", atol: float = 1e-5,
                          rtol: float = 1e-5, norm: str = "max") -> FlowResult:
    """Integrate ``dx/dt = v`` together with ``d(logp)/dt = -div v``.

    ``delta_logp`` is ``-∫_{t_start}^{t_end} div v dt``, so the density
    transported along the flow satisfies
    ``log p(x(t_end)) = log p(x(t_start)) + delta_logp``.
    """
    if divergence_mode not in DIVERGENCE_MODES:
        raise ValueError(f"divergence mode must be one of {DIVERGENCE_MODES}")
    x0 = torch.as_tensor(x0)
    d = x0.shape[1]

    def augmented(t, z):
        out, div = divergence(v, t, z[:, :d], divergence_mode)
        return torch.cat([out, -div[:, None]], dim=1)

    z0 = torch.cat([x0, torch.zeros(x0.shape[0], 1, dtype=x0.dtype)], dim=1)
    sol = integrate(augmented, t_start, t_end, z0, atol=atol, rtol=rtol, norm=norm)
    return FlowResult(sol.y[:, :d], sol.y[:, d], sol)
