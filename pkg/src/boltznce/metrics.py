"""Evaluation metrics: energy W2, torsion-angle W2, grid density error."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .densities import GridQuadrature, TargetDensity

__all__ = [
    "energy_w2",
    "assignment_w2",
    "angle_w2",
    "circular_difference",
    "grid_density_l2",
    "MetricReport",
]


def energy_w2(energies_a, energies_b) -> float:
    """Exact W2 between two 1D empirical distributions by quantile coupling.

    Equal sizes pair sorted values; unequal sizes integrate the squared gap
    between the two empirical quantile functions.
    """
    a = np.sort(np.asarray(energies_a, dtype=float).ravel())
    b = np.sort(np.asarray(energies_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("energy arrays must be non-empty")
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    ua = np.arange(1, a.size + 1) / a.size
    ub = np.arange(1, b.size + 1) / b.size
    u = np.union1d(ua, ub)
    du = np.diff(np.concatenate([[0.0], u]))
    ia = np.minimum(np.searchsorted(ua, u, side="left"), a.size - 1)
    ib = np.minimum(np.searchsorted(ub, u, side="left"), b.size - 1)
    return float(np.sqrt(np.sum(du * (a[ia] - b[ib]) ** 2)))


def assignment_w2(a, b, cost: Callable | None = None) -> float:
    """W2 between equal-size point clouds by solving the assignment problem.

    ``cost(a, b)`` returns the matrix of squared ground distances; the default
    is squared Euclidean.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("assignment_w2 needs equal, non-zero sizes")
    c = cost(a, b) if cost else ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(c)
    return float(np.sqrt(c[rows, cols].mean()))


def _principal(angles):
    """Map to (-pi, pi]."""
    return np.pi - np.mod(np.pi - angles, 2 * np.pi)


def circular_difference(x, y, mode: str = "nearest"):
    """Per-coordinate angular distance.

    ``"nearest"`` gives ``min(|d|, 2pi - |d|)``; ``"strict"`` gives
    ``(x - y) mod pi`` literally, which is not symmetric in its arguments.
    """
    delta = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    if mode == "nearest":
        d = np.mod(np.abs(delta), 2 * np.pi)
        return np.minimum(d, 2 * np.pi - d)
    if mode == "strict":
        return np.mod(delta, np.pi)
    raise ValueError("mode must be 'nearest' or 'strict'")


def _angle_cost(mode):
    def cost(a, b):
        d = circular_difference(a[:, None, :], b[None, :, :], mode)
        return (d**2).sum(-1)
    return cost


def angle_w2(angles_a, angles_b, mode: str = "nearest", batch_size: int = 2000,
             repeats: int = 5, seed: int = 0) -> float:
    """W2 on the torus with per-angle circular distance.

    Inputs are ``(n,)`` or ``(n, s)`` arrays of angles. When either set is
    larger than ``batch_size`` the distance is averaged over ``repeats``
    random equal-size sub-batches.
    """
    a = np.asarray(angles_a, dtype=float)
    b = np.asarray(angles_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("angle arrays must be non-empty")
    for arr in (a, b):
        if np.any(arr <= -np.pi) or np.any(arr > np.pi):
            warnings.warn("angles outside (-pi, pi] were wrapped", RuntimeWarning, stacklevel=2)
            break
    a, b = _principal(a), _principal(b)
    cost = _angle_cost(mode)
    m = min(len(a), len(b), batch_size)
    if len(a) == len(b) == m:
        return assignment_w2(a, b, cost)
    rng = np.random.default_rng(seed)
    vals = [assignment_w2(a[rng.choice(len(a), m, replace=False)],
                          b[rng.choice(len(b), m, replace=False)], cost)
            for _ in range(repeats)]
    return float(np.mean(vals))


def grid_density_l2(model_logdensity_fn: Callable, target: TargetDensity,
                    grid: GridQuadrature | None = None) -> float:
    """Relative L2 error ``|q - p| / |p|`` on a grid, ``q`` self-normalised over the grid.

    Adding a constant to the model log-density leaves the value unchanged.
    """
    if not target.normalized:
        raise ValueError("grid_density_l2 needs a target with an exact density")
    grid = grid or target.default_grid()
    p = np.exp(target.log_density(grid.nodes))
    mass = grid.integrate(p)
    if mass < 1 - 1e-3:
        raise ValueError(f"grid covers only {mass:.5f} of the target mass")
    log_q = np.asarray(model_logdensity_fn(grid.nodes), dtype=float)
    q = np.exp(log_q - logsumexp(log_q) - math.log(grid.cell_volume))
    return float(np.sqrt(np.sum((q - p) ** 2) / np.sum(p**2)))


@dataclass
class MetricReport:
    e_w2: float | None = None
    t_w2: float | None = None
    nll_mean: float | None = None
    nll_std: float | None = None
    nll_batch_std: float | None = None
    density_l2: float | None = None
    batch_sizes: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """A one-row summary in the layout of an emulator comparison table."""
        def fmt(v):
            return "-" if v is None else f"{v:.4f}"
        head = f"{'E-W2':>10} {'T-W2':>10} {'NLL':>10} {'NLL std':>10} {'density L2':>11}"
        row = (f"{fmt(self.e_w2):>10} {fmt(self.t_w2):>10} {fmt(self.nll_mean):>10} "
               f"{fmt(self.nll_std):>10} {fmt(self.density_l2):>11}")
        return head + "\n" + row
