"""Mini-batch couplings between data and prior batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["Coupling", "hungarian_couple", "independent_couple", "couple", "COUPLING_MODES"]

COUPLING_MODES = ("ot", "independent")


@dataclass(frozen=True)
class Coupling:
    """``x0[i]`` is paired with ``x1[permutation[i]]``."""

    permutation: np.ndarray
    cost: float

    def apply(self, x1):
        return x1[self.permutation]


def _check(x0, x1):
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.ndim != 2 or x1.ndim != 2:
        raise ValueError("batches must be 2D arrays (n, dim)")
    if x0.shape != x1.shape:
        raise ValueError(f"batch shapes differ: {x0.shape} vs {x1.shape}")
    if len(x0) == 0:
        raise ValueError("empty batch")
    return x0, x1


def _sq_cost(x0, x1):
    return ((x0[:, None, :] - x1[None, :, :]) ** 2).sum(-1)


def hungarian_couple(x0_batch, x1_batch) -> Coupling:
    """Minimum total squared-Euclidean-cost assignment."""
    x0, x1 = _check(x0_batch, x1_batch)
    cost = _sq_cost(x0, x1)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(x0), dtype=np.int64)
    perm[rows] = cols
    return Coupling(perm, float(cost[rows, cols].sum()))


def independent_couple(x0_batch, x1_batch) -> Coupling:
    x0, x1 = _check(x0_batch, x1_batch)
    return Coupling(np.arange(len(x0)), float(((x0 - x1) ** 2).sum()))


def couple(mode: str, x0_batch, x1_batch) -> Coupling:
    if mode == "ot":
        return hungarian_couple(x0_batch, x1_batch)
    if mode == "independent":
        return independent_couple(x0_batch, x1_batch)
    raise ValueError(f"unknown coupling mode {mode!r}; use one of {COUPLING_MODES}")
