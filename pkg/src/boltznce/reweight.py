"""Self-normalised importance reweighting, free-energy differences and dataset biasing.

All weight arithmetic stays in log space until a single max-shift, so
Boltzmann factors never overflow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.special import i0e, logsumexp

from .densities import GridQuadrature, TargetDensity
from .io import coordinate_columns, read_csv, read_json, write_csv, write_json

__all__ = [
    "WeightedEnsemble",
    "FreeEnergyReport",
    "importance_weights",
    "estimate_observable",
    "free_energy_difference",
    "histogram_free_energy",
    "bias_resample",
    "von_mises_weight",
    "tune_von_mises_scale",
    "PROVENANCES",
    "ESS_WARN_FRACTION",
]

PROVENANCES = ("exact_likelihood", "ebm_likelihood")
ESS_WARN_FRACTION = 0.01


class WeightDegeneracyWarning(UserWarning):
    pass


@dataclass
class WeightedEnsemble:
    """Samples with unnormalised log-weights ``-U/kT - loglik``.

    Only samples with finite energy and likelihood are kept; ``n_excluded``
    counts the rest.
    """

    samples: np.ndarray
    log_weights: np.ndarray
    provenance: str
    energies: np.ndarray | None = None
    loglik: np.ndarray | None = None
    kT: float = 1.0
    n_excluded: int = 0

    def __len__(self):
        return len(self.log_weights)

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights
        w = np.exp(lw - lw.max())
        return w / w.sum()

    def ess(self) -> float:
        """``(Σw)^2 / Σw^2``."""
        lw = self.log_weights
        return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))

    def ess_fraction(self) -> float:
        return self.ess() / len(self)

    def to_csv(self, path) -> None:
        cols = {f"x_{i}": self.samples[:, i] for i in range(self.samples.shape[1])}
        if self.energies is not None:
            cols["energy"] = self.energies
        if self.loglik is not None:
            cols["loglik"] = self.loglik
        cols["log_weight"] = self.log_weights
        cols["weight"] = self.normalized_weights()
        write_csv(path, cols)
        write_json(Path(path).with_suffix(".json"),
                   {"provenance": self.provenance, "kT": self.kT, "n": len(self),
                    "n_excluded": self.n_excluded, "ess": self.ess()})

    @classmethod
    def from_csv(cls, path) -> "WeightedEnsemble":
        path = Path(path)
        table = read_csv(path)
        side = path.with_suffix(".json")
        meta = read_json(side) if side.exists() else {}
        return cls(coordinate_columns(table), table["log_weight"],
                   meta.get("provenance", "exact_likelihood"), table.get("energy"),
                   table.get("loglik"), meta.get("kT", 1.0), meta.get("n_excluded", 0))


def importance_weights(samples, target: TargetDensity, loglik, provenance: str = "exact_likelihood",
                       warn_fraction: float = ESS_WARN_FRACTION) -> WeightedEnsemble:
    """Boltzmann importance weights for ``samples`` drawn with log-density ``loglik``.

    ``loglik`` is an array or a callable on the samples. Non-finite samples
    are dropped (with a warning); a warning is also raised when the ESS falls
    below ``warn_fraction`` of the sample count.
    """
    if provenance not in PROVENANCES:
        raise ValueError(f"provenance must be one of {PROVENANCES}")
    samples = np.asarray(samples, dtype=float)
    ll = np.asarray(loglik(samples) if callable(loglik) else loglik, dtype=float)
    if ll.shape != (len(samples),):
        raise ValueError("need one log-likelihood per sample")
    energies = np.asarray(target.energy(samples), dtype=float)
    lw = -energies / target.kT - ll
    keep = np.isfinite(lw) & np.isfinite(energies) & np.isfinite(ll)
    n_bad = int((~keep).sum())
    if n_bad:
        warnings.warn(f"excluded {n_bad} samples with non-finite energy or likelihood",
                      RuntimeWarning, stacklevel=2)
    if not keep.any():
        raise ValueError("no sample has a finite weight")
    ens = WeightedEnsemble(samples[keep], lw[keep], provenance, energies[keep], ll[keep],
                           target.kT, n_bad)
    if ens.ess() < warn_fraction * len(ens):
        warnings.warn(f"importance weights are degenerate: ESS = {ens.ess():.1f} of {len(ens)}",
                      WeightDegeneracyWarning, stacklevel=2)
    return ens


def estimate_observable(ensemble: WeightedEnsemble, observable: Callable) -> tuple[float, float]:
    """Self-normalised estimate of ``<O>`` and its delta-method standard error."""
    if len(ensemble) < 2:
        raise ValueError("need at least two samples")
    if not np.isfinite(ensemble.log_weights).any():
        raise ValueError("all weights are zero")
    values = np.asarray(observable(ensemble.samples), dtype=float)
    w = ensemble.normalized_weights()
    est = float(np.sum(w * values))
    stderr = float(np.sqrt(np.sum(w**2 * (values - est) ** 2)))
    return est, stderr


# ---------------------------------------------------------------------------
# Free energies
# ---------------------------------------------------------------------------


def histogram_free_energy(hist, edges, region) -> float:
    """``-log`` of the histogram mass with bin centres inside ``region`` over the rest."""
    hist = np.asarray(hist, dtype=float)
    edges = np.asarray(edges, dtype=float)
    centers = 0.5 * (edges[1:] + edges[:-1])
    inside = (centers > region[0]) & (centers < region[1])
    pos, neg = hist[inside].sum(), hist[~inside].sum()
    with np.errstate(divide="ignore"):
        return float(-np.log(pos / neg))


@dataclass
class FreeEnergyReport:
    delta_f: float
    hist: np.ndarray
    edges: np.ndarray
    region: tuple
    bins: int
    mass_region: float
    mass_complement: float
    seed: int | None = None
    provenance: str | None = None
    diagnostics: list = field(default_factory=list)

    def recompute(self) -> float:
        return histogram_free_energy(self.hist, self.edges, self.region)

    def to_dict(self) -> dict:
        return {"delta_f": self.delta_f if math.isfinite(self.delta_f) else str(self.delta_f),
                "hist": self.hist, "edges": self.edges, "region": list(self.region),
                "bins": self.bins, "mass_region": self.mass_region,
                "mass_complement": self.mass_complement, "seed": self.seed,
                "provenance": self.provenance, "diagnostics": self.diagnostics}

    def to_json(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def from_json(cls, path) -> "FreeEnergyReport":
        d = read_json(path)
        return cls(float(d["delta_f"]), np.asarray(d["hist"]), np.asarray(d["edges"]),
                   tuple(d["region"]), d["bins"], d["mass_region"], d["mass_complement"],
                   d.get("seed"), d.get("provenance"), d.get("diagnostics", []))

    def histogram_csv(self, path) -> None:
        e = self.edges
        write_csv(path, {"left": e[:-1], "right": e[1:], "center": 0.5 * (e[1:] + e[:-1]),
                         "density": self.hist})


def free_energy_difference(ensemble: WeightedEnsemble, coordinate_fn=0, region=(0.0, 2.0),
                           bins: int = 100, seed: int | None = None) -> FreeEnergyReport:
    """Reweighted free-energy difference between ``region`` and its complement.

    The collective variable is ``coordinate_fn(samples)`` (or a column index).
    A weighted density histogram with ``bins`` bins over the data range is
    formed and the bins are split by whether their centres fall strictly
    inside ``region``.
    """
    if callable(coordinate_fn):
        cv = np.asarray(coordinate_fn(ensemble.samples), dtype=float)
    else:
        cv = ensemble.samples[:, int(coordinate_fn)]
    weights = ensemble.normalized_weights()
    hist, edges = np.histogram(cv, bins=bins, density=True, weights=weights)
    centers = 0.5 * (edges[1:] + edges[:-1])
    inside = (centers > region[0]) & (centers < region[1])
    mass_in, mass_out = float(hist[inside].sum()), float(hist[~inside].sum())
    delta_f = histogram_free_energy(hist, edges, region)
    diagnostics = []
    if mass_in == 0.0:
        diagnostics.append("no reweighted mass inside the region; delta_f is +inf")
        warnings.warn(diagnostics[-1], RuntimeWarning, stacklevel=2)
    if mass_out == 0.0:
        diagnostics.append("no reweighted mass outside the region; delta_f is -inf")
        warnings.warn(diagnostics[-1], RuntimeWarning, stacklevel=2)
    return FreeEnergyReport(delta_f, hist, edges, tuple(float(r) for r in region), int(bins),
                            mass_in, mass_out, seed, ensemble.provenance, diagnostics)


# ---------------------------------------------------------------------------
# Biasing
# ---------------------------------------------------------------------------


def von_mises_weight(mu: float = 1.0, kappa: float = 10.0, scale: float = 150.0,
                     offset: float = 1.0, coordinate: int | None = None) -> Callable:
    """``w(phi) = scale * f_vM(phi | mu, kappa) + offset``.

    With ``coordinate`` set, the returned function takes ``(n, dim)`` samples
    and reads the angle from that column.
    """
    if kappa < 0 or scale < 0 or offset < 0:
        raise ValueError("kappa, scale and offset must be non-negative")
    log_norm = math.log(2 * math.pi * i0e(kappa))

    def weight(x):
        x = np.asarray(x, dtype=float)
        phi = x if coordinate is None else x[:, coordinate]
        # i0e(k) = exp(-k) I0(k): keeps the density finite for large kappa
        return scale * np.exp(kappa * (np.cos(phi - mu) - 1.0) - log_norm) + offset

    return weight


def bias_resample(dataset, weight_fn: Callable, n: int, seed) -> np.ndarray:
    """Draw ``n`` rows of ``dataset`` with replacement, with probability ∝ ``weight_fn``."""
    dataset = np.asarray(dataset)
    w = np.asarray(weight_fn(dataset), dtype=float)
    if w.shape != (len(dataset),):
        raise ValueError("weight_fn must return one weight per row")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("all weights are zero")
    idx = np.random.default_rng(seed).choice(len(dataset), size=n, replace=True, p=w / total)
    return dataset[idx]


def tune_von_mises_scale(target: TargetDensity, coordinate: int = 0, mu: float = 1.0,
                         kappa: float = 10.0, offset: float = 1.0, region=(0.0, 2.0),
                         share: float = 0.5, grid: GridQuadrature | None = None) -> float:
    """Bisect the von Mises ``scale`` so the biased density puts ``share`` of its mass in ``region``."""
    grid = grid or target.default_grid()
    log_p = target.log_density(grid.nodes)
    p = np.exp(log_p - log_p.max())
    c = grid.nodes[:, coordinate]
    inside = (c > region[0]) & (c < region[1])

    def excess(log_scale):
        w = von_mises_weight(mu, kappa, math.exp(log_scale), offset, coordinate)(grid.nodes) * p
        return w[inside].sum() / w.sum() - share

    lo, hi = -10.0, 20.0
    if excess(lo) > 0 or excess(hi) < 0:
        raise ValueError("share is not reachable by scaling the von Mises weight")
    return math.exp(optimize.brentq(excess, lo, hi, xtol=1e-10))
