"""Toy Boltzmann targets with exact energies, densities and samplers.

Every target carries its temperature ``kT`` explicitly. The Boltzmann
density is ``exp(-energy(x) / kT) / Z``; ``log_density`` includes ``-log Z``
whenever ``normalized`` is true.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, optimize
from scipy.special import logsumexp

__all__ = [
    "TargetDensity",
    "EightGaussians",
    "Checkerboard",
    "TwoWell",
    "Gaussian",
    "GridQuadrature",
    "QuadratureError",
    "make_target",
    "log_partition",
    "region_free_energy",
    "TARGETS",
]


class QuadratureError(ValueError):
    """Raised when a grid does not resolve or cover a target."""


# ---------------------------------------------------------------------------
# Grid quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridQuadrature:
    """Tensor-product midpoint rule on an axis-aligned box.

    Nodes sit at cell centres, so a box whose edges align with a piecewise
    constant density integrates it exactly.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise ValueError("lower, upper and points must have the same length")
        for lo, hi, n in zip(self.lower, self.upper, self.points):
            if not hi > lo:
                raise ValueError(f"empty grid interval [{lo}, {hi}]")
            if n < 2:
                raise ValueError("need at least 2 points per dimension")

    @classmethod
    def box(cls, lo, hi, dim=2, points=256):
        return cls((float(lo),) * dim, (float(hi),) * dim, (int(points),) * dim)

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / np.asarray(self.points)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return [
            lo + (np.arange(n) + 0.5) * h
            for lo, n, h in zip(self.lower, self.points, self.spacing)
        ]

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(len(self.nodes), self.cell_volume)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Nodes in the outermost ring of cells."""
        idx = np.meshgrid(*[np.arange(n) for n in self.points], indexing="ij")
        mask = np.zeros(idx[0].shape, dtype=bool)
        for i, n in zip(idx, self.points):
            mask |= (i == 0) | (i == n - 1)
        return mask.ravel()

    def refined(self, factor: int = 2) -> "GridQuadrature":
        return GridQuadrature(self.lower, self.upper, tuple(n * factor for n in self.points))

    def integrate(self, values) -> float:
        return float(np.sum(np.asarray(values) * self.weights))

    def log_integrate(self, log_values) -> float:
        return float(logsumexp(np.asarray(log_values) + math.log(self.cell_volume)))


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass
class TargetDensity:
    """Base class: subclasses define ``energy``, ``_sample`` and ``default_grid``."""

    name: str = field(init=False, default="target")
    dim: int = field(init=False, default=2)
    kT: float = 1.0

    def __post_init__(self):
        if not self.kT > 0:
            raise ValueError(f"kT must be positive, got {self.kT}")

    # -- to override -------------------------------------------------------
    def energy(self, x) -> np.ndarray:
        raise NotImplementedError

    def _sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def default_grid(self) -> GridQuadrature:
        raise NotImplementedError

    def _analytic_log_z(self):
        return None

    # -- shared ------------------------------------------------------------
    @property
    def params(self) -> dict:
        raise NotImplementedError

    @property
    def normalized(self) -> bool:
        return True

    @cached_property
    def log_z(self) -> float:
        """``log Z`` for ``exp(-U/kT)``; falls back to grid quadrature."""
        analytic = self._analytic_log_z()
        if analytic is not None:
            return float(analytic)
        return log_partition(self, self.default_grid())

    def log_density(self, x) -> np.ndarray:
        return -self.energy(x) / self.kT - self.log_z

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def sample(self, n: int, rng) -> np.ndarray:
        """Draw ``n`` i.i.d. samples using the generator (or seed) ``rng``."""
        rng = np.random.default_rng(rng)
        if n < 0:
            raise ValueError("n must be non-negative")
        if n == 0:
            return np.zeros((0, self.dim))
        return self._sample(int(n), rng)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "kT": self.kT, "params": self.params}


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


@dataclass
class EightGaussians(TargetDensity):
    """Equal-weight mixture of isotropic Gaussians evenly spaced on a circle."""

    radius: float = 4.0
    scale: float = 0.3
    n_modes: int = 8

    def __post_init__(self):
        super().__post_init__()
        self.name = "eight_gaussians"
        if not self.radius > 0 or not self.scale > 0:
            raise ValueError("radius and scale must be positive")
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")

    @property
    def params(self):
        return {"radius": self.radius, "scale": self.scale, "n_modes": self.n_modes}

    @property
    def centers(self) -> np.ndarray:
        angles = 2 * np.pi * np.arange(self.n_modes) / self.n_modes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    def mixture_log_density(self, x) -> np.ndarray:
        x = _as_points(x, 2)
        d2 = ((x[:, None, :] - self.centers[None]) ** 2).sum(-1)
        log_comp = -0.5 * d2 / self.scale**2 - math.log(2 * math.pi * self.scale**2)
        return logsumexp(log_comp, axis=1) - math.log(self.n_modes)

    def energy(self, x):
        # kT is folded into the mixture so exp(-U/kT) is the mixture density
        return -self.kT * self.mixture_log_density(x)

    def _analytic_log_z(self):
        return 0.0

    def _sample(self, n, rng):
        comp = rng.integers(self.n_modes, size=n)
        return self.centers[comp] + self.scale * rng.standard_normal((n, 2))

    def default_grid(self):
        half = self.radius + 8 * self.scale + 1.0
        half = float(np.ceil(half))
        return GridQuadrature.box(-half, half, points=256)


@dataclass
class Checkerboard(TargetDensity):
    """Uniform density on the 8 "on" unit squares of a 4x4 board on [-2, 2]^2.

    Off squares carry a finite energy wall (``wall`` nats above the on
    level, growing quadratically outside the board) so that the energy stays
    finite everywhere while the off mass is below 1e-12.
    """

    wall: float = 30.0

    def __post_init__(self):
        super().__post_init__()
        self.name = "checkerboard"
        if not self.wall > 0:
            raise ValueError("wall must be positive")

    @property
    def params(self):
        return {"wall": self.wall}

    def on_board(self, x) -> np.ndarray:
        x = _as_points(x, 2)
        inside = np.all((x >= -2.0) & (x < 2.0), axis=1)
        parity = (np.floor(x[:, 0]) + np.floor(x[:, 1])) % 2 == 0
        return inside & parity

    def energy(self, x):
        x = _as_points(x, 2)
        outside = np.clip(np.abs(x) - 2.0, 0.0, None)
        penalty = self.wall + 10.0 * (outside**2).sum(1)
        log_density = np.where(self.on_board(x), -math.log(8.0), -math.log(8.0) - penalty)
        return -self.kT * log_density

    def _analytic_log_z(self):
        # off-square mass is below exp(-wall)
        return 0.0

    def _sample(self, n, rng):
        squares = np.array(
            [(i, j) for i in range(-2, 2) for j in range(-2, 2) if (i + j) % 2 == 0], dtype=float
        )
        pick = squares[rng.integers(len(squares), size=n)]
        return pick + rng.uniform(size=(n, 2))

    def default_grid(self):
        return GridQuadrature.box(-3.0, 3.0, points=240)


@dataclass
class TwoWell(TargetDensity):
    """``U(x) = a (x1^2 - b)^2 + c x2^2 + tilt * x1``.

    With ``tilt > 0`` the ``x1 > 0`` well is the minority state. ``x2`` is
    an independent Gaussian, so the partition function and marginal masses
    factor into a 1D quadrature in ``x1``.
    """

    a: float = 1.0
    b: float = 1.0
    c: float = 2.0
    tilt: float = 0.0
    kT: float = 0.25

    def __post_init__(self):
        super().__post_init__()
        self.name = "two_well"
        for key in ("a", "b", "c"):
            if not getattr(self, key) > 0:
                raise ValueError(f"two_well parameter {key} must be positive")

    @property
    def params(self):
        return {"a": self.a, "b": self.b, "c": self.c, "tilt": self.tilt}

    def energy_x1(self, x1):
        x1 = np.asarray(x1, dtype=float)
        return self.a * (x1**2 - self.b) ** 2 + self.tilt * x1

    def energy(self, x):
        x = _as_points(x, 2)
        return self.energy_x1(x[:, 0]) + self.c * x[:, 1] ** 2

    @cached_property
    def _x1_argmin(self) -> float:
        # stationary points of a(x^2-b)^2 + tilt x solve 4a x^3 - 4ab x + tilt = 0
        roots = np.roots([4 * self.a, 0.0, -4 * self.a * self.b, self.tilt])
        roots = roots[np.abs(roots.imag) < 1e-9].real
        return float(roots[np.argmin(self.energy_x1(roots))])

    @cached_property
    def _x1_min(self) -> float:
        return float(self.energy_x1(self._x1_argmin))

    @cached_property
    def _x1_support(self) -> tuple[float, float]:
        """Interval outside which the x1 density is below exp(-60)."""
        cut = self._x1_min + 60.0 * self.kT
        f = lambda s: float(self.energy_x1(s)) - cut  # noqa: E731
        x_star = self._x1_argmin
        reach = math.sqrt(self.b) + 1.0
        while f(x_star + reach) < 0 or f(x_star - reach) < 0:
            reach *= 2
        return (optimize.brentq(f, x_star - reach, x_star),
                optimize.brentq(f, x_star, x_star + reach))

    def _x1_weight(self, s):
        return np.exp(-(self.energy_x1(s) - self._x1_min) / self.kT)

    def x1_mass(self, lo=-np.inf, hi=np.inf) -> float:
        """Unnormalized mass of the x1 marginal on [lo, hi] (shifted by the minimum)."""
        slo, shi = self._x1_support
        lo, hi = max(lo, slo), min(hi, shi)
        if hi <= lo:
            return 0.0
        pts = [p for p in (-math.sqrt(self.b), 0.0, math.sqrt(self.b)) if lo < p < hi]
        val, _ = integrate.quad(self._x1_weight, lo, hi, points=pts or None, limit=200,
                                epsabs=0.0, epsrel=1e-12)
        return float(val)

    def _analytic_log_z(self):
        # x2 factor: int exp(-c x2^2 / kT) dx2 = sqrt(pi kT / c)
        log_x2 = 0.5 * math.log(math.pi * self.kT / self.c)
        return math.log(self.x1_mass()) - self._x1_min / self.kT + log_x2

    def free_energy_difference(self, region=(0.0, 2.0)) -> float:
        """``-log(P(x1 in region) / P(x1 not in region))`` by 1D quadrature."""
        inside = self.x1_mass(*region)
        total = self.x1_mass()
        return -math.log(inside / (total - inside))

    def _sample(self, n, rng):
        lo, hi = self._x1_support
        out = np.empty(0)
        while out.size < n:
            m = max(2 * (n - out.size), 1024)
            prop = rng.uniform(lo, hi, size=m)
            keep = rng.uniform(size=m) < self._x1_weight(prop)
            out = np.concatenate([out, prop[keep]])
        x1 = out[:n]
        x2 = math.sqrt(self.kT / (2 * self.c)) * rng.standard_normal(n)
        return np.stack([x1, x2], axis=-1)

    def default_grid(self):
        lo, hi = self._x1_support
        half2 = math.sqrt(60.0 * self.kT / self.c)
        return GridQuadrature((lo, -half2), (hi, half2), (256, 256))


@dataclass
class Gaussian(TargetDensity):
    """Isotropic Gaussian ``U(x) = |x - mean|^2 / (2 scale^2)`` (at kT=1)."""

    mean: tuple = (0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        self.name = "gaussian"
        self.mean = tuple(float(m) for m in np.atleast_1d(self.mean))
        self.dim = len(self.mean)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def params(self):
        return {"mean": list(self.mean), "scale": self.scale}

    def energy(self, x):
        x = _as_points(x, self.dim)
        return 0.5 * ((x - np.asarray(self.mean)) ** 2).sum(1) / self.scale**2

    def _analytic_log_z(self):
        var = self.kT * self.scale**2
        return 0.5 * self.dim * math.log(2 * math.pi * var)

    def _sample(self, n, rng):
        sd = self.scale * math.sqrt(self.kT)
        return np.asarray(self.mean) + sd * rng.standard_normal((n, self.dim))

    def default_grid(self):
        sd = self.scale * math.sqrt(self.kT)
        lo = [m - 8 * sd for m in self.mean]
        hi = [m + 8 * sd for m in self.mean]
        return GridQuadrature(tuple(lo), tuple(hi), (256,) * self.dim)


TARGETS = {
    "eight_gaussians": EightGaussians,
    "checkerboard": Checkerboard,
    "two_well": TwoWell,
    "gaussian": Gaussian,
}


def make_target(name: str, params: dict | None = None, kT: float | None = None) -> TargetDensity:
    """Build a target by name; ``params`` may also carry ``kT``."""
    try:
        cls = TARGETS[name]
    except KeyError:
        raise ValueError(f"unknown target {name!r}; choose from {sorted(TARGETS)}") from None
    params = dict(params or {})
    if kT is not None:
        params["kT"] = kT
    try:
        return cls(**params)
    except TypeError as err:
        raise ValueError(f"bad parameters for {name}: {err}") from None


def log_partition(target: TargetDensity, grid: GridQuadrature | None = None,
                  check: bool = True) -> float:
    """``log ∫ exp(-U(x)/kT) dx`` by grid quadrature.

    With ``check`` the grid must hold all but 1e-6 of the mass away from its
    boundary ring, and doubling the resolution must move the result by less
    than 1e-3.
    """
    grid = grid or target.default_grid()
    log_f = -target.energy(grid.nodes) / target.kT
    value = grid.log_integrate(log_f)
    if check:
        ring = grid.log_integrate(np.where(grid.boundary_mask, log_f, -np.inf))
        if ring - value > math.log(1e-6):
            raise QuadratureError(
                f"grid boundary holds {math.exp(ring - value):.2e} of the mass; enlarge the box"
            )
        fine = grid.refined(2)
        fine_value = fine.log_integrate(-target.energy(fine.nodes) / target.kT)
        if abs(fine_value - value) > 1e-3:
            raise QuadratureError(
                f"grid too coarse: doubling resolution moved log Z by {abs(fine_value - value):.2e}"
            )
    return value


def region_free_energy(target: TargetDensity, region=(0.0, 2.0), coordinate: int = 0,
                       grid: GridQuadrature | None = None) -> float:
    """Quadrature ``-log(mass in region / mass outside)`` along one coordinate."""
    if isinstance(target, TwoWell) and coordinate == 0 and grid is None:
        return target.free_energy_difference(region)
    grid = grid or target.default_grid()
    log_f = -target.energy(grid.nodes) / target.kT
    c = grid.nodes[:, coordinate]
    inside = (c > region[0]) & (c < region[1])
    return -(grid.log_integrate(np.where(inside, log_f, -np.inf))
             - grid.log_integrate(np.where(inside, -np.inf, log_f)))
