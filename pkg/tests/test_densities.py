import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate
from scipy.special import logsumexp

from boltznce.densities import (Checkerboard, EightGaussians, GridQuadrature, QuadratureError,
                                TwoWell, log_partition, make_target, region_free_energy)


def test_eight_gaussians_peak_value():
    tg = make_target("eight_gaussians")
    c = tg.centers[0]
    # mixture formula evaluated directly at a mode center
    d2 = ((tg.centers - c) ** 2).sum(1)
    expected = logsumexp(-d2 / (2 * 0.3**2)) - math.log(8 * 2 * math.pi * 0.3**2)
    assert tg.log_density(c[None])[0] == pytest.approx(expected, abs=1e-12)


def test_checkerboard_on_square_density():
    tg = make_target("checkerboard")
    assert tg.density(np.array([[0.5, 0.5], [-1.5, -1.5], [1.2, -0.3]])) == pytest.approx(1 / 8)
    assert tg.density(np.array([[0.5, -0.5]]))[0] < 1e-12


def test_two_well_minimum_energy():
    tg = make_target("two_well", {"a": 1, "b": 1, "c": 1}, kT=1.0)
    assert tg.energy(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx([0.0, 0.0])


@pytest.mark.parametrize("name,params", [("nope", {}), ("eight_gaussians", {"scale": -1.0}),
                                         ("two_well", {"a": 0.0}), ("eight_gaussians", {"bogus": 1})])
def test_make_target_errors(name, params):
    with pytest.raises(ValueError):
        make_target(name, params)


def test_log_partition_gaussian():
    tg = make_target("gaussian")
    assert log_partition(tg) == pytest.approx(math.log(2 * math.pi), abs=1e-6)


def test_log_partition_two_well_oracle():
    tg = make_target("two_well", {"a": 1, "b": 1, "c": 1}, kT=1.0)
    # frozen from an independent separable 1D quad before the build
    assert log_partition(tg) == pytest.approx(1.2522911858184864, abs=1e-6)
    x1 = integrate.quad(lambda s: math.exp(-(s * s - 1) ** 2), -np.inf, np.inf)[0]
    assert tg.log_z == pytest.approx(math.log(x1) + 0.5 * math.log(math.pi), abs=1e-9)


def test_log_partition_kt_scaling():
    hot = make_target("two_well", {"a": 1, "b": 1, "c": 1}, kT=2.0)
    grid = hot.default_grid()
    u = hot.energy(grid.nodes)
    assert log_partition(hot) == pytest.approx(grid.log_integrate(-u / 2.0), abs=1e-9)


def test_log_partition_coarse_grid_flagged():
    tg = make_target("eight_gaussians")
    with pytest.raises(QuadratureError):
        log_partition(tg, GridQuadrature.box(-7, 7, points=12))
    with pytest.raises(QuadratureError):
        log_partition(tg, GridQuadrature.box(-2, 2, points=200))


@pytest.mark.parametrize("name", ["eight_gaussians", "checkerboard", "two_well", "gaussian"])
def test_density_integrates_to_one(name):
    tg = make_target(name)
    grid = tg.default_grid()
    p = tg.density(grid.nodes)
    assert np.all(p >= 0)
    assert grid.integrate(p) == pytest.approx(1.0, abs=1e-3)


def test_sampler_moments():
    n = 100_000
    tg = make_target("eight_gaussians")
    x = tg.sample(n, 0)
    # mean 0, covariance (r^2/2 + s^2) I for equally spaced modes on a circle
    var = 4.0**2 / 2 + 0.3**2
    se = math.sqrt(var / n)
    assert np.all(np.abs(x.mean(0)) < 3 * se)
    assert np.cov(x.T) == pytest.approx(np.eye(2) * var, abs=3 * var * math.sqrt(2 / n) + 1e-9)

    tw = make_target("two_well")
    y = tw.sample(n, 1)
    grid = tw.default_grid()
    p = tw.density(grid.nodes)
    for k in range(2):
        m = grid.integrate(p * grid.nodes[:, k])
        v = grid.integrate(p * (grid.nodes[:, k] - m) ** 2)
        assert abs(y[:, k].mean() - m) < 3 * math.sqrt(v / n)

    cb = make_target("checkerboard").sample(n, 2)
    assert np.all(np.abs(cb) <= 2) and np.all(cb.mean(0) ** 2 < (3 * math.sqrt(4 / 3 / n)) ** 2)
    assert np.all((np.floor(cb[:, 0]) + np.floor(cb[:, 1])) % 2 == 0)


def test_sample_is_seeded():
    tg = make_target("two_well")
    assert np.array_equal(tg.sample(50, 3), tg.sample(50, 3))
    assert tg.sample(0, 3).shape == (0, 2)


def test_two_well_free_energy_oracle():
    tw = make_target("two_well", {"tilt": 0.25})
    # frozen from scipy quad on the x1 marginal
    assert tw.free_energy_difference((0.0, 2.0)) == pytest.approx(1.8624530938717632, abs=1e-8)
    assert region_free_energy(tw, (0.0, 2.0)) == pytest.approx(1.8624530938717632, abs=2e-3)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_kt_carried_explicitly(x, y):
    cold = TwoWell(kT=0.5)
    hot = TwoWell(kT=2.0)
    pt = np.array([[x, y]])
    assert cold.energy(pt) == pytest.approx(hot.energy(pt))
    d_cold = cold.log_density(pt) + cold.log_z
    d_hot = hot.log_density(pt) + hot.log_z
    assert d_cold * 0.5 == pytest.approx(d_hot * 2.0, rel=1e-12, abs=1e-12)


def test_wrong_dimension_rejected():
    with pytest.raises(ValueError):
        EightGaussians().energy(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        Checkerboard(kT=0.0)
