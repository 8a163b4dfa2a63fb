import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from boltznce.interpolant import (EP_WEIGHT_MAX, endpoint_coefficient, endpoint_vector_field,
                                  interpolate, make_schedule)

KINDS = ["linear", "trig"]


@pytest.mark.parametrize("kind", KINDS)
def test_boundary_conditions(kind):
    s = make_schedule(kind)
    assert s.alpha(0.0) == pytest.approx(1.0) and s.sigma(0.0) == pytest.approx(0.0, abs=1e-15)
    assert s.alpha(1.0) == pytest.approx(0.0, abs=1e-15) and s.sigma(1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_monotone_and_derivatives(kind):
    s = make_schedule(kind)
    t = np.linspace(0, 1, 201)
    assert np.all(np.diff(s.alpha(t)) < 0) and np.all(np.diff(s.sigma(t)) > 0)
    h = 1e-4
    tt = np.linspace(h, 1 - h, 50)
    assert np.allclose((s.alpha(tt + h) - s.alpha(tt - h)) / (2 * h), s.alpha_dot(tt), atol=1e-6)
    assert np.allclose((s.sigma(tt + h) - s.sigma(tt - h)) / (2 * h), s.sigma_dot(tt), atol=1e-6)


def test_interpolate_examples():
    lin, trig = make_schedule("linear"), make_schedule("trigonometric")
    x0, x1 = np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]])
    assert np.array_equal(interpolate(lin, np.array([0.0]), x0, x1), x0)
    assert np.allclose(interpolate(lin, np.array([0.5]), x0, x1), [[1.0, 1.0]])
    out = interpolate(trig, np.array([0.5]), np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert np.allclose(out, [[math.sqrt(2) / 2, math.sqrt(2) / 2]])


def test_interpolate_rejects_bad_time():
    s = make_schedule("linear")
    with pytest.raises(ValueError):
        interpolate(s, np.array([1.5]), np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        make_schedule("cosine")


@given(st.floats(0, 1), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_reconstruction(t, v):
    s = make_schedule("trig")
    x0, x1 = np.array([v[:2]]), np.array([v[2:]])
    xt = interpolate(s, np.array([t]), x0, x1)
    assert np.allclose(xt, s.alpha(t) * x0 + s.sigma(t) * x1, atol=1e-14)


def test_endpoint_coefficient_examples():
    lin = make_schedule("linear")
    assert endpoint_coefficient(lin, 0.5) == pytest.approx(2.0)
    assert endpoint_coefficient(lin, 1.0) == pytest.approx(1.0)
    for kind in KINDS:
        assert endpoint_coefficient(make_schedule(kind), 1e-9) == EP_WEIGHT_MAX
    assert float(endpoint_coefficient(lin, torch.tensor(0.5))) == pytest.approx(2.0)


def test_endpoint_vector_field_linear_endpoint():
    lin = make_schedule("linear")
    x0, x1 = np.array([[1.0, -2.0]]), np.array([[0.3, 0.7]])
    v = endpoint_vector_field(lin, np.array([1.0]), x1, x0)
    assert np.allclose(v, x1 - x0)


def test_endpoint_vector_field_guard_and_bound():
    lin = make_schedule("linear")
    x, xh = np.array([[1.0, 2.0]]), np.array([[-3.0, 0.5]])
    with pytest.raises(ValueError):
        endpoint_vector_field(lin, np.array([5e-4]), x, xh)
    v = endpoint_vector_field(lin, np.array([1e-3]), x, xh)
    bound = (np.abs(x) + np.abs(xh)) / 1e-3
    assert np.all(np.isfinite(v)) and np.all(np.abs(v) <= bound)


def test_endpoint_field_matches_gaussian_posterior():
    # x0 ~ N(0, s0^2), x1 ~ N(0, 1): E[x0 | x_t] is linear in x_t, so the
    # endpoint field must equal the velocity alpha_dot E[x0|x] + sigma_dot E[x1|x]
    s0 = 0.7
    for kind in KINDS:
        sch = make_schedule(kind)
        for t in (0.1, 0.5, 0.9):
            a, s = sch.alpha(t), sch.sigma(t)
            var = a * a * s0 * s0 + s * s
            x = np.array([[0.8, -1.3]])
            e0 = a * s0 * s0 / var * x
            e1 = s / var * x
            want = sch.alpha_dot(t) * e0 + sch.sigma_dot(t) * e1
            got = endpoint_vector_field(sch, np.array([t]), x, e0)
            assert np.allclose(got, want, atol=1e-12)


@given(st.floats(0.01, 0.99), st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_endpoint_objective_equivalence(t, v):
    for kind in KINDS:
        sch = make_schedule(kind)
        x0, x1, xh = (np.array([v[i:i + 2]]) for i in (0, 2, 4))
        xt = interpolate(sch, np.array([t]), x0, x1)
        target = sch.alpha_dot(t) * x0 + sch.sigma_dot(t) * x1
        err = ((endpoint_vector_field(sch, np.array([t]), xt, xh) - target) ** 2).sum()
        tw = endpoint_coefficient(sch, t, clamp=False)
        want = tw**2 * ((xh - x0) ** 2).sum()
        assert err == pytest.approx(want, rel=1e-8, abs=1e-10)
