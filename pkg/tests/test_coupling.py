import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from boltznce.coupling import couple, hungarian_couple, independent_couple


def test_singleton():
    c = hungarian_couple(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]))
    assert list(c.permutation) == [0] and c.cost == pytest.approx(2.0)


def test_two_points_swap():
    c = hungarian_couple(np.array([[0.0, 0.0], [10.0, 0.0]]), np.array([[9.0, 0.0], [1.0, 0.0]]))
    assert list(c.permutation) == [1, 0] and c.cost == pytest.approx(2.0)


def test_self_coupling_is_identity(rng):
    x = rng.standard_normal((20, 2))
    c = hungarian_couple(x, x)
    assert list(c.permutation) == list(range(20)) and c.cost == 0.0


def test_independent(rng):
    x0, x1 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    c = independent_couple(x0, x1)
    assert list(c.permutation) == [0, 1, 2]
    assert c.cost == pytest.approx(((x0 - x1) ** 2).sum())
    assert hungarian_couple(x0, x1).cost <= c.cost + 1e-12


def test_apply_reorders(rng):
    x0, x1 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    c = hungarian_couple(x0, x1)
    assert c.cost == pytest.approx(((x0 - c.apply(x1)) ** 2).sum())


def test_errors(rng):
    with pytest.raises(ValueError):
        hungarian_couple(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))
    with pytest.raises(ValueError):
        independent_couple(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        couple("sinkhorn", np.zeros((2, 2)), np.zeros((2, 2)))


@given(st.integers(1, 6), st.integers(0, 10_000))
def test_matches_brute_force(n, seed):
    r = np.random.default_rng(seed)
    x0, x1 = r.standard_normal((n, 2)), r.standard_normal((n, 2))
    best = min(((x0 - x1[list(p)]) ** 2).sum() for p in itertools.permutations(range(n)))
    c = hungarian_couple(x0, x1)
    assert c.cost == pytest.approx(best, abs=1e-12)
    assert sorted(c.permutation) == list(range(n))


@given(arrays(float, (6, 2), elements=st.floats(-10, 10)), st.floats(-50, 50), st.floats(-50, 50))
def test_translation_invariance(x, dx, dy):
    x1 = x[::-1].copy() + 0.5
    shift = np.array([dx, dy])
    a = hungarian_couple(x, x1).cost
    b = hungarian_couple(x + shift, x1 + shift).cost
    assert a == pytest.approx(b, rel=1e-9, abs=1e-8)
