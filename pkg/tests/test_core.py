import numpy as np
import pytest

from sdn.core import (EvaluationError, InvalidRangeError, SeededRng, finite_diff_grad, rng_normal, rng_uniform)


def test_uniform_is_deterministic():
    a = rng_uniform(SeededRng(7), [3], 0.0, 1.0)
    b = rng_uniform(SeededRng(7), [3], 0.0, 1.0)
    np.testing.assert_array_equal(a, b)


def test_uniform_degenerate_range():
    np.testing.assert_array_equal(rng_uniform(SeededRng(1), [4], 2.5, 2.5), np.full(4, 2.5))


def test_uniform_range_containment():
    x = rng_uniform(SeededRng(7), [1000], 0.0, 1.0)
    assert np.all((x >= 0.0) & (x < 1.0))


def test_uniform_rejects_inverted_range():
    with pytest.raises(InvalidRangeError):
        rng_uniform(SeededRng(0), [2], 1.0, 0.0)


def test_normal_zero_sd_and_errors():
    np.testing.assert_array_equal(rng_normal(SeededRng(3), [5], 0.5, 0.0), np.full(5, 0.5))
    with pytest.raises(InvalidRangeError):
        rng_normal(SeededRng(3), [5], 0.0, -1.0)


def test_normal_sample_mean():
    x = rng_normal(SeededRng(11), [100_000], 0.5, 0.1)
    assert abs(x.mean() - 0.5) < 0.002


def test_normal_deterministic():
    np.testing.assert_array_equal(SeededRng(5).normal(10), SeededRng(5).normal(10))


def test_spawn_is_independent_of_parent_state():
    parent = SeededRng(4)
    a = parent.spawn(1, 2).uniform(3)
    parent.uniform(100)
    b = parent.spawn(1, 2).uniform(3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, parent.spawn(2, 1).uniform(3))


def test_seed_must_fit_in_64_bits():
    with pytest.raises(InvalidRangeError):
        SeededRng(2**64)
    SeededRng(2**64 - 1)


def test_finite_diff_examples():
    np.testing.assert_allclose(finite_diff_grad(lambda x: x[0] ** 2, [1.0], h=1e-5), [2.0], atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, [1.0, 2.0]), [0.0, 0.0])
    np.testing.assert_allclose(finite_diff_grad(lambda x: x[0] * x[1], [2.0, 3.0]), [3.0, 2.0], atol=1e-6)


def test_finite_diff_quadratic_accuracy():
    r = SeededRng(2)
    A = r.normal((4, 4))
    M = A @ A.T
    x = r.normal(4)
    h = 1e-4
    g = finite_diff_grad(lambda v: 0.5 * v @ M @ v, x, h=h)
    exact = M @ x
    assert np.linalg.norm(g - exact) <= 10 * h**2 * np.linalg.norm(exact) + 1e-9


def test_finite_diff_non_finite():
    with pytest.raises(EvaluationError):
        finite_diff_grad(lambda x: np.inf if x[0] > 0 else 0.0, [0.0], h=1e-3)
