import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdn.core import DomainError, InvalidInputError, ResourceLimitError, SeededRng
from sdn.measure import (DiscreteMeasure, GridSpec, dirac, discretize_p1, load_measures, p1_basis_eval,
                         push_forward, reconstruct, save_measures, self_tensorize, tensor_product, uniform_on)
from sdn.transport import w1_between_laws, wasserstein_1d

from conftest import random_measure


def test_uniform_on():
    np.testing.assert_array_equal(uniform_on([[1.0, 2.0]]).weights, [1.0])
    np.testing.assert_array_equal(uniform_on(np.zeros((4, 1))).weights, [0.25] * 4)
    dup = uniform_on([[1.0], [1.0], [2.0]])
    assert dup.n == 3  # duplicates are kept
    with pytest.raises(InvalidInputError):
        uniform_on(np.zeros((0, 2)))


def test_measure_invariants():
    with pytest.raises(InvalidInputError):
        DiscreteMeasure([[0.0], [1.0]], [0.7, 0.7])
    with pytest.raises(InvalidInputError):
        DiscreteMeasure([[0.0], [1.0]], [1.5, -0.5])


def test_push_forward():
    mu = DiscreteMeasure([[0.0], [1.0]])
    out = push_forward(lambda x: 2 * x + 1, mu)
    np.testing.assert_array_equal(out.points, [[1.0], [3.0]])
    np.testing.assert_array_equal(out.weights, mu.weights)
    same = push_forward(lambda x: x, mu)
    np.testing.assert_array_equal(same.points, mu.points)


def test_push_forward_matches_definition(rng):
    # int g d(h#mu) = int g o h dmu
    mu = random_measure(rng, 5, 2)
    h = lambda x: np.column_stack([np.sin(x[:, 0]), x[:, 0] * x[:, 1]])
    g = lambda y: np.cos(y[:, 0]) + y[:, 1] ** 2
    pushed = push_forward(h, mu)
    np.testing.assert_array_equal(pushed.weights, mu.weights)
    assert abs(pushed.integrate(g) - mu.integrate(lambda x: g(h(x)))) < 1e-14


def test_tensor_product_examples():
    d = tensor_product(dirac([1.0]), dirac([2.0, 3.0]))
    np.testing.assert_array_equal(d.points, [[1.0, 2.0, 3.0]])
    u = tensor_product(uniform_on(np.zeros((2, 1))), uniform_on(np.ones((3, 1))))
    assert u.n == 6
    np.testing.assert_allclose(u.weights, 1 / 6)
    w = tensor_product(DiscreteMeasure([[0.0], [1.0]], [0.3, 0.7]), DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5]))
    np.testing.assert_allclose(w.weights, [0.15, 0.15, 0.35, 0.35], atol=1e-15)
    # i-major enumeration
    np.testing.assert_array_equal(w.points, [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_tensor_product_marginals(rng):
    mu, nu = random_measure(rng.spawn(0), 4, 1), random_measure(rng.spawn(1), 3, 2)
    prod = tensor_product(mu, nu)
    W = prod.weights.reshape(4, 3)
    assert abs(prod.weights.sum() - 1) < 1e-12
    np.testing.assert_allclose(W.sum(axis=1), mu.weights, atol=1e-15)
    np.testing.assert_allclose(W.sum(axis=0), nu.weights, atol=1e-15)


def test_self_tensorize():
    mu = uniform_on([[0.0], [1.0]])
    assert self_tensorize(mu, 1) is mu
    sq = self_tensorize(mu, 2)
    np.testing.assert_array_equal(sq.points, [[0, 0], [0, 1], [1, 0], [1, 1]])
    np.testing.assert_allclose(sq.weights, 0.25)
    w = DiscreteMeasure([[0.0], [1.0], [2.0]], [0.2, 0.3, 0.5])
    np.testing.assert_allclose(self_tensorize(w, 2).weights, np.outer(w.weights, w.weights).ravel())
    with pytest.raises(ResourceLimitError):
        self_tensorize(uniform_on(np.zeros((11, 1))), 3, cap=1000)


def test_p1_basis_examples():
    grid = GridSpec(1, 3)
    np.testing.assert_allclose(p1_basis_eval(grid, [0.25]), [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(p1_basis_eval(grid, [0.5]), [0.0, 1.0, 0.0])
    g2 = GridSpec(2, 3)
    # row-major node order: node 5 is (0.5, 1.0)
    np.testing.assert_array_equal(g2.nodes()[5], [0.5, 1.0])
    np.testing.assert_array_equal(p1_basis_eval(g2, [0.5, 1.0]), np.eye(9)[5])
    with pytest.raises(DomainError):
        p1_basis_eval(grid, [1.1])
    np.testing.assert_allclose(p1_basis_eval(grid, [1.0 + 5e-10]), [0, 0, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=2), st.integers(2, 6))
def test_p1_partition_of_unity(x, k):
    phi = p1_basis_eval(GridSpec(2, k), x)
    assert abs(phi.sum() - 1.0) < 1e-12
    assert np.all(phi >= 0)


def test_discretize_examples():
    grid = GridSpec(1, 5)
    nodes = grid.nodes()
    np.testing.assert_array_equal(discretize_p1(dirac(nodes[2]), grid), np.eye(5)[2])
    np.testing.assert_allclose(discretize_p1(uniform_on(nodes), grid), np.full(5, 0.2))
    with pytest.raises(DomainError, match="support point 1"):
        discretize_p1(DiscreteMeasure([[0.5], [1.5]]), grid)


def test_discretize_bound_q1(rng):
    grid = GridSpec(1, 5)
    mu = random_measure(rng, 20, 1)
    a = discretize_p1(mu, grid)
    assert abs(a.sum() - 1) < 1e-10
    assert wasserstein_1d(reconstruct(a, grid), mu) <= 1 / 5


def test_reconstruct_examples():
    grid = GridSpec(2, 3)
    d = reconstruct(np.eye(9)[4], grid)
    assert d.weights[4] == 1.0
    np.testing.assert_array_equal(d.points[4], [0.5, 0.5])
    np.testing.assert_allclose(reconstruct(np.full(9, 1 / 9), grid).weights, 1 / 9)
    with pytest.raises(InvalidInputError):
        reconstruct(np.r_[-0.1, 1.1, np.zeros(7)], grid)


def test_round_trip_at_nodes(rng):
    grid = GridSpec(2, 4)
    a = rng.uniform(grid.n_nodes)
    a /= a.sum()
    np.testing.assert_allclose(discretize_p1(reconstruct(a, grid), grid), a, atol=1e-15)


def test_discretization_bound_q2(rng):
    for t in range(10):
        grid = GridSpec(2, 3 + t % 3)
        mu = random_measure(rng.spawn(t), 15, 2)
        err = w1_between_laws(reconstruct(discretize_p1(mu, grid), grid), mu)
        assert err <= np.sqrt(2) / grid.n_nodes ** 0.5


def test_jsonl_round_trip(tmp_path, rng):
    ms = [random_measure(rng.spawn(k), 3, 2) for k in range(3)]
    path = tmp_path / "m.jsonl"
    save_measures(path, ms, labels=[0, 1, 2])
    back = load_measures(path)
    for (m, lab), orig, want in zip(back, ms, range(3)):
        assert lab == want
        np.testing.assert_array_equal(m.points, orig.points)
        np.testing.assert_array_equal(m.weights, orig.weights)
    path.write_text('{"points": [[0.0], [2.0]]}\n')
    (m, lab), = load_measures(path)
    assert lab is None
    np.testing.assert_array_equal(m.weights, [0.5, 0.5])
