import numpy as np
import pytest

from sdn.blocks import (BOTH, FIRST, SECOND, Architecture, Dense, ElementaryBlock, InteractionMap, NoiseConcat,
                        PairFunction, SelfTensorize, apply_layer, elementary_block_apply, forward,
                        interaction_energy, load_checkpoint, make_gradient_flow_block, recurrent_iterate,
                        save_checkpoint)
from sdn.core import ArchitectureError, InvalidInputError, SeededRng
from sdn.measure import DiscreteMeasure, dirac, push_forward, uniform_on
from sdn.transport import w1_between_laws
from sdn.train import make_classifier

from conftest import random_measure


def _identity_sum_map(q):
    return InteractionMap([np.hstack([np.eye(q), np.eye(q)])], [np.zeros(q)], BOTH, "identity")


def test_interaction_eval_examples(rng):
    f = _identity_sum_map(2)
    x, xp = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    np.testing.assert_array_equal(f(x, xp), x + xp)
    g = InteractionMap.init(rng, [2, 4, 3], SECOND)
    np.testing.assert_array_equal(g(np.array([9.0, -9.0]), xp), g(np.array([0.0, 0.0]), xp))
    with pytest.raises(InvalidInputError):
        f(np.ones(3), np.ones(3))


def test_interaction_eval_matches_matrix_arithmetic(rng):
    f = InteractionMap.init(rng, [3, 5], BOTH)
    x, xp = rng.normal(3), rng.normal(3)
    A, b = f.weights[0], f.biases[0]
    np.testing.assert_allclose(f(x, xp), np.maximum(A @ np.concatenate([x, xp]) + b, 0.0), atol=1e-15)


def test_elementary_block_examples(rng):
    ident = InteractionMap([np.eye(2)], [np.zeros(2)], FIRST, "identity")
    mu = random_measure(rng, 5, 2)
    out = elementary_block_apply(mu, ident)
    np.testing.assert_array_equal(out.points, mu.points)
    np.testing.assert_array_equal(out.weights, mu.weights)
    f = InteractionMap.init(rng, [2, 3], BOTH)
    x = np.array([0.2, 0.7])
    np.testing.assert_allclose(elementary_block_apply(dirac(x), f).points[0], f(x, x))
    two = elementary_block_apply(uniform_on([[0.0], [1.0]]), _identity_sum_map(1))
    np.testing.assert_allclose(two.points, [[0.5], [1.5]])
    np.testing.assert_array_equal(two.weights, [0.5, 0.5])


def test_elementary_block_weighted_double_loop(rng):
    f = InteractionMap.init(rng, [2, 4, 3], BOTH)
    mu = random_measure(rng, 6, 2)
    out = elementary_block_apply(mu, f)
    pts = mu.points
    for i in range(mu.n):
        want = sum(mu.weights[j] * f(pts[i], pts[j]) for j in range(mu.n))
        np.testing.assert_allclose(out.points[i], want, atol=1e-14)


def test_second_only_collapses_to_one_atom(rng):
    g = InteractionMap.init(rng, [2, 3], SECOND)
    mu = random_measure(rng, 5, 2)
    out = elementary_block_apply(mu, g)
    assert out.n == 1 and out.weights[0] == 1.0
    np.testing.assert_allclose(out.points[0], mu.weights @ g(mu.points, mu.points), atol=1e-15)


def test_block_permutation_equivariance(rng):
    f = InteractionMap.init(rng, [2, 4], BOTH)
    mu = random_measure(rng, 7, 2)
    perm = rng.permutation(7)
    a, b = elementary_block_apply(mu, f), elementary_block_apply(mu.permuted(perm), f)
    np.testing.assert_allclose(a.points[perm], b.points, atol=1e-12)


def test_cutoff_masks_far_pairs():
    f = PairFunction(lambda x, xp: xp, BOTH)
    mu = uniform_on([[0.0], [10.0]])
    out = elementary_block_apply(mu, f, cutoff=1.0)
    np.testing.assert_allclose(out.points, [[0.0], [5.0]])


def test_apply_layer_examples(rng):
    x = np.array([0.3, 0.4])
    lifted = apply_layer(dirac(x), NoiseConcat(1, "uniform01", 3), SeededRng(5))
    u = SeededRng(5).uniform((3, 1))
    np.testing.assert_array_equal(lifted.points, np.column_stack([np.tile(x, (3, 1)), u]))
    np.testing.assert_allclose(lifted.weights, 1 / 3)
    mu = random_measure(rng, 4, 2)
    assert apply_layer(mu, SelfTensorize(1)) is mu
    vec = rng.normal(3)
    np.testing.assert_array_equal(apply_layer(vec, Dense(np.eye(3), np.zeros(3), "identity")), vec)


def test_apply_layer_kind_errors(rng):
    mu = random_measure(rng, 4, 2)
    with pytest.raises(ArchitectureError, match="layer 3"):
        apply_layer(mu, Dense(np.eye(2), np.zeros(2)), index=3)
    with pytest.raises(ArchitectureError):
        apply_layer(mu, NoiseConcat(1))


def test_forward_examples(rng):
    mu = random_measure(rng, 5, 2)
    assert forward(Architecture([]), mu) is mu
    h1 = InteractionMap.init(rng.spawn(0), [2, 3], FIRST)
    h2 = InteractionMap.init(rng.spawn(1), [3, 2], FIRST, "identity")
    arch = Architecture([ElementaryBlock(h1), ElementaryBlock(h2)], "predictive", 2)
    direct = push_forward(lambda x: h2(h1(x, x), h1(x, x)), mu)
    np.testing.assert_allclose(forward(arch, mu).points, direct.points, atol=1e-14)


def test_classifier_permutation_invariance(rng):
    arch = make_classifier(rng, n_classes=4, tensorize=True)
    mu = random_measure(rng, 9, 2)
    s1 = forward(arch, mu)
    s2 = forward(arch, mu.permuted(rng.permutation(9)))
    np.testing.assert_allclose(s1, s2, atol=1e-9)


def test_architecture_validation(rng):
    f = InteractionMap.init(rng, [2, 3], BOTH)
    with pytest.raises(ArchitectureError):
        Architecture([ElementaryBlock(f), Dense.init(rng, 3, 2)], "discriminative", 2)
    with pytest.raises(ArchitectureError):
        Architecture([ElementaryBlock(f)], "predictive", 3)
    with pytest.raises(ArchitectureError):
        Architecture([ElementaryBlock(f)], "generative", 2)
    with pytest.raises(ArchitectureError):
        Architecture([ElementaryBlock(f)], "discriminative", 2)


def test_gradient_flow_block(rng):
    zero = make_gradient_flow_block(lambda x, xp: np.zeros_like(x), 0.1)
    mu = random_measure(rng, 6, 2, uniform=True)
    np.testing.assert_allclose(elementary_block_apply(mu, zero).points, mu.points)
    tau = 0.01
    block = make_gradient_flow_block(lambda x, xp: x - xp, tau)
    out = elementary_block_apply(mu, block)
    m = mu.mean()
    np.testing.assert_allclose(out.points, mu.points - 2 * tau * (mu.points - m), atol=1e-15)
    np.testing.assert_allclose(out.mean(), m, atol=1e-15)


def test_recurrent_iterate(rng):
    mu = random_measure(rng, 6, 2)
    assert recurrent_iterate(PairFunction(lambda x, xp: x), mu, 0) == [mu]
    traj = recurrent_iterate(PairFunction(lambda x, xp: x), mu, 3)
    for m in traj:
        np.testing.assert_allclose(m.points, mu.points, atol=1e-15)
    F = lambda x, xp: 0.5 * np.sum((x - xp) ** 2, axis=-1)
    flow = recurrent_iterate(make_gradient_flow_block(lambda x, xp: x - xp, 0.01), mu, 10)
    energies = [interaction_energy(F, m) for m in flow]
    assert all(e1 < e0 for e0, e1 in zip(energies, energies[1:]))


def test_pushforward_lipschitz(rng):
    for k in range(20):
        sub = rng.spawn(k)
        h = InteractionMap.init(sub.spawn(0), [2, 2], FIRST, "identity")
        mu, nu = random_measure(sub.spawn(1), 4, 2), random_measure(sub.spawn(2), 5, 2)
        lip = h.lipschitz_bounds()[0]
        lhs = w1_between_laws(elementary_block_apply(mu, h), elementary_block_apply(nu, h))
        assert lhs <= lip * w1_between_laws(mu, nu) + 1e-9


def test_composition_bound(rng):
    for k in range(10):
        sub = rng.spawn(k)
        arch = Architecture([ElementaryBlock(InteractionMap.init(sub.spawn(0), [2, 3], BOTH)),
                             ElementaryBlock(InteractionMap.init(sub.spawn(1), [3, 2], BOTH))], "predictive", 2)
        mu, nu = random_measure(sub.spawn(2), 4, 2, uniform=True), random_measure(sub.spawn(3), 4, 2, uniform=True)
        lhs = w1_between_laws(forward(arch, mu), forward(arch, nu))
        assert lhs <= arch.lipschitz_bound() * w1_between_laws(mu, nu) + 1e-9


def test_checkpoint_round_trip(tmp_path, rng):
    arch = make_classifier(rng, n_classes=3, tensorize=True)
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, arch, {"name": "PCG64", "seed": 3})
    back = load_checkpoint(path)
    mu = random_measure(rng, 5, 2)
    np.testing.assert_array_equal(forward(back, mu), forward(arch, mu))
    gen = Architecture([NoiseConcat(2, "gaussian", 7),
                        ElementaryBlock(InteractionMap.init(rng, [5, 2], FIRST))], "generative")
    assert load_checkpoint(_dump(tmp_path, gen)).layers[0] == gen.layers[0]


def _dump(tmp_path, arch):
    path = tmp_path / "gen.json"
    save_checkpoint(path, arch)
    return path
