"""Property suites behind ``sdn verify``.

Each suite returns a list of report dicts ``{test, pass, ...}``; the
numbers come from exact oracles (assignment / LP Wasserstein, closed
forms, finite differences) rather than from the code under test.
"""
from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .blocks import (BOTH, FIRST, Architecture, ElementaryBlock, InteractionMap, elementary_block_apply, forward,
                     interaction_energy, make_gradient_flow_block, recurrent_iterate)
from .core import SeededRng
from .flocking import FlockConfig, FlockState, sample_masses, sample_scenario, simulate, step
from .measure import DiscreteMeasure, GridSpec, discretize_p1, push_forward, reconstruct, tensor_product
from .transport import (SinkhornConfig, entropic_bias_bound, exact_wasserstein, sinkhorn_cost, sinkhorn_divergence,
                        w1_between_laws, wasserstein_1d)
from .universal import assemble_three_block_pipeline, lipschitz_harness, moment_functional

SUITES = ("lipschitz", "discretization", "sinkhorn", "gradients", "universality", "flocking")


def _report(name, passed, started, **fields):
    rec = {"test": name, "pass": bool(passed)}
    rec.update(fields)
    rec["seconds"] = round(time.perf_counter() - started, 3)
    return rec


def _random_measure(rng, n_max=6, dim=1, lo=0.0, hi=1.0, uniform=False):
    n = int(rng.integers(1, n_max + 1))
    pts = rng.uniform((n, dim), lo, hi)
    if uniform:
        return DiscreteMeasure(pts)
    w = rng.uniform(n, 0.1, 1.0)
    return DiscreteMeasure(pts, w / w.sum())


# --- structural properties of blocks -----------------------------------------

def _random_architecture(rng):
    """Small random stack covering the three dependence tags and dense heads."""
    q = int(rng.integers(1, 4))
    kind = int(rng.integers(0, 3))
    w1, w2 = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    if kind == 0:
        layers = [ElementaryBlock(InteractionMap.init(rng.spawn(0), [q, w1], BOTH)),
                  ElementaryBlock(InteractionMap.init(rng.spawn(1), [w1, w2], BOTH, "identity"))]
        return Architecture(layers, "predictive", q)
    from .blocks import SECOND, Dense, SelfTensorize
    if kind == 1:
        layers = [ElementaryBlock(InteractionMap.init(rng.spawn(0), [q, w1], BOTH)),
                  SelfTensorize(2),
                  ElementaryBlock(InteractionMap.init(rng.spawn(1), [2 * w1, w2], SECOND)),
                  Dense.init(rng.spawn(2), w2, 3, "identity")]
        return Architecture(layers, "discriminative", q)
    layers = [ElementaryBlock(InteractionMap.init(rng.spawn(0), [q, w1, w1], FIRST)),
              ElementaryBlock(InteractionMap.init(rng.spawn(1), [w1, w2], SECOND)),
              Dense.init(rng.spawn(2), w2, 2, "identity")]
    return Architecture(layers, "discriminative", q)


def check_permutation_invariance(rng: SeededRng, trials=100, tol=1e-9):
    """Forward outputs under random atom permutations agree as measures."""
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(trials):
        sub = rng.spawn(k)
        arch = _random_architecture(sub.spawn(0))
        mu = _random_measure(sub.spawn(1), n_max=7, dim=arch.input_dim)
        perm = sub.spawn(2).permutation(mu.n)
        a, b = forward(arch, mu), forward(arch, mu.permuted(perm))
        if isinstance(a, DiscreteMeasure):
            # the output atoms follow the input permutation
            gap = max(np.max(np.abs(ad.value(a.points)[perm] - ad.value(b.points))),
                      np.max(np.abs(a.weights[perm] - b.weights)))
        else:
            gap = float(np.max(np.abs(ad.value(a) - ad.value(b))))
        worst = max(worst, float(gap))
    return _report("permutation_invariance", worst <= tol, t0, trials=trials, max_gap=worst, tol=tol)


def check_block_lipschitz(rng: SeededRng, trials=50, slack=1e-6):
    """``W1(T_f mu, T_f nu) <= r (L1 + L2) W1(mu, nu)`` with exact W1."""
    t0 = time.perf_counter()
    maps = {}

    def block_for(sub):
        q = int(sub.integers(1, 3))
        widths = [q, int(sub.integers(2, 5)), int(sub.integers(1, 3))]
        return InteractionMap.init(sub, widths, BOTH)

    def sampler(sub):
        f = block_for(sub.spawn(0))
        mu = _random_measure(sub.spawn(1), dim=f.in_dim, uniform=True)
        nu = _random_measure(sub.spawn(2), dim=f.in_dim, uniform=True)
        maps[id(mu)] = maps[id(nu)] = f
        return mu, nu

    def bound(mu, nu):
        L1, L2 = maps[id(mu)].lipschitz_bounds()
        return maps[id(mu)].out_dim * (L1 + L2)

    rep = lipschitz_harness(lambda m: elementary_block_apply(m, maps[id(m)]), sampler, bound, trials, rng,
                            name="block_lipschitz", slack=slack)
    return _report(rep.name, rep.passed, t0, trials=rep.trials, max_ratio=rep.max_ratio, bound=rep.bound,
                   skipped=rep.skipped)


def check_tensorization_lipschitz(rng: SeededRng, trials=50, slack=1e-8):
    """``W1(mu x nu, mu' x nu') <= W1(mu, mu') + W1(nu, nu')``."""
    t0 = time.perf_counter()
    worst_excess, ok = -np.inf, True
    for k in range(trials):
        sub = rng.spawn(k)
        dp, dq = int(sub.integers(1, 3)), int(sub.integers(1, 3))
        mu, mu2 = _random_measure(sub.spawn(0), dim=dp), _random_measure(sub.spawn(1), dim=dp)
        nu, nu2 = _random_measure(sub.spawn(2), dim=dq), _random_measure(sub.spawn(3), dim=dq)
        lhs = w1_between_laws(tensor_product(mu, nu), tensor_product(mu2, nu2))
        rhs = w1_between_laws(mu, mu2) + w1_between_laws(nu, nu2)
        worst_excess = max(worst_excess, lhs - rhs)
        ok &= lhs <= rhs + slack
    return _report("tensorization_lipschitz", ok, t0, trials=trials, max_excess=float(worst_excess), tol=slack)


def check_pushforward_lipschitz(rng: SeededRng, trials=30, slack=1e-9):
    t0 = time.perf_counter()
    holder = {}

    def sampler(sub):
        h = InteractionMap.init(sub.spawn(0), [2, 2], FIRST, "identity")
        holder["h"] = h
        return (_random_measure(sub.spawn(1), dim=2, uniform=True),
                _random_measure(sub.spawn(2), dim=2, uniform=True))

    def bound(mu, nu):
        return holder["h"].lipschitz_bounds()[0]

    rep = lipschitz_harness(lambda m: push_forward(lambda x: holder["h"](x, x), m), sampler, bound, trials, rng,
                            name="pushforward_lipschitz", slack=slack)
    return _report(rep.name, rep.passed, t0, trials=rep.trials, max_ratio=rep.max_ratio, bound=rep.bound)


def suite_lipschitz(rng: SeededRng, trials=50):
    return [check_permutation_invariance(rng.spawn(0)),
            check_block_lipschitz(rng.spawn(1), trials),
            check_tensorization_lipschitz(rng.spawn(2), trials),
            check_pushforward_lipschitz(rng.spawn(3))]


# --- discretization -----------------------------------------------------------

def check_discretization(rng: SeededRng, trials=100, k_choices=(3, 4, 5, 8)):
    """``W1(D* D mu, mu) <= sqrt(q) / n^(1/q)`` with ``n = k^q`` nodes."""
    t0 = time.perf_counter()
    worst, ok = 0.0, True
    for t in range(trials):
        sub = rng.spawn(t)
        q = 1 + t % 2
        k = int(k_choices[int(sub.integers(0, len(k_choices)))])
        grid = GridSpec(q, k)
        mu = _random_measure(sub, n_max=50, dim=q)
        a = discretize_p1(mu, grid)
        if q == 1:
            err = wasserstein_1d(reconstruct(a, grid), mu)
        else:
            err = w1_between_laws(reconstruct(a, grid), mu)
        bound = np.sqrt(q) / grid.n_nodes ** (1.0 / q)
        worst = max(worst, err / bound)
        ok &= err <= bound
    return _report("discretization_bound", ok, t0, trials=trials, max_ratio_to_bound=float(worst))


def suite_discretization(rng: SeededRng, trials=100):
    return [check_discretization(rng, trials)]


# --- Sinkhorn -------------------------------------------------------------------

def check_sinkhorn_vs_exact(rng: SeededRng, pairs=20, eps=0.01, n=4, p=2, slack=1e-3):
    """``|sinkhorn_cost - W_p^p| <= eps log(n^2) + slack`` on uniform n-point pairs."""
    t0 = time.perf_counter()
    cfg = SinkhornConfig(epsilon=eps, p=p)
    bound = entropic_bias_bound(eps, n, n) + slack
    worst, ok, unconverged = 0.0, True, 0
    for k in range(pairs):
        sub = rng.spawn(k)
        a, b = DiscreteMeasure(sub.uniform((n, 2))), DiscreteMeasure(sub.uniform((n, 2)))
        res = sinkhorn_cost(a, b, cfg)
        # near-tied assignments converge slowly; the cost is still accurate
        unconverged += not res.converged
        gap = abs(res.cost - exact_wasserstein(a, b, p) ** p)
        worst = max(worst, gap)
        ok &= gap <= bound
    return _report(f"sinkhorn_vs_exact_p{p}", ok, t0, pairs=pairs, epsilon=eps, max_gap=float(worst),
                   bound=float(bound), unconverged=unconverged)


def check_divergence_self(rng: SeededRng, pairs=20, n=4, tol=1e-9):
    t0 = time.perf_counter()
    cfg = SinkhornConfig(epsilon=0.01)
    worst = 0.0
    for k in range(pairs):
        a = DiscreteMeasure(rng.spawn(k).uniform((n, 2)))
        worst = max(worst, abs(float(sinkhorn_divergence(a, a, cfg))))
    return _report("sinkhorn_divergence_self", worst <= tol, t0, pairs=pairs, max_value=worst, tol=tol)


def suite_sinkhorn(rng: SeededRng, pairs=20, eps=0.01):
    return [check_sinkhorn_vs_exact(rng.spawn(0), pairs, eps, p=2),
            check_sinkhorn_vs_exact(rng.spawn(1), pairs, eps, p=1),
            check_divergence_self(rng.spawn(2), pairs)]


# --- gradients --------------------------------------------------------------------

def check_classifier_gradient(rng: SeededRng, n_coords=50, tol=1e-4):
    from .train import classifier_loss, make_blob_ring_dataset, make_classifier
    t0 = time.perf_counter()
    arch = make_classifier(rng.spawn(0), n_classes=3)
    data = make_blob_ring_dataset(rng.spawn(1), 3, n_points=12)
    weights = np.array([1.0, 2.0, 0.5])

    def loss(pv):
        total = 0.0
        for mu, lab in data:
            total = classifier_loss(arch, pv, mu, lab, weights) + total
        return total * (1.0 / len(data))

    rep = ad.grad_check(loss, arch.params(), tol=tol, n_coords=n_coords, rng=rng.spawn(2))
    return _report("classifier_gradient", rep.passed, t0, max_rel_error=rep.max_rel_error,
                   coords=rep.n_checked, tol=tol)


def check_vae_gradient(rng: SeededRng, n_coords=50, tol=1e-4):
    from .train import VaeConfig, make_shape_dataset, make_vae, vae_loss
    t0 = time.perf_counter()
    vcfg = VaeConfig(n_atoms=20, hidden=8)
    enc, dec = make_vae(rng.spawn(0), vcfg)
    mu = make_shape_dataset(rng.spawn(1), 1, n_points=20)[0]
    scfg = SinkhornConfig(unroll_iters=20)
    n_enc = len(enc.params())

    def loss(pv):
        # identical noise on every evaluation
        total, _, _ = vae_loss(enc, dec, pv[:n_enc], pv[n_enc:], mu, vcfg, scfg, rng.spawn(3))
        return total

    rep = ad.grad_check(loss, enc.params() + dec.params(), tol=tol, n_coords=n_coords, rng=rng.spawn(2))
    return _report("vae_gradient", rep.passed, t0, max_rel_error=rep.max_rel_error, coords=rep.n_checked, tol=tol)


def check_sinkhorn_gradient(rng: SeededRng, tol=1e-4):
    """Unrolled divergence between a parameterized push-forward and a target."""
    t0 = time.perf_counter()
    mu = DiscreteMeasure(rng.spawn(0).normal((6, 2)))
    target = DiscreteMeasure(rng.spawn(1).normal((5, 2)) + 1.0)
    A = np.eye(2) + 0.1 * rng.spawn(2).normal((2, 2))
    cfg = SinkhornConfig(unroll_iters=20)

    def loss(pv):
        pushed = push_forward(lambda x: ad.matmul(x, pv[0]) + pv[1], mu)
        return sinkhorn_divergence(pushed, target, cfg, unrolled=True)

    rep = ad.grad_check(loss, [A, np.zeros(2)], tol=tol)
    return _report("sinkhorn_gradient", rep.passed, t0, max_rel_error=rep.max_rel_error, tol=tol)


def suite_gradients(rng: SeededRng, n_coords=50):
    return [check_classifier_gradient(rng.spawn(0), n_coords),
            check_vae_gradient(rng.spawn(1), n_coords),
            check_sinkhorn_gradient(rng.spawn(2))]


# --- universality -------------------------------------------------------------------

def square_oracle(mu: DiscreteMeasure) -> DiscreteMeasure:
    return push_forward(lambda x: x ** 2, mu)


def check_refinement(rng: SeededRng, ks=(16, 32, 64), n_inputs=5, eps=0.01, n_noise=1000, final_tol=0.1):
    """Pipeline error for x -> x^2 shrinks from the coarsest to the finest grid."""
    t0 = time.perf_counter()
    inputs = [DiscreteMeasure(rng.spawn(0, j).uniform((10, 1))) for j in range(n_inputs)]
    errors = []
    for k in ks:
        pipe = assemble_three_block_pipeline(square_oracle, GridSpec(1, k), GridSpec(1, k), eps, n_noise)
        # common noise across grid sizes
        errs = [wasserstein_1d(pipe(mu, rng.spawn(1, j)), square_oracle(mu)) for j, mu in enumerate(inputs)]
        errors.append(float(np.mean(errs)))
    ok = errors[-1] < errors[0] and errors[-1] <= final_tol
    return _report("universality_refinement", ok, t0, grids=list(ks), mean_w1=errors, final_tol=final_tol)


def check_moments(rng: SeededRng, trials=10, tol=1e-12):
    t0 = time.perf_counter()
    two_points = DiscreteMeasure(np.array([[0.0], [1.0]]))
    value = moment_functional(lambda x, y: x[:, 0] * y[:, 0], 2, two_points)
    ok = abs(value - 0.25) <= tol
    worst = abs(value - 0.25)
    for k in range(trials):
        mu = _random_measure(rng.spawn(k), n_max=5, dim=2)
        # phi1 on slot 0, phi2 on slots 1-2
        m1 = moment_functional(lambda x: np.sin(x[:, 0]) + x[:, 1], 1, mu)
        m2 = moment_functional(lambda x, y: x[:, 0] * y[:, 1] + 1.0, 2, mu)
        m12 = moment_functional(lambda x, y, z: (np.sin(x[:, 0]) + x[:, 1]) * (y[:, 0] * z[:, 1] + 1.0), 3, mu)
        gap = abs(m12 - m1 * m2)
        worst = max(worst, gap)
        ok &= gap <= 1e-10
    return _report("moment_functionals", ok, t0, example_value=value, max_gap=float(worst))


def suite_universality(rng: SeededRng):
    return [check_refinement(rng.spawn(0)), check_moments(rng.spawn(1))]


# --- dynamics -----------------------------------------------------------------------

def check_momentum(rng: SeededRng, steps=10_000, n=50, tol=1e-9):
    """Per-step drift of the weighted momentum under RK4."""
    t0 = time.perf_counter()
    state = FlockState(rng.normal((n, 2)), rng.normal((n, 2), 0.0, 0.1), sample_masses(rng, n))
    cfg = FlockConfig(dt=0.01)
    worst = 0.0
    prev = state.momentum()
    for _ in range(steps):
        state = step(state, cfg)
        cur = state.momentum()
        worst = max(worst, float(np.max(np.abs(cur - prev))))
        prev = cur
    return _report("momentum_conservation", worst < tol, t0, steps=steps, max_step_drift=worst, tol=tol)


def check_dispersion(rng: SeededRng, scenarios=10, n=100, slack=1e-9):
    t0 = time.perf_counter()
    worst_rise, ok = -np.inf, True
    for k in range(scenarios):
        state = sample_scenario(rng.spawn(k), 2 + k % 3, n_particles=n)
        traj = simulate(state, FlockConfig(), record_every=1)
        disp = np.array([s.dispersion() for s in traj.states])
        rise = float(np.max(np.diff(disp))) if disp.size > 1 else 0.0
        worst_rise = max(worst_rise, rise)
        ok &= rise <= slack and traj.converged
    return _report("dispersion_monotone", ok, t0, scenarios=scenarios, n=n, max_rise=worst_rise, slack=slack)


def quadratic_potential(x, xp):
    return 0.5 * np.sum((x - xp) ** 2, axis=-1)


def check_gradient_flow(rng: SeededRng, steps=10, tau=0.01):
    t0 = time.perf_counter()
    block = make_gradient_flow_block(lambda x, xp: x - xp, tau)
    mu0 = DiscreteMeasure(rng.normal((20, 2)), sample_masses(rng, 20))
    energies = [interaction_energy(quadratic_potential, m) for m in recurrent_iterate(block, mu0, steps)]
    ok = bool(np.all(np.diff(energies) < 0))
    return _report("gradient_flow_energy", ok, t0, steps=steps, tau=tau, energies=energies)


def suite_flocking(rng: SeededRng):
    return [check_momentum(rng.spawn(0)), check_dispersion(rng.spawn(1)), check_gradient_flow(rng.spawn(2))]


def run_suite(name: str, rng: SeededRng) -> list:
    table = {"lipschitz": suite_lipschitz, "discretization": suite_discretization, "sinkhorn": suite_sinkhorn,
             "gradients": suite_gradients, "universality": suite_universality, "flocking": suite_flocking}
    names = SUITES if name == "all" else (name,)
    out = []
    for k, s in enumerate(names):
        out += table[s](rng.spawn(SUITES.index(s)))
    return out
