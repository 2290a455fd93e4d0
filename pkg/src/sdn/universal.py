"""Constructive pieces of the approximation results and a Lipschitz harness.

The three-block approximation evaluates

    mu -> H_# ( noise-concat ( G ( D_X mu ) ) ),   G = D_Y o F o D_X^*

where D_X / D_Y are P1 discretizations, F is the target functional and H
reshapes uniform noise into the mixture ``(1-eps) D_Y^*(b) + eps U``.
Only one-dimensional outputs are supported.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .blocks import FIRST, SECOND, Architecture, ElementaryBlock, NoiseConcat, PairFunction, forward
from .core import DomainError, InvalidRangeError, SeededRng
from .measure import (CUBE_TOL, DiscreteMeasure, GridSpec, discretize_p1, p1_basis_matrix, reconstruct,
                      self_tensorize)
from .transport import w1_between_laws


def noise_reshape_1d(b, u, eps: float, nodes=None):
    """Quantile function of ``(1-eps) sum_j b_j delta_{y_j} + eps Uniform[0,1]``.

    ``nodes`` defaults to the uniform grid on [0, 1] with ``len(b)`` nodes.
    Vectorized over ``u``; nondecreasing in ``u``.
    """
    if not 0 < eps <= 1:
        raise InvalidRangeError(f"mixing weight must lie in (0, 1], got {eps}")
    b = np.asarray(b, dtype=np.float64).ravel()
    y = np.linspace(0.0, 1.0, b.size) if nodes is None else np.asarray(nodes, dtype=np.float64).ravel()
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr < 0) | (u_arr > 1)):
        raise DomainError("noise value outside [0, 1]")
    order = np.argsort(y, kind="stable")
    y, b = y[order], b[order]
    mass_before = np.concatenate([[0.0], np.cumsum(b)[:-1]])
    jump_lo = (1 - eps) * mass_before + eps * y
    jump_hi = jump_lo + (1 - eps) * b
    uu = u_arr.ravel()
    j = np.searchsorted(jump_hi, uu, side="left")
    out = np.empty_like(uu)
    on_atom = (j < b.size) & (uu >= jump_lo[np.minimum(j, b.size - 1)])
    out[on_atom] = y[j[on_atom]]
    # continuous part between atoms j-1 and j: F(t) = (1-eps) B_{j-1} + eps t
    rest = ~on_atom
    below = np.where(j[rest] < b.size, mass_before[np.minimum(j[rest], b.size - 1)], 1.0)
    out[rest] = (uu[rest] - (1 - eps) * below) / eps
    out = np.clip(out, 0.0, 1.0)
    return out.reshape(u_arr.shape) if u_arr.ndim else float(out[0])


def mixture_cdf(b, eps, t, nodes=None):
    b = np.asarray(b, dtype=np.float64).ravel()
    y = np.linspace(0.0, 1.0, b.size) if nodes is None else np.asarray(nodes)
    t = np.asarray(t, dtype=np.float64)
    return (1 - eps) * (np.asarray(y)[None, :] <= t.reshape(-1, 1)).astype(float) @ b + eps * np.clip(t.ravel(), 0, 1)


class ThreeBlockPipeline:
    """Three elementary blocks plus a noise layer approximating ``F_oracle``.

    ``F_oracle`` maps a discrete measure on [0,1]^q to one on [0,1].
    """

    def __init__(self, F_oracle, in_grid: GridSpec, out_grid: GridSpec, eps: float = 0.05, n_noise: int = 1000):
        if out_grid.dim != 1:
            raise InvalidRangeError("noise reshaping is implemented for one-dimensional outputs only")
        if not 0 < eps <= 1:
            raise InvalidRangeError(f"mixing weight must lie in (0, 1], got {eps}")
        self.F_oracle = F_oracle
        self.in_grid, self.out_grid = in_grid, out_grid
        self.eps, self.n_noise = eps, n_noise
        n, m = in_grid.n_nodes, out_grid.n_nodes
        self.architecture = Architecture([
            ElementaryBlock(PairFunction(self._f, SECOND, in_grid.dim, n)),
            ElementaryBlock(PairFunction(self._g, SECOND, n, m)),
            NoiseConcat(1, "uniform01", n_noise),
            ElementaryBlock(PairFunction(self._h, FIRST, m + 1, 1)),
        ], mode="predictive", input_dim=in_grid.dim)

    def _f(self, xp):
        return p1_basis_matrix(self.in_grid, ad.value(xp))

    def surrogate(self, a) -> np.ndarray:
        """G(a): discretized image of the reconstructed grid measure."""
        out = self.F_oracle(reconstruct(a, self.in_grid))
        pts = ad.value(out.points)
        if np.any((pts < -CUBE_TOL) | (pts > 1 + CUBE_TOL)):
            raise DomainError("oracle output leaves the unit interval")
        b = discretize_p1(out, self.out_grid)
        return b / b.sum()

    def _g(self, ap):
        return np.stack([self.surrogate(row) for row in ad.value(ap)])

    def _h(self, x):
        x = ad.value(x)
        b, u = x[0, :-1], x[:, -1]
        # every atom carries the same deterministic b
        return noise_reshape_1d(b, u, self.eps).reshape(-1, 1)

    def stage_vector(self, mu: DiscreteMeasure) -> np.ndarray:
        """Output of the first block, equal to ``D_X(mu)``."""
        return ad.value(forward(Architecture(self.architecture.layers[:1]), mu).points)[0]

    def __call__(self, mu: DiscreteMeasure, rng: SeededRng) -> DiscreteMeasure:
        return forward(self.architecture, mu, rng)


def assemble_three_block_pipeline(F_oracle, in_grid, out_grid, eps=0.05, n_noise=1000) -> ThreeBlockPipeline:
    return ThreeBlockPipeline(F_oracle, in_grid, out_grid, eps, n_noise)


# names used by the public interface contract
Thm1Pipeline = ThreeBlockPipeline
assemble_thm1_pipeline = assemble_three_block_pipeline


def moment_functional(phi, order: int, mu: DiscreteMeasure, cap: int = 10**6) -> float:
    """``int phi d mu^{(x) order}`` via self-tensorization and a summary block.

    ``phi(*slots)`` takes ``order`` arrays of shape (N, q) and returns (N,).
    """
    q = mu.dim
    tens = self_tensorize(mu.numpy(), order, cap=cap)

    def g(xp):
        slots = [xp[:, k * q:(k + 1) * q] for k in range(order)]
        return np.asarray(phi(*slots), dtype=np.float64).reshape(-1, 1)

    block = ElementaryBlock(PairFunction(g, SECOND, q * order, 1))
    return float(ad.value(forward(Architecture([block]), tens).points)[0, 0])


@dataclass
class LipschitzReport:
    name: str
    trials: int
    max_ratio: float
    bound: float
    passed: bool
    skipped: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["test"] = d.pop("name")
        d["pass"] = d.pop("passed")
        return json.dumps(d)


def lipschitz_harness(map_under_test, sampler, bound, trials: int, rng: SeededRng,
                      name="lipschitz", slack=1e-9, distance=w1_between_laws) -> LipschitzReport:
    """Largest observed ``W1(T mu, T nu) / W1(mu, nu)`` over sampled pairs.

    ``bound`` is a number or a callable ``bound(mu, nu)`` (per-trial bound);
    pairs closer than 1e-9 are skipped.
    """
    worst, skipped, ok = 0.0, 0, True
    worst_bound = None
    for k in range(trials):
        sub = rng.spawn(k)
        mu, nu = sampler(sub)[:2]
        d_in = distance(mu, nu)
        if d_in < 1e-9:
            skipped += 1
            continue
        d_out = distance(map_under_test(mu), map_under_test(nu))
        b = bound(mu, nu) if callable(bound) else bound
        ratio = d_out / d_in
        if d_out > b * d_in + slack:
            ok = False
        if ratio >= worst:
            worst, worst_bound = ratio, b
    report_bound = float(worst_bound if worst_bound is not None else (0.0 if callable(bound) else bound))
    return LipschitzReport(name, trials, float(worst), report_bound, ok, skipped)
