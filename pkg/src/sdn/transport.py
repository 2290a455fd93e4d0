"""Wasserstein distances: exact oracles and log-domain Sinkhorn."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from . import autodiff as ad
from .core import InvalidInputError, InvalidRangeError, ResourceLimitError, UnsupportedInstanceError
from .measure import DiscreteMeasure

EPS_SCALE = 0.01
EPS_FLOOR = 1e-8


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic OT settings.

    ``epsilon=None`` means ``EPS_SCALE * mean(C)`` for the cross cost matrix.
    """

    epsilon: float | None = None
    p: int = 2
    max_iter: int = 500
    tol: float = 1e-6
    unroll_iters: int = 50

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidRangeError(f"epsilon must be positive, got {self.epsilon}")
        if self.p not in (1, 2):
            raise InvalidRangeError(f"cost exponent must be 1 or 2, got {self.p}")
        if self.max_iter < 1 or self.unroll_iters < 1:
            raise InvalidRangeError("iteration counts must be positive")
        if not self.tol > 0:
            raise InvalidRangeError(f"tol must be positive, got {self.tol}")


@dataclass
class OtResult:
    cost: float
    plan: np.ndarray
    iterations: int
    converged: bool
    epsilon: float


def cost_matrix(alpha: DiscreteMeasure, beta: DiscreteMeasure, p: int = 2):
    """``C_ij = ||x_i - y_j||^p``; differentiable in recorded points."""
    if alpha.dim != beta.dim:
        raise InvalidInputError(f"ambient dimensions differ: {alpha.dim} vs {beta.dim}")
    x, y = alpha.points, beta.points
    if not (ad.is_var(x) or ad.is_var(y)):
        diff = x[:, None, :] - y[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        return sq if p == 2 else np.sqrt(sq)
    diff = ad.reshape(x, (alpha.n, 1, alpha.dim)) - ad.reshape(y, (1, beta.n, beta.dim))
    sq = ad.norm2(diff, axis=-1)
    return sq if p == 2 else ad.sqrt(sq)


# --- exact oracles ----------------------------------------------------------

def _is_uniform(mu: DiscreteMeasure) -> bool:
    return np.allclose(mu.weights, 1.0 / mu.n, rtol=0, atol=1e-12)


def exact_wasserstein(alpha: DiscreteMeasure, beta: DiscreteMeasure, p: int = 1) -> float:
    """W_p between uniform measures of equal size n <= 64.

    Exhaustive over permutations for n <= 8, Hungarian assignment above.
    """
    alpha, beta = alpha.numpy(), beta.numpy()
    n = alpha.n
    if beta.n != n or not (_is_uniform(alpha) and _is_uniform(beta)):
        raise UnsupportedInstanceError("exact oracle needs uniform measures of equal size")
    if n > 64:
        raise UnsupportedInstanceError(f"exact oracle limited to n <= 64, got {n}")
    diff = alpha.points[:, None, :] - beta.points[None, :, :]
    C = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) ** p
    if n <= 8:
        rows = np.arange(n)
        best = min(C[rows, list(perm)].sum() for perm in itertools.permutations(range(n)))
    else:
        r, c = linear_sum_assignment(C)
        best = C[r, c].sum()
    return float((best / n) ** (1.0 / p))


W1_CAP = 10**4


def w1_between_laws(alpha: DiscreteMeasure, beta: DiscreteMeasure) -> float:
    """Exact W1 between general weighted measures via the transport LP."""
    alpha, beta = alpha.numpy(), beta.numpy()
    n, m = alpha.n, beta.n
    if n * m > W1_CAP:
        raise ResourceLimitError(f"transport LP of size {n}x{m} exceeds {W1_CAP} variables")
    C = cost_matrix(alpha, beta, p=1)
    if n == 1 or m == 1:
        # single coupling
        return float(np.sum(np.outer(alpha.weights, beta.weights) * C))
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([alpha.weights, beta.weights])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise UnsupportedInstanceError(f"transport LP failed: {res.message}")
    return float(C.ravel() @ np.clip(res.x, 0.0, None))


def wasserstein_1d(alpha: DiscreteMeasure, beta: DiscreteMeasure) -> float:
    """Exact W1 on the real line as the L1 distance between CDFs."""
    alpha, beta = alpha.numpy(), beta.numpy()
    if alpha.dim != 1 or beta.dim != 1:
        raise InvalidInputError("wasserstein_1d needs one-dimensional measures")
    xs = np.concatenate([alpha.points[:, 0], beta.points[:, 0]])
    ws = np.concatenate([alpha.weights, -beta.weights])
    order = np.argsort(xs, kind="stable")
    xs, ws = xs[order], ws[order]
    cdf_gap = np.cumsum(ws)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(xs)))


# --- Sinkhorn ---------------------------------------------------------------

def _epsilon(cfg: SinkhornConfig, C) -> float:
    if cfg.epsilon is not None:
        return float(cfg.epsilon)
    return max(EPS_SCALE * float(np.mean(ad.value(C))), EPS_FLOOR)


def _drop_zero_atoms(mu: DiscreteMeasure):
    keep = mu.weights > 0
    if keep.all():
        return mu, keep
    pts = ad.value(mu.points)[keep]
    return DiscreteMeasure(pts, mu.weights[keep] / mu.weights[keep].sum(), check=False), keep


def _lse(M, axis):
    # ascending-index reduction, max-shifted
    mx = np.max(M, axis=axis, keepdims=True)
    return (np.log(np.sum(np.exp(M - mx), axis=axis, keepdims=True)) + mx).squeeze(axis)


def sinkhorn_potentials(C, a, b, eps, max_iter, tol):
    """Log-domain Sinkhorn on plain arrays; returns (f, g, iterations, converged)."""
    loga, logb = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = -eps * _lse(logb[None, :] + (g[None, :] - C) / eps, axis=1)
        g = -eps * _lse(loga[:, None] + (f[:, None] - C) / eps, axis=0)
        P = np.exp((f[:, None] + g[None, :] - C) / eps + loga[:, None] + logb[None, :])
        if np.abs(P.sum(1) - a).sum() < tol and np.abs(P.sum(0) - b).sum() < tol:
            converged = True
            break
    return f, g, it, converged


def sinkhorn_cost(alpha: DiscreteMeasure, beta: DiscreteMeasure, cfg: SinkhornConfig = SinkhornConfig()) -> OtResult:
    """Transport cost <P, C> of the entropic plan, iterated to tolerance."""
    a_mu, keep_a = _drop_zero_atoms(alpha.numpy())
    b_mu, keep_b = _drop_zero_atoms(beta.numpy())
    C = cost_matrix(a_mu, b_mu, cfg.p)
    eps = _epsilon(cfg, C)
    a, b = a_mu.weights, b_mu.weights
    f, g, it, ok = sinkhorn_potentials(C, a, b, eps, cfg.max_iter, cfg.tol)
    P = np.exp((f[:, None] + g[None, :] - C) / eps + np.log(a)[:, None] + np.log(b)[None, :])
    plan = np.zeros((alpha.n, beta.n))
    plan[np.ix_(keep_a, keep_b)] = P
    return OtResult(float(np.sum(P * C)), plan, it, ok, eps)


def _entropic_value_unrolled(alpha, beta, cfg, eps, C=None):
    """Regularized OT value <a,f> + <b,g> after a fixed number of sweeps.

    Differentiable in the support points (and in ``eps`` when recorded);
    weights are constants.
    """
    if C is None:
        C = cost_matrix(alpha, beta, cfg.p)
    loga, logb = np.log(alpha.weights), np.log(beta.weights)
    g = np.zeros(beta.n)
    f = None
    for _ in range(cfg.unroll_iters):
        f = -eps * ad.logsumexp(logb[None, :] + (ad.reshape(g, (1, -1)) - C) / eps, axis=1)
        g = -eps * ad.logsumexp(loga[:, None] + (ad.reshape(f, (-1, 1)) - C) / eps, axis=0)
    return ad.sum(f * alpha.weights) + ad.sum(g * beta.weights)


def _converged_value(alpha, beta, cfg, eps):
    a_mu, _ = _drop_zero_atoms(alpha.numpy())
    b_mu, _ = _drop_zero_atoms(beta.numpy())
    C = cost_matrix(a_mu, b_mu, cfg.p)
    f, g, _, _ = sinkhorn_potentials(C, a_mu.weights, b_mu.weights, eps, cfg.max_iter, cfg.tol)
    return float(a_mu.weights @ f + b_mu.weights @ g)


def sinkhorn_divergence(alpha: DiscreteMeasure, beta: DiscreteMeasure,
                        cfg: SinkhornConfig = SinkhornConfig(), unrolled=None):
    """Debiased ``OT(a,b) - OT(a,a)/2 - OT(b,b)/2`` of regularized OT values.

    With ``unrolled=True`` (the default when points are recorded) each term
    runs exactly ``cfg.unroll_iters`` sweeps and the result is
    differentiable, including through a scale-aware epsilon. Otherwise the
    iterations stop at ``cfg.tol``. All three terms share the epsilon taken
    from the cross cost when ``cfg.epsilon`` is None. Pass ``unrolled=True``
    explicitly when comparing against finite differences on plain arrays.
    """
    if unrolled is None:
        unrolled = ad.is_var(alpha.points) or ad.is_var(beta.points)
    if not unrolled:
        eps = _epsilon(cfg, cost_matrix(alpha.numpy(), beta.numpy(), cfg.p))
        return (_converged_value(alpha, beta, cfg, eps) - 0.5 * _converged_value(alpha, alpha, cfg, eps)
                - 0.5 * _converged_value(beta, beta, cfg, eps))
    for mu in (alpha, beta):
        if np.any(mu.weights <= 0):
            raise InvalidInputError("unrolled Sinkhorn needs strictly positive weights")
    C = cost_matrix(alpha, beta, cfg.p)
    if cfg.epsilon is not None:
        eps = float(cfg.epsilon)
    elif EPS_SCALE * float(np.mean(ad.value(C))) > EPS_FLOOR:
        eps = ad.mean(C) * EPS_SCALE
    else:
        eps = EPS_FLOOR
    ab = _entropic_value_unrolled(alpha, beta, cfg, eps, C)
    aa = _entropic_value_unrolled(alpha, alpha, cfg, eps)
    bb = _entropic_value_unrolled(beta, beta, cfg, eps)
    return ab - 0.5 * aa - 0.5 * bb


def with_epsilon(cfg: SinkhornConfig, eps) -> SinkhornConfig:
    return replace(cfg, epsilon=eps)


def entropic_bias_bound(eps: float, n: int, m: int) -> float:
    return eps * math.log(n * m)
