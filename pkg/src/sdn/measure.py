"""Discrete probability measures and measure-level primitives."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import DomainError, EvaluationError, InvalidInputError, ResourceLimitError

WEIGHT_TOL = 1e-12
SELF_TENSOR_CAP = 10**6


class DiscreteMeasure:
    """``sum_i w_i delta_{x_i}`` with ``points`` of shape (n, d).

    ``points`` may be a recorded :class:`~sdn.autodiff.Var`; weights are
    always constants.
    """

    __slots__ = ("points", "weights")

    def __init__(self, points, weights=None, *, check=True):
        if not ad.is_var(points):
            points = np.asarray(points, dtype=np.float64)
        pv = ad.value(points)
        if pv.ndim == 1:
            points = ad.reshape(points, (-1, 1)) if ad.is_var(points) else pv.reshape(-1, 1)
            pv = ad.value(points)
        if pv.ndim != 2 or pv.shape[0] < 1:
            raise InvalidInputError(f"points must be a non-empty (n, d) array, got shape {pv.shape}")
        n = pv.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.asarray(weights, dtype=np.float64).ravel()
        if check:
            if weights.shape != (n,):
                raise InvalidInputError(f"{weights.size} weights for {n} points")
            if not np.all(np.isfinite(pv)):
                raise EvaluationError("non-finite support points")
            if np.any(weights < 0):
                raise InvalidInputError("negative weight")
            if abs(weights.sum() - 1.0) > WEIGHT_TOL * max(1, n):
                raise InvalidInputError(f"weights sum to {weights.sum()!r}, not 1")
        self.points = points
        self.weights = weights

    @property
    def n(self) -> int:
        return ad.value(self.points).shape[0]

    @property
    def dim(self) -> int:
        return ad.value(self.points).shape[1]

    def numpy(self) -> "DiscreteMeasure":
        """Copy with plain array points (detached from any tape)."""
        return DiscreteMeasure(ad.value(self.points).copy(), self.weights.copy(), check=False)

    def permuted(self, perm) -> "DiscreteMeasure":
        perm = np.asarray(perm)
        return DiscreteMeasure(ad.value(self.points)[perm], self.weights[perm], check=False)

    def mean(self) -> np.ndarray:
        return self.weights @ ad.value(self.points)

    def integrate(self, g) -> float:
        """``int g d mu`` for a pointwise function g returning one value per row."""
        return float(self.weights @ np.asarray(g(ad.value(self.points)), dtype=np.float64))

    def sorted_atoms(self):
        """Atoms sorted lexicographically; for order-free equality checks."""
        pts = ad.value(self.points)
        key = np.lexsort(np.column_stack([pts, self.weights])[:, ::-1].T)
        return pts[key], self.weights[key]

    def to_record(self, label=None, **extra) -> dict:
        rec = {"points": ad.value(self.points).tolist(), "weights": self.weights.tolist()}
        if label is not None:
            rec["label"] = int(label)
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "DiscreteMeasure":
        return cls(rec["points"], rec.get("weights"))

    def __repr__(self):
        return f"DiscreteMeasure(n={self.n}, dim={self.dim})"


def uniform_on(points) -> DiscreteMeasure:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise InvalidInputError("empty point list")
    return DiscreteMeasure(pts)


def dirac(x) -> DiscreteMeasure:
    return DiscreteMeasure(np.asarray(x, dtype=np.float64).reshape(1, -1), np.ones(1))


def push_forward(h, mu: DiscreteMeasure) -> DiscreteMeasure:
    """Map every atom through ``h`` (vectorized over rows); weights unchanged."""
    out = h(mu.points)
    if not ad.is_var(out):
        out = np.asarray(out, dtype=np.float64)
        if out.ndim == 1:
            out = out.reshape(mu.n, -1)
    if not np.all(np.isfinite(ad.value(out))):
        raise EvaluationError("push-forward map produced non-finite points")
    return DiscreteMeasure(out, mu.weights.copy(), check=False)


def tensor_product(mu: DiscreteMeasure, nu: DiscreteMeasure) -> DiscreteMeasure:
    """Product measure; atoms ``(x_i, y_j)`` enumerated i-major."""
    n, m = mu.n, nu.n
    left = ad.reshape(ad.broadcast_to(ad.reshape(mu.points, (n, 1, mu.dim)), (n, m, mu.dim)), (n * m, mu.dim))
    right = ad.reshape(ad.broadcast_to(ad.reshape(nu.points, (1, m, nu.dim)), (n, m, nu.dim)), (n * m, nu.dim))
    pts = ad.concat([left, right], axis=1)
    w = np.outer(mu.weights, nu.weights).ravel()
    return DiscreteMeasure(pts, w, check=False)


def self_tensorize(mu: DiscreteMeasure, order: int, cap: int = SELF_TENSOR_CAP) -> DiscreteMeasure:
    if order < 1:
        raise InvalidInputError(f"tensorization order must be >= 1, got {order}")
    if mu.n ** order > cap:
        raise ResourceLimitError(f"{mu.n}^{order} atoms exceed the cap of {cap}")
    out = mu
    for _ in range(order - 1):
        out = tensor_product(out, mu)
    return out


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid with ``k`` nodes per axis on the unit cube ``[0, 1]^dim``."""

    dim: int
    k: int

    def __post_init__(self):
        if self.k < 2 or self.dim < 1:
            raise InvalidInputError(f"grid needs k >= 2 and dim >= 1, got k={self.k}, dim={self.dim}")

    @property
    def n_nodes(self) -> int:
        return self.k ** self.dim

    @property
    def spacing(self) -> float:
        return 1.0 / (self.k - 1)

    def nodes(self) -> np.ndarray:
        axis = np.linspace(0.0, 1.0, self.k)
        return np.array(list(itertools.product(axis, repeat=self.dim)), dtype=np.float64)


CUBE_TOL = 1e-9


def _check_cube(x, what="point"):
    x = np.asarray(x, dtype=np.float64)
    bad = np.any((x < -CUBE_TOL) | (x > 1.0 + CUBE_TOL), axis=-1)
    if np.any(bad):
        idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise DomainError(f"{what} {idx} lies outside the unit cube", )
    return np.clip(x, 0.0, 1.0)


def _hat_1d(t, k):
    # (m,) coordinates -> (m, k) hat values on nodes 0, h, ..., 1
    nodes = np.linspace(0.0, 1.0, k)
    return np.maximum(0.0, 1.0 - np.abs(t[:, None] - nodes[None, :]) * (k - 1))


def p1_basis_matrix(grid: GridSpec, x) -> np.ndarray:
    """Hat-function values, shape (m, n_nodes), for m points in the cube."""
    x = _check_cube(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.shape[1] != grid.dim:
        raise InvalidInputError(f"point dimension {x.shape[1]} does not match grid dimension {grid.dim}")
    m = x.shape[0]
    phi = np.ones((m, 1))
    for d in range(grid.dim):
        # row-major: the last axis varies fastest
        phi = (phi[:, :, None] * _hat_1d(x[:, d], grid.k)[:, None, :]).reshape(m, -1)
    return phi


def p1_basis_eval(grid: GridSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return p1_basis_matrix(grid, x)[0]


def discretize_p1(mu: DiscreteMeasure, grid: GridSpec) -> np.ndarray:
    """Simplex vector ``a_i = sum_k w_k phi_i(x_k)``."""
    pts = ad.value(mu.points)
    _check_cube(pts, what="support point")
    return mu.weights @ p1_basis_matrix(grid, pts)


def reconstruct(a, grid: GridSpec) -> DiscreteMeasure:
    """Atoms at the grid nodes carrying the weights ``a``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size != grid.n_nodes:
        raise InvalidInputError(f"{a.size} weights for {grid.n_nodes} grid nodes")
    if np.any(a < -1e-9):
        raise InvalidInputError("simplex vector has a negative component")
    a = np.clip(a, 0.0, None)
    total = a.sum()
    if abs(total - 1.0) > 1e-9:
        raise InvalidInputError(f"simplex vector sums to {total!r}")
    return DiscreteMeasure(grid.nodes(), a / total)


# --- JSONL records ----------------------------------------------------------

def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_measures(path, measures, labels=None):
    labels = [None] * len(measures) if labels is None else labels
    write_jsonl(path, [m.to_record(label=lab) for m, lab in zip(measures, labels)])


def load_measures(path):
    """List of ``(measure, label or None)`` pairs."""
    return [(DiscreteMeasure.from_record(r), r.get("label")) for r in read_jsonl(path)]
