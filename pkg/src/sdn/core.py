"""Shared numerics: error types, seeded randomness and finite differences.

Dense tensors are plain float64 numpy arrays throughout the package.
"""
from __future__ import annotations

import numpy as np

PRNG_NAME = "PCG64"


class SdnError(Exception):
    """Base class for errors raised by this package."""


class InvalidRangeError(SdnError, ValueError):
    pass


class InvalidInputError(SdnError, ValueError):
    pass


class DomainError(SdnError, ValueError):
    pass


class EvaluationError(SdnError, ArithmeticError):
    pass


class ResourceLimitError(SdnError):
    pass


class UnsupportedInstanceError(SdnError, ValueError):
    pass


class ArchitectureError(SdnError):
    pass


class IntegrationError(SdnError, ArithmeticError):
    pass


class NotConvergedError(SdnError):
    def __init__(self, message, last_value=None):
        super().__init__(message)
        self.last_value = last_value


class SeededRng:
    """Single-owner random stream built from a 64-bit seed.

    Identical seed and identical call sequence give identical draws. Use
    :meth:`spawn` to derive independent child streams deterministically.
    """

    algorithm = PRNG_NAME

    def __init__(self, seed: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidRangeError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.key = ()
        self._seq = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, *key: int) -> "SeededRng":
        """Child stream identified by ``key``; does not advance this stream."""
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        child.key = self.key + tuple(int(k) for k in key)
        child._seq = np.random.SeedSequence(self.seed, spawn_key=child.key)
        child.generator = np.random.Generator(np.random.PCG64(child._seq))
        return child

    def uniform(self, shape, lo=0.0, hi=1.0) -> np.ndarray:
        return rng_uniform(self, shape, lo, hi)

    def normal(self, shape, mean=0.0, sd=1.0) -> np.ndarray:
        return rng_normal(self, shape, mean, sd)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, lo: int, hi: int, size=None):
        return self.generator.integers(lo, hi, size=size)

    def describe(self) -> dict:
        return {"name": self.algorithm, "seed": self.seed}


def as_rng(rng) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    if rng is None:
        return SeededRng(0)
    return SeededRng(int(rng))


def _shape(shape):
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


def rng_uniform(rng: SeededRng, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """I.i.d. draws on ``[lo, hi)``."""
    if lo > hi:
        raise InvalidRangeError(f"lo={lo} exceeds hi={hi}")
    u = rng.generator.random(_shape(shape))
    if lo == hi:
        return np.full_like(u, float(lo))
    return lo + (hi - lo) * u


def rng_normal(rng: SeededRng, shape, mean: float = 0.0, sd: float = 1.0) -> np.ndarray:
    if sd < 0:
        raise InvalidRangeError(f"standard deviation must be nonnegative, got {sd}")
    z = rng.generator.standard_normal(_shape(shape))
    return mean + sd * z


def finite_diff_grad(fun, point, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    If ``indices`` is given only those coordinates are differentiated; the
    other entries of the result are left at zero.
    """
    if h <= 0:
        raise InvalidRangeError(f"step h must be positive, got {h}")
    x = np.array(point, dtype=np.float64).ravel()
    grad = np.zeros_like(x)
    coords = range(x.size) if indices is None else indices
    for i in coords:
        old = x[i]
        x[i] = old + h
        fp = float(fun(x.copy()))
        x[i] = old - h
        fm = float(fun(x.copy()))
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(np.shape(point))


def check_finite(array, what="value"):
    if not np.all(np.isfinite(array)):
        raise EvaluationError(f"non-finite entries in {what}")
    return array
