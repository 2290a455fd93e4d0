import numpy as np
import pytest

from sdn.core import SeededRng
from sdn.measure import DiscreteMeasure


@pytest.fixture
def rng():
    return SeededRng(20240611)


def random_measure(rng, n, dim, uniform=False, lo=0.0, hi=1.0):
    pts = rng.uniform((n, dim), lo, hi)
    if uniform:
        return DiscreteMeasure(pts)
    w = rng.uniform(n, 0.1, 1.0)
    return DiscreteMeasure(pts, w / w.sum())


def brute_w1(mu, nu):
    """Exact W1 for uniform equal-size measures by enumerating permutations."""
    import itertools
    pa, pb = np.asarray(mu.points), np.asarray(nu.points)
    C = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    n = C.shape[0]
    return min(C[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
