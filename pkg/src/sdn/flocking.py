"""Cucker-Smale dynamics for weighted particles.

    dp_i/dt = v_i,   dv_i/dt = sum_{j != i} mu_j a_ij (v_j - v_i),
    a_ij = 1 / (1 + ||p_i - p_j||^m)

With uniform masses this is the graph-Laplacian model up to a time rescale.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .core import IntegrationError, InvalidInputError, InvalidRangeError, NotConvergedError, SeededRng
from .measure import DiscreteMeasure

RECTANGLE_CORNERS = np.array([[-4.0, 2.0], [-4.0, -2.0], [4.0, 2.0], [4.0, -2.0]])


@dataclass
class FlockState:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=np.float64))
        self.masses = np.asarray(self.masses, dtype=np.float64).ravel()
        n = self.positions.shape[0]
        if self.velocities.shape != self.positions.shape or self.masses.shape != (n,):
            raise InvalidInputError("positions, velocities and masses disagree in size")
        if np.any(self.masses < 0) or abs(self.masses.sum() - 1.0) > 1e-12 * max(1, n):
            raise InvalidInputError("masses must be nonnegative and sum to 1")

    @property
    def n(self):
        return self.positions.shape[0]

    def momentum(self) -> np.ndarray:
        return self.masses @ self.velocities

    def dispersion(self) -> float:
        """``max_i ||v_i - vbar||`` with the mass-weighted mean velocity."""
        return float(np.max(np.linalg.norm(self.velocities - self.momentum(), axis=1)))

    def phase_space_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure(np.hstack([self.positions, self.velocities]), self.masses)


@dataclass(frozen=True)
class FlockConfig:
    m: float = 0.6
    dt: float = 0.01
    integrator: str = "rk4"
    stop_tol: float = 1e-3
    max_time: float = 200.0

    def __post_init__(self):
        if not self.m > 0 or not self.dt > 0:
            raise InvalidRangeError("interaction exponent m and step dt must be positive")
        if self.integrator not in ("euler", "rk4"):
            raise InvalidInputError(f"unknown integrator {self.integrator!r}")


def interaction_weights(p, m: float) -> np.ndarray:
    """Laplacian-style matrix: off-diagonal ``1/(1+||p_i-p_j||^m)``, rows summing to 0."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    d = np.sqrt(np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1))
    L = 1.0 / (1.0 + d ** m)
    np.fill_diagonal(L, 0.0)
    np.fill_diagonal(L, -L.sum(axis=1))
    return L


def _accel(p, v, mu, m):
    d = np.sqrt(np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=-1))
    A = 1.0 / (1.0 + d ** m)
    np.fill_diagonal(A, 0.0)
    K = A * mu[None, :]
    return K @ v - K.sum(axis=1)[:, None] * v


def step(state: FlockState, cfg: FlockConfig) -> FlockState:
    p, v, mu, dt = state.positions, state.velocities, state.masses, cfg.dt
    if cfg.integrator == "euler":
        p_new = p + dt * v
        v_new = v + dt * _accel(p, v, mu, cfg.m)
    else:
        k1p, k1v = v, _accel(p, v, mu, cfg.m)
        k2p = v + 0.5 * dt * k1v
        k2v = _accel(p + 0.5 * dt * k1p, k2p, mu, cfg.m)
        k3p = v + 0.5 * dt * k2v
        k3v = _accel(p + 0.5 * dt * k2p, k3p, mu, cfg.m)
        k4p = v + dt * k3v
        k4v = _accel(p + dt * k3p, k4p, mu, cfg.m)
        p_new = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if not (np.all(np.isfinite(p_new)) and np.all(np.isfinite(v_new))):
        raise IntegrationError(f"non-finite state at t={state.t + dt}")
    return FlockState(p_new, v_new, mu, state.t + dt)


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    converged: bool = False

    @property
    def final(self) -> FlockState:
        return self.states[-1]

    def write_csv(self, path):
        d = self.states[0].positions.shape[1]
        header = ["t", "particle"] + [f"p{k}" for k in range(d)] + [f"v{k}" for k in range(d)] + ["mass"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for s in self.states:
                for i in range(s.n):
                    w.writerow([repr(float(s.t)), i] + [repr(float(x)) for x in s.positions[i]]
                               + [repr(float(x)) for x in s.velocities[i]] + [repr(float(s.masses[i]))])


def center_velocities(state: FlockState) -> FlockState:
    return replace(state, velocities=state.velocities - state.momentum())


def simulate(state0: FlockState, cfg: FlockConfig, record_every: int | None = None) -> Trajectory:
    """Integrate until the velocity dispersion drops below ``stop_tol``.

    The mean velocity is removed first so the limit is stationary. Only the
    initial and final states are kept unless ``record_every`` is given.
    """
    state = center_velocities(state0)
    traj = Trajectory([state])
    k = 0
    while state.dispersion() >= cfg.stop_tol:
        if state.t >= cfg.max_time - 1e-12:
            if traj.states[-1] is not state:
                traj.states.append(state)
            return traj
        state = step(state, cfg)
        k += 1
        if record_every and k % record_every == 0:
            traj.states.append(state)
    if traj.states[-1] is not state:
        traj.states.append(state)
    traj.converged = True
    return traj


def limit_configuration(state0: FlockState, cfg: FlockConfig) -> DiscreteMeasure:
    traj = simulate(state0, cfg)
    if not traj.converged:
        last = traj.final.dispersion()
        raise NotConvergedError(f"flock did not settle by t={cfg.max_time} (dispersion {last:.3g})", last)
    fin = traj.final
    return DiscreteMeasure(fin.positions.copy(), fin.masses.copy())


# --- scenario family --------------------------------------------------------

def sample_quarter_disk(rng: SeededRng, n: int, radius: float = 0.1) -> np.ndarray:
    """Uniform on the disk of ``radius`` restricted to v_x >= 0, v_y <= 0."""
    out = np.empty((0, 2))
    while out.shape[0] < n:
        cand = rng.uniform((2 * n, 2), -radius, radius)
        ok = (cand[:, 0] >= 0) & (cand[:, 1] <= 0) & (np.sum(cand ** 2, axis=1) <= radius ** 2)
        out = np.vstack([out, cand[ok]])
    return out[:n]


def sample_masses(rng: SeededRng, n: int, mean=0.5, sd=0.1, max_attempts=100) -> np.ndarray:
    for _ in range(max_attempts):
        raw = np.maximum(rng.normal(n, mean, sd), 0.0)
        if raw.sum() > 0:
            return raw / raw.sum()
    raise InvalidInputError(f"all masses clipped to zero in {max_attempts} draws")


def sample_scenario(rng: SeededRng, n_flocks: int, counts=None, n_particles: int = 720) -> FlockState:
    """Flocks around rectangle corners, quarter-disk velocities, clipped-normal masses."""
    if not 2 <= n_flocks <= 4:
        raise InvalidInputError(f"scenarios use 2 to 4 flocks, got {n_flocks}")
    if counts is None:
        base, extra = divmod(n_particles, n_flocks)
        counts = [base + (k < extra) for k in range(n_flocks)]
    corners = RECTANGLE_CORNERS[rng.permutation(4)[:n_flocks]]
    pos = np.vstack([c + rng.normal((cnt, 2)) for c, cnt in zip(corners, counts)])
    n = pos.shape[0]
    return FlockState(pos, sample_quarter_disk(rng, n), sample_masses(rng, n))


@dataclass
class FlockExample:
    state: FlockState
    input: DiscreteMeasure
    target: DiscreteMeasure


def generate_dataset(rng: SeededRng, scenarios, cfg: FlockConfig, n_particles: int = 720) -> list:
    """Pairs (phase-space measure, uniform-weight limit positions).

    ``scenarios`` is a list of per-flock particle-count lists, or of ints
    giving the number of flocks, with ``n_particles`` split equally.
    """
    out = []
    for k, sc in enumerate(scenarios):
        sub = rng.spawn(k)
        if isinstance(sc, (int, np.integer)):
            state = sample_scenario(sub, int(sc), n_particles=n_particles)
        else:
            state = sample_scenario(sub, len(sc), counts=list(sc))
        lim = limit_configuration(state, cfg)
        target = DiscreteMeasure(lim.points, np.full(lim.n, 1.0 / lim.n))
        out.append(FlockExample(state, state.phase_space_measure(), target))
    return out


def dataset_records(examples) -> list:
    recs = []
    for k, ex in enumerate(examples):
        recs.append(ex.input.to_record(role="input", pair=k))
        recs.append(ex.target.to_record(role="target", pair=k))
    return recs


def pairs_from_records(records) -> list:
    inputs, targets = {}, {}
    for r in records:
        (inputs if r["role"] == "input" else targets)[r["pair"]] = DiscreteMeasure.from_record(r)
    return [(inputs[k], targets[k]) for k in sorted(inputs)]
