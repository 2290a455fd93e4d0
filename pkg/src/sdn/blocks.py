"""Elementary interaction blocks and the architectures built from them.

An elementary block with interaction map ``f`` replaces every atom ``x_i``
of a measure by ``y_i = sum_j w_j f(x_i, x_j)`` and keeps the weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import PRNG_NAME, ArchitectureError, InvalidInputError, InvalidRangeError, SeededRng
from .measure import DiscreteMeasure, self_tensorize

BOTH, FIRST, SECOND = "both", "first", "second"
DEPENDENCES = (BOTH, FIRST, SECOND)
FORMAT_VERSION = 1


def _act(z, kind):
    if kind == "relu":
        return ad.relu(z)
    if kind == "identity":
        return z
    raise InvalidInputError(f"unknown nonlinearity {kind!r}")


@dataclass
class InteractionMap:
    """MLP ``f(x, x')`` with ReLU hidden layers.

    ``weights[k]`` has shape (out, in). With ``dependence='both'`` the first
    layer reads ``[x; x']`` so its input width is ``2 * in_dim``; the
    one-sided variants read only ``x`` or only ``x'``.
    """

    weights: list
    biases: list
    dependence: str = BOTH
    final_activation: str = "relu"

    def __post_init__(self):
        if self.dependence not in DEPENDENCES:
            raise InvalidInputError(f"unknown dependence {self.dependence!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need one bias per weight matrix and at least one layer")
        for k in range(1, len(self.weights)):
            if ad.value(self.weights[k]).shape[1] != ad.value(self.weights[k - 1]).shape[0]:
                raise InvalidInputError(f"layer {k} width does not chain with layer {k - 1}")
        for W, b in zip(self.weights, self.biases):
            if ad.value(b).shape != (ad.value(W).shape[0],):
                raise InvalidInputError("bias length does not match layer output width")
        if self.dependence == BOTH and ad.value(self.weights[0]).shape[1] % 2:
            raise InvalidInputError("two-argument map needs an even first-layer input width")

    @classmethod
    def init(cls, rng, widths, dependence=BOTH, final_activation="relu"):
        """Xavier-initialized map; ``widths = [q, hidden..., r]``."""
        from .train import xavier_init
        full = list(widths)
        if dependence == BOTH:
            full[0] = 2 * full[0]
        params = xavier_init(rng, full)
        return cls([W for W, _ in params], [b for _, b in params], dependence, final_activation)

    @property
    def in_dim(self) -> int:
        w = ad.value(self.weights[0]).shape[1]
        return w // 2 if self.dependence == BOTH else w

    @property
    def out_dim(self) -> int:
        return ad.value(self.weights[-1]).shape[0]

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params) -> "InteractionMap":
        return replace(self, weights=list(params[0::2]), biases=list(params[1::2]))

    def _mlp_tail(self, z):
        # z: first-layer pre-activation; runs the remaining layers
        for k in range(1, len(self.weights)):
            z = ad.relu(z)
            z = ad.matmul(z, ad.transpose(self.weights[k])) + self.biases[k]
        return _act(z, self.final_activation)

    def _first_layer(self, x=None, xp=None):
        W0, b0 = self.weights[0], self.biases[0]
        q = self.in_dim
        if self.dependence == BOTH:
            W1 = ad.getitem(W0, (slice(None), slice(0, q)))
            W2 = ad.getitem(W0, (slice(None), slice(q, 2 * q)))
            return ad.matmul(x, ad.transpose(W1)), ad.matmul(xp, ad.transpose(W2)), b0
        arg = x if self.dependence == FIRST else xp
        return ad.matmul(arg, ad.transpose(W0)) + b0

    def __call__(self, x, xp):
        """Evaluate on matching batches of points (..., q)."""
        for a in (x, xp):
            if ad.value(a).shape[-1] != self.in_dim:
                raise InvalidInputError(f"argument dimension {ad.value(a).shape[-1]} != {self.in_dim}")
        if self.dependence == BOTH:
            px, pxp, b0 = self._first_layer(x, xp)
            return self._mlp_tail(px + pxp + b0)
        return self._mlp_tail(self._first_layer(x, xp))

    def pairwise(self, points):
        """Tensor ``f(x_i, x_j)`` of shape (n, n, r), or (n, r) for one-sided maps."""
        if ad.value(points).shape[-1] != self.in_dim:
            raise InvalidInputError(f"measure dimension {ad.value(points).shape[-1]} != map input {self.in_dim}")
        if self.dependence != BOTH:
            return self._mlp_tail(self._first_layer(points, points))
        n = ad.value(points).shape[0]
        px, pxp, b0 = self._first_layer(points, points)
        h = ad.value(px).shape[1]
        z = ad.reshape(px, (n, 1, h)) + ad.reshape(pxp, (1, n, h)) + b0
        return self._mlp_tail(z)

    def lipschitz_bounds(self):
        """Operator-norm products bounding the Lipschitz constants in x and x'."""
        norms = [np.linalg.norm(ad.value(W), 2) for W in self.weights[1:]]
        tail = float(np.prod(norms)) if norms else 1.0
        W0 = ad.value(self.weights[0])
        if self.dependence == BOTH:
            q = self.in_dim
            return np.linalg.norm(W0[:, :q], 2) * tail, np.linalg.norm(W0[:, q:], 2) * tail
        if self.dependence == FIRST:
            return np.linalg.norm(W0, 2) * tail, 0.0
        return 0.0, np.linalg.norm(W0, 2) * tail

    def to_json(self) -> dict:
        return {
            "kind": "interaction",
            "dependence": self.dependence,
            "final_activation": self.final_activation,
            "widths": [int(ad.value(self.weights[0]).shape[1])] + [int(ad.value(W).shape[0]) for W in self.weights],
            "weights": [ad.value(W).ravel().tolist() for W in self.weights],
            "biases": [ad.value(b).tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, d) -> "InteractionMap":
        widths = d["widths"]
        Ws = [np.asarray(w, dtype=np.float64).reshape(widths[k + 1], widths[k]) for k, w in enumerate(d["weights"])]
        bs = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return cls(Ws, bs, d["dependence"], d["final_activation"])


@dataclass
class PairFunction:
    """Interaction given by a vectorized Python callable.

    ``fn(x, xp)`` for dependence 'both', ``fn(x)`` for 'first', ``fn(xp)``
    for 'second'; arguments have shape (..., q) and the result (..., r).
    """

    fn: object
    dependence: str = BOTH
    in_dim: int | None = None
    out_dim: int | None = None

    def __post_init__(self):
        if self.dependence not in DEPENDENCES:
            raise InvalidInputError(f"unknown dependence {self.dependence!r}")

    def __call__(self, x, xp):
        if self.dependence == BOTH:
            return self.fn(x, xp)
        return self.fn(x if self.dependence == FIRST else xp)

    def pairwise(self, points):
        if self.dependence != BOTH:
            return self(points, points)
        n = ad.value(points).shape[0]
        q = ad.value(points).shape[1]
        xi = ad.broadcast_to(ad.reshape(points, (n, 1, q)), (n, n, q))
        xj = ad.broadcast_to(ad.reshape(points, (1, n, q)), (n, n, q))
        return self.fn(xi, xj)

    def params(self):
        return []

    def with_params(self, params):
        return self


def elementary_block_apply(mu: DiscreteMeasure, f, cutoff=None) -> DiscreteMeasure:
    """Apply ``T_f`` to a discrete measure.

    A second-argument-only map yields a deterministic vector, returned as a
    one-atom measure. ``cutoff`` zeroes interactions with ``||x-x'|| >= cutoff``.
    """
    if f.in_dim is not None and mu.dim != f.in_dim:
        raise InvalidInputError(f"measure dimension {mu.dim} != interaction input {f.in_dim}")
    F = f.pairwise(mu.points)
    if f.dependence == BOTH:
        if cutoff is not None:
            pts = ad.value(mu.points)
            dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
            F = F * (dist < cutoff)[:, :, None]
        y = ad.weighted_sum(F, mu.weights, axis=1)
        return DiscreteMeasure(y, mu.weights, check=False)
    if cutoff is not None:
        raise InvalidInputError("locality cutoff only applies to two-argument maps")
    if f.dependence == FIRST:
        return DiscreteMeasure(F, mu.weights, check=False)
    y = ad.weighted_sum(F, mu.weights, axis=0)
    return DiscreteMeasure(ad.reshape(y, (1, -1)), np.ones(1), check=False)


def make_gradient_flow_block(grad_F, tau: float, sign: int = -1) -> PairFunction:
    """Interaction ``x + sign * 2 tau grad_F(x, x')`` for recurrent flows.

    ``sign=-1`` descends the interaction energy.
    """
    if not tau > 0:
        raise InvalidRangeError(f"step tau must be positive, got {tau}")
    if sign not in (-1, 1):
        raise InvalidRangeError(f"sign must be +1 or -1, got {sign}")
    return PairFunction(lambda x, xp: x + (sign * 2.0 * tau) * grad_F(x, xp), BOTH)


def recurrent_iterate(block, mu0: DiscreteMeasure, steps: int) -> list:
    if steps < 0:
        raise InvalidRangeError(f"steps must be >= 0, got {steps}")
    traj = [mu0]
    for _ in range(steps):
        traj.append(elementary_block_apply(traj[-1], block))
    return traj


def interaction_energy(F, mu: DiscreteMeasure) -> float:
    """``sum_ij w_i w_j F(x_i, x_j)`` for a vectorized scalar potential F."""
    pts = ad.value(mu.points)
    vals = F(pts[:, None, :], pts[None, :, :])
    return float(mu.weights @ vals @ mu.weights)


# --- layers -----------------------------------------------------------------

@dataclass
class ElementaryBlock:
    f: object
    cutoff: float | None = None

    def params(self):
        return self.f.params()

    def with_params(self, params):
        return replace(self, f=self.f.with_params(params))


@dataclass
class SelfTensorize:
    order: int

    def params(self):
        return []

    def with_params(self, params):
        return self


@dataclass
class NoiseConcat:
    dim: int
    distribution: str = "uniform01"
    n_noise: int = 100

    def __post_init__(self):
        if self.distribution not in ("uniform01", "gaussian"):
            raise InvalidInputError(f"unknown noise distribution {self.distribution!r}")

    def params(self):
        return []

    def with_params(self, params):
        return self

    def sample(self, rng, n):
        if self.distribution == "uniform01":
            return rng.uniform((n, self.dim))
        return rng.normal((n, self.dim))


@dataclass
class Dense:
    """Affine layer on a deterministic vector; ``weight`` is (out, in)."""

    weight: object
    bias: object
    activation: str = "relu"

    @classmethod
    def init(cls, rng, n_in, n_out, activation="relu"):
        from .train import xavier_init
        ((W, b),) = xavier_init(rng, [n_in, n_out])
        return cls(W, b, activation)

    @property
    def in_dim(self):
        return ad.value(self.weight).shape[1]

    @property
    def out_dim(self):
        return ad.value(self.weight).shape[0]

    def params(self):
        return [self.weight, self.bias]

    def with_params(self, params):
        return replace(self, weight=params[0], bias=params[1])


def _is_vector(state):
    return not isinstance(state, DiscreteMeasure)


def _as_vector(state):
    if _is_vector(state):
        return state
    if state.n != 1:
        return None
    return ad.reshape(state.points, (-1,))


def apply_layer(state, layer, rng: SeededRng | None = None, index: int = 0):
    """Apply one layer to a measure or a deterministic vector."""
    if isinstance(layer, ElementaryBlock):
        if _is_vector(state):
            state = DiscreteMeasure(ad.reshape(state, (1, -1)), np.ones(1), check=False)
        return elementary_block_apply(state, layer.f, layer.cutoff)
    if isinstance(layer, SelfTensorize):
        if _is_vector(state):
            raise ArchitectureError(f"layer {index}: self-tensorization needs a measure")
        return self_tensorize(state, layer.order)
    if isinstance(layer, NoiseConcat):
        if rng is None:
            raise ArchitectureError(f"layer {index}: noise layer needs an rng")
        vec = _as_vector(state)
        if vec is not None:
            # deterministic code vector replicated onto n_noise atoms
            q = ad.value(vec).shape[0]
            n = layer.n_noise
            base = ad.broadcast_to(ad.reshape(vec, (1, q)), (n, q))
            w = np.full(n, 1.0 / n)
        else:
            base, n, w = state.points, state.n, state.weights
        noise = layer.sample(rng, n)
        return DiscreteMeasure(ad.concat([base, noise], axis=1), w, check=False)
    if isinstance(layer, Dense):
        vec = _as_vector(state)
        if vec is None:
            raise ArchitectureError(f"layer {index}: dense layer needs a deterministic input, got a {state.n}-atom measure")
        if ad.value(vec).shape[0] != layer.in_dim:
            raise ArchitectureError(f"layer {index}: dense input width {ad.value(vec).shape[0]} != {layer.in_dim}")
        return _act(ad.matmul(layer.weight, vec) + layer.bias, layer.activation)
    raise ArchitectureError(f"layer {index}: unknown layer type {type(layer).__name__}")


MODES = ("predictive", "discriminative", "generative")


@dataclass
class Architecture:
    layers: list = field(default_factory=list)
    mode: str = "predictive"
    input_dim: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArchitectureError(f"unknown mode {self.mode!r}")
        self.validate()

    def validate(self):
        """Check width chaining and the deterministic/stochastic layer order."""
        dim = self.input_dim
        deterministic = self.mode == "generative"
        if self.mode == "generative" and self.layers and not isinstance(self.layers[0], NoiseConcat):
            raise ArchitectureError("generative architectures must start with a noise layer")
        for k, layer in enumerate(self.layers):
            if isinstance(layer, ElementaryBlock):
                q = getattr(layer.f, "in_dim", None)
                if dim is not None and q is not None and q != dim:
                    raise ArchitectureError(f"layer {k}: block expects width {q}, receives {dim}")
                dim = getattr(layer.f, "out_dim", None)
                if layer.f.dependence == SECOND:
                    deterministic = True
            elif isinstance(layer, SelfTensorize):
                dim = None if dim is None else dim * layer.order
            elif isinstance(layer, NoiseConcat):
                dim = None if dim is None else dim + layer.dim
                deterministic = False
            elif isinstance(layer, Dense):
                if not deterministic:
                    raise ArchitectureError(f"layer {k}: dense layer must follow a deterministic output")
                if dim is not None and layer.in_dim != dim:
                    raise ArchitectureError(f"layer {k}: dense expects width {layer.in_dim}, receives {dim}")
                dim = layer.out_dim
            else:
                raise ArchitectureError(f"layer {k}: unknown layer type {type(layer).__name__}")
        if self.mode == "discriminative" and self.layers and not deterministic:
            raise ArchitectureError("discriminative architectures must end with a deterministic output")
        return dim

    @property
    def output_dim(self):
        return self.validate()

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def with_params(self, params) -> "Architecture":
        params = list(params)
        layers, k = [], 0
        for layer in self.layers:
            n = len(layer.params())
            layers.append(layer.with_params(params[k:k + n]) if n else layer)
            k += n
        if k != len(params):
            raise InvalidInputError(f"expected {k} parameter arrays, got {len(params)}")
        out = Architecture.__new__(Architecture)
        out.layers, out.mode, out.input_dim = layers, self.mode, self.input_dim
        return out

    def lipschitz_bound(self) -> float:
        """Product of per-layer W1 Lipschitz bounds ``r (L1 + L2)``."""
        total = 1.0
        for layer in self.layers:
            if isinstance(layer, ElementaryBlock) and isinstance(layer.f, InteractionMap):
                L1, L2 = layer.f.lipschitz_bounds()
                total *= layer.f.out_dim * (L1 + L2)
            elif isinstance(layer, Dense):
                total *= np.linalg.norm(ad.value(layer.weight), 2)
            elif isinstance(layer, SelfTensorize):
                total *= layer.order
            else:
                raise ArchitectureError(f"no Lipschitz bound for {type(layer).__name__}")
        return float(total)

    def to_json(self, rng_info=None) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, ElementaryBlock):
                if not isinstance(layer.f, InteractionMap):
                    raise ArchitectureError("only MLP interaction maps can be serialized")
                d = layer.f.to_json()
                d["kind"] = "elementary"
                d["cutoff"] = layer.cutoff
            elif isinstance(layer, SelfTensorize):
                d = {"kind": "self_tensorize", "order": layer.order}
            elif isinstance(layer, NoiseConcat):
                d = {"kind": "noise_concat", "dim": layer.dim, "distribution": layer.distribution,
                     "n_noise": layer.n_noise}
            else:
                d = {"kind": "dense", "widths": [layer.in_dim, layer.out_dim],
                     "nonlinearity": layer.activation,
                     "weights": ad.value(layer.weight).ravel().tolist(),
                     "bias": ad.value(layer.bias).tolist()}
            layers.append(d)
        return {"format_version": FORMAT_VERSION,
                "prng": rng_info or {"name": PRNG_NAME, "seed": None},
                "mode": self.mode, "input_dim": self.input_dim, "layers": layers}

    @classmethod
    def from_json(cls, d) -> "Architecture":
        if d.get("format_version") != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint format {d.get('format_version')!r}")
        layers = []
        for k, ld in enumerate(d["layers"]):
            kind = ld["kind"]
            if kind == "elementary":
                layers.append(ElementaryBlock(InteractionMap.from_json(ld), ld.get("cutoff")))
            elif kind == "self_tensorize":
                layers.append(SelfTensorize(ld["order"]))
            elif kind == "noise_concat":
                layers.append(NoiseConcat(ld["dim"], ld["distribution"], ld["n_noise"]))
            elif kind == "dense":
                n_in, n_out = ld["widths"]
                W = np.asarray(ld["weights"], dtype=np.float64).reshape(n_out, n_in)
                layers.append(Dense(W, np.asarray(ld["bias"], dtype=np.float64), ld["nonlinearity"]))
            else:
                raise InvalidInputError(f"layer {k}: unknown kind {kind!r}")
        return cls(layers, d["mode"], d.get("input_dim"))


def forward(arch: Architecture, x, rng: SeededRng | None = None):
    """Left-to-right application of the layers."""
    state = x
    for k, layer in enumerate(arch.layers):
        try:
            state = apply_layer(state, layer, rng, index=k)
        except ArchitectureError:
            raise
        except InvalidInputError as exc:
            raise ArchitectureError(f"layer {k}: {exc}") from exc
    return state


def save_checkpoint(path, arch: Architecture, rng_info=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(arch.to_json(rng_info), fh)


def load_checkpoint(path) -> Architecture:
    with open(path, encoding="utf-8") as fh:
        return Architecture.from_json(json.load(fh))
