"""Losses, optimizer, data ingestion and the three training loops."""
from __future__ import annotations

import gzip
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import (BOTH, FIRST, SECOND, Architecture, Dense, ElementaryBlock, InteractionMap, NoiseConcat,
                     SelfTensorize, forward)
from .core import InvalidInputError, InvalidRangeError, SeededRng
from .measure import DiscreteMeasure
from .transport import SinkhornConfig, sinkhorn_divergence


# --- initialization and optimizer -------------------------------------------

def xavier_init(rng: SeededRng, widths) -> list:
    """``[(W, b), ...]`` with W ~ U(+-sqrt(6 / (fan_in + fan_out))), b = 0."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise InvalidInputError(f"invalid layer widths {widths}")
    out = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out))
        out.append((rng.uniform((n_out, n_in), -lim, lim), np.zeros(n_out)))
    return out


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update; returns ``(new_params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("parameter, gradient and moment lists differ in length")
    state.step += 1
    t = state.step
    new = []
    for k, (p, g) in enumerate(zip(params, grads)):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape or p.shape != state.m[k].shape:
            raise InvalidInputError(f"shape mismatch for parameter {k}: {p.shape} vs {g.shape}")
        state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = state.m[k] / (1 - state.beta1 ** t)
        v_hat = state.v[k] / (1 - state.beta2 ** t)
        new.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new, state


# --- losses -----------------------------------------------------------------

def cross_entropy(scores, label: int, class_weights=None):
    """``-w_label * log softmax(scores)[label]``."""
    n = ad.value(scores).shape[-1]
    if not 0 <= int(label) < n:
        raise InvalidInputError(f"label {label} outside [0, {n})")
    w = 1.0 if class_weights is None else float(class_weights[int(label)])
    return (ad.logsumexp(scores, axis=-1) - ad.getitem(scores, int(label))) * w


def kl_diag_gaussian(mean, logvar):
    """KL(N(mean, diag exp(logvar)) || N(0, I))."""
    return 0.5 * ad.sum(mean * mean + ad.exp(logvar) - logvar - 1.0)


def inverse_frequency_weights(labels, n_classes) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(float)
    w = np.zeros(n_classes)
    seen = counts > 0
    w[seen] = counts.sum() / (seen.sum() * counts[seen])
    return w


# --- data -------------------------------------------------------------------

def ingest_image(pixels, rho: float = 0.5, n_points: int = 256) -> DiscreteMeasure:
    """Point cloud of the brightest pixels above ``rho``, standardized per axis.

    Pixels are ranked by intensity with ties broken by row-major index; if
    fewer than ``n_points`` qualify they are repeated cyclically.
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidInputError(f"expected an HxW image, got shape {img.shape}")
    if not np.any(img > 0):
        raise InvalidInputError("image has no positive pixel")
    flat = img.ravel()
    order = np.argsort(-flat, kind="stable")
    kept = order[flat[order] > rho]
    if kept.size == 0:
        kept = order[flat[order] > 0]
    kept = kept[:n_points]
    idx = kept[np.arange(n_points) % kept.size]
    coords = np.column_stack(np.unravel_index(idx, img.shape)).astype(np.float64)
    coords -= coords.mean(axis=0)
    sd = coords.std(axis=0)
    coords /= np.where(sd > 0, sd, 1.0)
    return DiscreteMeasure(coords)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (the MNIST distribution format), gzipped or not."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    _, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if dtype_code != 0x08:
        raise InvalidInputError("only unsigned-byte IDX files are supported")
    shape = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(shape)


def load_images(path) -> np.ndarray:
    """Images as floats in [0, 1] from ``.npy`` or IDX files."""
    if str(path).endswith(".npy"):
        arr = np.load(path)
    else:
        arr = read_idx(path)
    arr = np.asarray(arr, dtype=np.float64)
    return arr / 255.0 if arr.max() > 1.0 else arr


def rescale_to_unit_cube(measures, margin: float = 0.0):
    """Affinely map a collection of measures into ``[0, 1]^d`` with a shared map.

    Returns ``(rescaled, (shift, scale))`` with ``x' = (x - shift) / scale``.
    """
    pts = np.vstack([ad.value(m.points) for m in measures])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.max(hi - lo)
    scale = span * (1 + 2 * margin) if span > 0 else 1.0
    shift = lo - margin * span
    out = [DiscreteMeasure((ad.value(m.points) - shift) / scale, m.weights) for m in measures]
    return out, (shift, scale)


def make_blob_ring_dataset(rng: SeededRng, n_examples: int, n_points: int = 32):
    """Balanced two-class point clouds: Gaussian blob (0) vs noisy ring (1)."""
    data = []
    for k in range(n_examples):
        sub = rng.spawn(k)
        label = k % 2
        if label == 0:
            pts = sub.normal((n_points, 2), 0.0, 0.5)
        else:
            theta = sub.uniform(n_points, 0.0, 2 * np.pi)
            r = 1.0 + sub.normal(n_points, 0.0, 0.1)
            pts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        pts += sub.normal(2, 0.0, 0.2)  # random offset
        data.append((DiscreteMeasure(pts), label))
    order = rng.spawn(n_examples).permutation(n_examples)
    return [data[i] for i in order]


def make_shape_dataset(rng: SeededRng, n_examples: int, n_points: int = 100):
    """Unlabeled point clouds (ellipses of random aspect and angle) for the VAE."""
    out = []
    for k in range(n_examples):
        sub = rng.spawn(k)
        theta = sub.uniform(n_points, 0.0, 2 * np.pi)
        a, b = 1.0, sub.uniform(1, 0.2, 1.0)[0]
        ang = sub.uniform(1, 0.0, np.pi)[0]
        pts = np.column_stack([a * np.cos(theta), b * np.sin(theta)])
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        out.append(DiscreteMeasure(pts @ rot.T + sub.normal((n_points, 2), 0.0, 0.03)))
    return out


# --- architecture factories -------------------------------------------------

def make_classifier(rng: SeededRng, in_dim=2, block_widths=(10,), summary_width=64, dense_widths=(32,),
                    n_classes=10, tensorize=False) -> Architecture:
    """Measure blocks, optional X -> X (x) X, a summary block, then dense layers."""
    layers, dim, k = [], in_dim, 0
    for w in block_widths:
        layers.append(ElementaryBlock(InteractionMap.init(rng.spawn(k), [dim, w], BOTH)))
        dim, k = w, k + 1
    if tensorize:
        layers.append(SelfTensorize(2))
        dim *= 2
    layers.append(ElementaryBlock(InteractionMap.init(rng.spawn(k), [dim, summary_width], SECOND)))
    dim, k = summary_width, k + 1
    for w in dense_widths:
        layers.append(Dense.init(rng.spawn(k), dim, w, "relu"))
        dim, k = w, k + 1
    layers.append(Dense.init(rng.spawn(k), dim, n_classes, "identity"))
    return Architecture(layers, "discriminative", in_dim)


def make_predictor(rng: SeededRng, widths=(4, 10, 20, 40, 60, 2)) -> Architecture:
    """Chain of two-argument blocks; the last one is affine (identity activation)."""
    layers = []
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        act = "identity" if k == len(widths) - 2 else "relu"
        layers.append(ElementaryBlock(InteractionMap.init(rng.spawn(k), [a, b], BOTH, act)))
    return Architecture(layers, "predictive", widths[0])


@dataclass
class VaeConfig:
    latent_dim: int = 2
    n_atoms: int = 100
    beta: float = 1.0
    noise_dim: int = 2
    hidden: int = 16

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_atoms < 1:
            raise InvalidRangeError("latent dimension and atom count must be positive")


def make_vae(rng: SeededRng, vcfg: VaeConfig, data_dim=2):
    """Mirrored encoder / decoder: two blocks and three dense layers each side."""
    h, L = vcfg.hidden, vcfg.latent_dim
    enc = Architecture([
        ElementaryBlock(InteractionMap.init(rng.spawn(0), [data_dim, h], BOTH)),
        ElementaryBlock(InteractionMap.init(rng.spawn(1), [h, h], SECOND)),
        Dense.init(rng.spawn(2), h, h),
        Dense.init(rng.spawn(3), h, h),
        Dense.init(rng.spawn(4), h, 2 * L, "identity"),
    ], "discriminative", data_dim)
    q0 = L + vcfg.noise_dim
    dec = Architecture([
        NoiseConcat(vcfg.noise_dim, "uniform01", vcfg.n_atoms),
        # three per-atom fully connected layers, then two interaction blocks
        ElementaryBlock(InteractionMap.init(rng.spawn(5), [q0, h, h, h], FIRST)),
        ElementaryBlock(InteractionMap.init(rng.spawn(6), [h, h], BOTH)),
        ElementaryBlock(InteractionMap.init(rng.spawn(7), [h, data_dim], BOTH, "identity")),
    ], "generative")
    return enc, dec


# --- training loops ---------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    lr: float = 1e-2
    seed: int = 0
    loss: str = "cross-entropy"
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    class_weights: list | None = None
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidRangeError("epochs, batch size and learning rate must be positive")
        if self.loss not in ("cross-entropy", "sinkhorn"):
            raise InvalidInputError(f"unknown loss {self.loss!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["sinkhorn"] = asdict(self.sinkhorn)
        return d


@dataclass
class TrainResult:
    arch: object
    metrics: list
    checkpoint: dict
    extra: dict = field(default_factory=dict)


def default_threads():
    try:
        return max(1, int(os.environ.get("SDN_THREADS", "1")))
    except ValueError:
        return 1


def _batch_gradient(loss_fn, params, examples, threads=1):
    """Mean loss and gradient over ``examples``, summed in dataset order."""
    def one(item):
        root, tape, _ = ad.record_forward(lambda pv: loss_fn(pv, item), params)
        return float(root.value), tape.backward(root)

    if threads > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, examples))
    else:
        results = [one(e) for e in examples]
    total = 0.0
    grads = [np.zeros_like(p) for p in params]
    for loss, g in results:
        total += loss
        for k in range(len(grads)):
            grads[k] += g[k]
    B = len(examples)
    return total / B, [g / B for g in grads]


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _scores(out):
    if isinstance(out, DiscreteMeasure):
        return ad.reshape(out.points, (-1,))
    return out


def classify(arch: Architecture, mu: DiscreteMeasure) -> np.ndarray:
    return ad.value(_scores(forward(arch, mu)))


def accuracy(arch, dataset) -> float:
    if not dataset:
        return float("nan")
    hits = sum(int(np.argmax(classify(arch, mu)) == lab) for mu, lab in dataset)
    return hits / len(dataset)


def classifier_loss(arch, params, mu, label, class_weights=None):
    scores = _scores(forward(arch.with_params(params), mu))
    return cross_entropy(scores, label, class_weights)


def train_classifier(train_set, test_set, arch: Architecture, cfg: TrainConfig, log=None) -> TrainResult:
    """Adam on weighted cross-entropy; deterministic given ``cfg.seed``."""
    if arch.mode != "discriminative":
        raise InvalidInputError("classifier training needs a discriminative architecture")
    rng = SeededRng(cfg.seed)
    n_classes = arch.output_dim
    cw = (np.asarray(cfg.class_weights, dtype=float) if cfg.class_weights is not None
          else inverse_frequency_weights([lab for _, lab in train_set], n_classes))
    params = [np.array(p, dtype=np.float64) for p in arch.params()]
    opt = AdamState.for_params(params, cfg.lr)

    def loss_fn(pv, item):
        mu, lab = item
        return classifier_loss(arch, pv, mu, lab, cw)

    metrics = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _batches(rng.spawn(1, epoch), len(train_set), cfg.batch_size):
            loss, grads = _batch_gradient(loss_fn, params, [train_set[i] for i in batch], cfg.threads)
            params, opt = adam_step(opt, params, grads)
            losses.append(loss * len(batch))
        cur = arch.with_params(params)
        rec = {"epoch": epoch, "loss": float(np.sum(losses) / len(train_set)),
               "train_accuracy": accuracy(cur, train_set), "accuracy": accuracy(cur, test_set)}
        metrics.append(rec)
        if log:
            log(rec)
    final = arch.with_params(params)
    return TrainResult(final, metrics, final.to_json({"name": rng.algorithm, "seed": cfg.seed}))


def vae_loss(enc, dec, params_enc, params_dec, mu, vcfg: VaeConfig, scfg: SinkhornConfig, rng: SeededRng):
    """Sinkhorn reconstruction divergence plus ``beta`` times the Gaussian KL."""
    h = _scores(forward(enc.with_params(params_enc), mu))
    L = vcfg.latent_dim
    mean, logvar = ad.getitem(h, slice(0, L)), ad.getitem(h, slice(L, 2 * L))
    xi = rng.normal(L)
    z = mean + ad.exp(logvar * 0.5) * xi
    recon = forward(dec.with_params(params_dec), z, rng)
    rec_loss = sinkhorn_divergence(mu, recon, scfg, unrolled=True)
    kl = kl_diag_gaussian(mean, logvar)
    return rec_loss + vcfg.beta * kl, rec_loss, kl


def decode(dec: Architecture, z, rng: SeededRng) -> DiscreteMeasure:
    return forward(dec, np.asarray(z, dtype=np.float64), rng).numpy()


def train_vae(dataset, enc: Architecture, dec: Architecture, vcfg: VaeConfig, cfg: TrainConfig,
              log=None, steps=None) -> TrainResult:
    """Train encoder and decoder jointly with Adam.

    ``steps`` (optional) caps the number of optimizer steps; metrics are
    recorded per epoch, or per step when ``steps`` is given.
    """
    if enc.mode != "discriminative" or dec.mode != "generative":
        raise InvalidInputError("VAE needs a discriminative encoder and a generative decoder")
    if enc.output_dim not in (None, 2 * vcfg.latent_dim):
        raise InvalidInputError(f"encoder must output 2 * latent_dim = {2 * vcfg.latent_dim} values")
    rng = SeededRng(cfg.seed)
    n_enc = len(enc.params())
    params = [np.array(p, dtype=np.float64) for p in enc.params() + dec.params()]
    opt = AdamState.for_params(params, cfg.lr)
    indexed = list(enumerate(dataset))
    counter = {"step": 0}

    def loss_fn(pv, item):
        k, mu = item
        sub = rng.spawn(2, counter["step"], k)
        total, _, _ = vae_loss(enc, dec, pv[:n_enc], pv[n_enc:], mu, vcfg, cfg.sinkhorn, sub)
        return total

    metrics = []
    n_epochs = cfg.epochs if steps is None else steps
    for epoch in range(n_epochs):
        losses = []
        batches = (_batches(rng.spawn(1, epoch), len(indexed), cfg.batch_size) if steps is None
                   else [np.arange(len(indexed))[:cfg.batch_size]])
        for batch in batches:
            loss, grads = _batch_gradient(loss_fn, params, [indexed[i] for i in batch], cfg.threads)
            params, opt = adam_step(opt, params, grads)
            counter["step"] += 1
            losses.append(loss * len(batch))
        rec = {"epoch": epoch, "loss": float(np.sum(losses) / sum(len(b) for b in batches))}
        metrics.append(rec)
        if log:
            log(rec)
    enc_t, dec_t = enc.with_params(params[:n_enc]), dec.with_params(params[n_enc:])
    info = {"name": rng.algorithm, "seed": cfg.seed}
    ckpt = {"encoder": enc_t.to_json(info), "decoder": dec_t.to_json(info), "vae": asdict(vcfg)}
    return TrainResult((enc_t, dec_t), metrics, ckpt)


def predictor_loss(arch, params, inp, target, scfg):
    pred = forward(arch.with_params(params), inp)
    return sinkhorn_divergence(pred, target, scfg, unrolled=True)


def mean_divergence(arch, pairs, scfg: SinkhornConfig) -> float:
    vals = [float(sinkhorn_divergence(forward(arch, inp).numpy(), tgt, scfg)) for inp, tgt in pairs]
    return float(np.mean(vals))


def train_predictor(train_pairs, test_pairs, arch: Architecture, cfg: TrainConfig, log=None) -> TrainResult:
    """Fit a measure-to-measure map with the unrolled Sinkhorn divergence."""
    if arch.mode != "predictive":
        raise InvalidInputError("predictor training needs a predictive architecture")
    rng = SeededRng(cfg.seed)
    params = [np.array(p, dtype=np.float64) for p in arch.params()]
    opt = AdamState.for_params(params, cfg.lr)

    def loss_fn(pv, item):
        inp, tgt = item
        return predictor_loss(arch, pv, inp, tgt, cfg.sinkhorn)

    metrics = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in _batches(rng.spawn(1, epoch), len(train_pairs), cfg.batch_size):
            loss, grads = _batch_gradient(loss_fn, params, [train_pairs[i] for i in batch], cfg.threads)
            params, opt = adam_step(opt, params, grads)
            losses.append(loss * len(batch))
        rec = {"epoch": epoch, "loss": float(np.sum(losses) / len(train_pairs))}
        metrics.append(rec)
        if log:
            log(rec)
    final = arch.with_params(params)
    test_div = mean_divergence(final, test_pairs, cfg.sinkhorn) if test_pairs else float("nan")
    metrics.append({"epoch": cfg.epochs, "divergence": test_div})
    return TrainResult(final, metrics, final.to_json({"name": rng.algorithm, "seed": cfg.seed}),
                       {"test_divergence": test_div})
