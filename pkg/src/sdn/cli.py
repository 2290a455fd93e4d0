"""``sdn`` command line: simulate, generate data, train, evaluate, verify.

Every run writes its outputs into ``--out`` together with ``config.json``
holding the full parsed configuration, so it can be replayed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocks import forward, load_checkpoint
from .core import PRNG_NAME, SdnError, SeededRng
from .flocking import FlockConfig, dataset_records, generate_dataset, pairs_from_records, sample_scenario, simulate
from .measure import DiscreteMeasure, load_measures, read_jsonl, save_measures, write_jsonl
from .transport import SinkhornConfig
from .verify import SUITES, run_suite

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def _widths(text):
    try:
        out = [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"widths must be positive integers, got {text!r}")
    return out


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SDN_THREADS")
    if env is None:
        return 1
    try:
        return _positive_int(env)
    except (ValueError, argparse.ArgumentTypeError):
        raise UsageError(f"SDN_THREADS must be a positive integer, got {env!r}") from None


def _sinkhorn(args) -> SinkhornConfig:
    return SinkhornConfig(epsilon=args.epsilon, p=args.p, max_iter=args.max_iter, unroll_iters=args.unroll_iters)


# --- output helpers ----------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_config(out: Path, args, **extra):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["prng"] = PRNG_NAME
    cfg.update(extra)
    _write_json(out / "config.json", cfg)


class MetricsLog:
    def __init__(self, path, echo=True):
        self.fh = open(path, "w", encoding="utf-8")
        self.echo = echo

    def __call__(self, rec):
        line = json.dumps(rec, sort_keys=True)
        self.fh.write(line + "\n")
        self.fh.flush()
        if self.echo:
            print(line)

    def close(self):
        self.fh.close()


# --- subcommands --------------------------------------------------------------

def _flock_config(args) -> FlockConfig:
    return FlockConfig(m=args.m, dt=args.dt, integrator=args.integrator, stop_tol=args.stop_tol,
                       max_time=args.max_time)


def cmd_simulate_flock(args):
    out = _out_dir(args)
    cfg = _flock_config(args)
    state = sample_scenario(SeededRng(args.seed), args.n_flocks, n_particles=args.n_particles)
    traj = simulate(state, cfg, record_every=args.record_every)
    traj.write_csv(out / "trajectory.csv")
    fin = traj.final
    save_measures(out / "limit.jsonl", [DiscreteMeasure(fin.positions, fin.masses)])
    _write_config(out, args)
    log = MetricsLog(out / "metrics.jsonl")
    log({"t": fin.t, "dispersion": fin.dispersion(), "converged": traj.converged,
         "momentum": fin.momentum().tolist()})
    log.close()
    return EXIT_OK


def cmd_gen_flock_data(args):
    out = _out_dir(args)
    cfg = _flock_config(args)
    scenarios = [2 + k % 3 for k in range(args.n_scenarios)]
    examples = generate_dataset(SeededRng(args.seed), scenarios, cfg, n_particles=args.n_particles)
    write_jsonl(out / "dataset.jsonl", dataset_records(examples))
    _write_config(out, args, scenarios=scenarios)
    return EXIT_OK


def _train_config(args, loss):
    from .train import TrainConfig
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed, loss=loss,
                       sinkhorn=_sinkhorn(args), threads=_threads(args))


def _labelled(path):
    data = load_measures(path)
    if any(lab is None for _, lab in data):
        raise UsageError(f"--data {path}: every record needs a 'label'")
    return [(mu, int(lab)) for mu, lab in data]


def _split(items, n_test):
    if not 0 < n_test < len(items):
        raise UsageError(f"--n-test must lie in (0, {len(items)}), got {n_test}")
    return items[:-n_test], items[-n_test:]


def cmd_train_classify(args):
    from .train import make_blob_ring_dataset, make_classifier, train_classifier
    out = _out_dir(args)
    rng = SeededRng(args.seed)
    if args.data:
        train_set, test_set = _split(_labelled(args.data), args.n_test)
    else:
        train_set = make_blob_ring_dataset(rng.spawn(0), args.n_train)
        test_set = make_blob_ring_dataset(rng.spawn(1), args.n_test)
    n_classes = max(lab for _, lab in train_set + test_set) + 1
    *blocks, summary = args.widths
    arch = make_classifier(rng.spawn(2), in_dim=train_set[0][0].dim, block_widths=blocks, summary_width=summary,
                           dense_widths=args.dense_widths, n_classes=n_classes, tensorize=args.tensorize)
    cfg = _train_config(args, "cross-entropy")
    _write_config(out, args, train=cfg.to_json())
    log = MetricsLog(out / "metrics.jsonl")
    res = train_classifier(train_set, test_set, arch, cfg, log)
    log.close()
    _write_json(out / "checkpoint.json", res.checkpoint)
    return EXIT_OK


def cmd_train_vae(args):
    from .train import VaeConfig, decode, make_shape_dataset, make_vae, train_vae
    out = _out_dir(args)
    rng = SeededRng(args.seed)
    data = [mu for mu, _ in load_measures(args.data)] if args.data else make_shape_dataset(rng.spawn(0), args.n_train)
    vcfg = VaeConfig(latent_dim=args.latent_dim, n_atoms=args.n_atoms, beta=args.beta, noise_dim=args.noise_dim,
                     hidden=args.hidden)
    enc, dec = make_vae(rng.spawn(1), vcfg, data_dim=data[0].dim)
    cfg = _train_config(args, "sinkhorn")
    _write_config(out, args, train=cfg.to_json())
    log = MetricsLog(out / "metrics.jsonl")
    res = train_vae(data, enc, dec, vcfg, cfg, log)
    log.close()
    _write_json(out / "checkpoint.json", res.checkpoint)
    # decoded samples on a small latent grid for external plotting
    _, dec_t = res.arch
    grid = np.linspace(-2.0, 2.0, 5)
    samples, codes = [], []
    for k, z0 in enumerate(grid):
        z = np.zeros(vcfg.latent_dim)
        z[0] = z0
        samples.append(decode(dec_t, z, rng.spawn(3, k)))
        codes.append(z.tolist())
    write_jsonl(out / "samples.jsonl", [m.to_record(z=c) for m, c in zip(samples, codes)])
    return EXIT_OK


def _flock_pairs(args, rng):
    if args.data:
        return pairs_from_records(read_jsonl(args.data))
    cfg = _flock_config(args)
    scenarios = [2 + k % 3 for k in range(args.n_scenarios)]
    return [(e.input, e.target) for e in generate_dataset(rng, scenarios, cfg, n_particles=args.n_particles)]


def cmd_train_predict(args):
    from .train import make_predictor, mean_divergence, train_predictor
    out = _out_dir(args)
    rng = SeededRng(args.seed)
    pairs = _flock_pairs(args, rng.spawn(0))
    train_pairs, test_pairs = _split(pairs, args.n_test)
    widths = list(args.widths)
    if widths[0] != train_pairs[0][0].dim or widths[-1] != train_pairs[0][1].dim:
        raise UsageError(f"--widths must start at the input dimension {train_pairs[0][0].dim} "
                         f"and end at the target dimension {train_pairs[0][1].dim}")
    arch = make_predictor(rng.spawn(1), widths)
    cfg = _train_config(args, "sinkhorn")
    _write_config(out, args, train=cfg.to_json())
    log = MetricsLog(out / "metrics.jsonl")
    log({"epoch": -1, "divergence": mean_divergence(arch, test_pairs, cfg.sinkhorn)})
    res = train_predictor(train_pairs, test_pairs, arch, cfg, log)
    log(res.metrics[-1])
    log.close()
    _write_json(out / "checkpoint.json", res.checkpoint)
    preds = [forward(res.arch, inp).numpy() for inp, _ in test_pairs]
    save_measures(out / "predictions.jsonl", preds)
    return EXIT_OK


def cmd_eval(args):
    from .train import accuracy, mean_divergence
    out = _out_dir(args)
    arch = load_checkpoint(args.checkpoint)
    _write_config(out, args)
    log = MetricsLog(out / "metrics.jsonl")
    if arch.mode == "discriminative":
        log({"accuracy": accuracy(arch, _labelled(args.data))})
    elif arch.mode == "predictive":
        pairs = pairs_from_records(read_jsonl(args.data))
        log({"divergence": mean_divergence(arch, pairs, _sinkhorn(args))})
    else:
        raise UsageError("eval supports discriminative and predictive checkpoints")
    log.close()
    return EXIT_OK


def cmd_verify(args):
    out = _out_dir(args)
    _write_config(out, args)
    rng = SeededRng(args.seed)
    names = SUITES if args.suite == "all" else (args.suite,)
    all_ok = True
    for name in names:
        reports = run_suite(name, rng)
        _write_json(out / f"verify_{name}.json", reports)
        for rep in reports:
            all_ok &= rep["pass"]
            print(f"{'PASS' if rep['pass'] else 'FAIL'} {name}/{rep['test']}")
    return EXIT_OK if all_ok else EXIT_INTERNAL


def cmd_ingest_images(args):
    from .train import ingest_image, load_images, read_idx
    out = _out_dir(args)
    images = load_images(args.images)
    if images.ndim == 2:
        images = images[None]
    labels = None
    if args.labels:
        labels = np.load(args.labels) if args.labels.endswith(".npy") else read_idx(args.labels)
        if len(labels) < len(images):
            raise UsageError("--labels has fewer entries than --images")
    n = len(images) if args.limit is None else min(args.limit, len(images))
    measures = [ingest_image(images[k], args.rho, args.n_points) for k in range(n)]
    save_measures(out / "measures.jsonl", measures, None if labels is None else [int(v) for v in labels[:n]])
    _write_config(out, args, n_images=n)
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def _common(p, out_default):
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--threads", type=_positive_int, default=None, help="worker threads (fallback: SDN_THREADS)")


def _sinkhorn_flags(p):
    p.add_argument("--epsilon", type=_positive_float, default=None, help="entropic regularization (default 0.01 mean C)")
    p.add_argument("--p", type=int, choices=(1, 2), default=2, help="cost exponent")
    p.add_argument("--max-iter", type=_positive_int, default=500)
    p.add_argument("--unroll-iters", type=_positive_int, default=50)


def _flock_flags(p):
    p.add_argument("--m", type=_positive_float, default=0.6, help="interaction exponent")
    p.add_argument("--dt", type=_positive_float, default=0.01)
    p.add_argument("--integrator", choices=("rk4", "euler"), default="rk4")
    p.add_argument("--stop-tol", type=_positive_float, default=1e-3)
    p.add_argument("--max-time", type=_positive_float, default=200.0)
    p.add_argument("--n-particles", type=_positive_int, default=720)


def _train_flags(p, epochs=30, lr=1e-2, batch=10):
    p.add_argument("--epochs", type=_positive_int, default=epochs)
    p.add_argument("--lr", type=_positive_float, default=lr)
    p.add_argument("--batch", type=_positive_int, default=batch)


def build_parser() -> Parser:
    parser = Parser(prog="sdn", description="Deep networks on probability measures.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("simulate-flock", help="simulate one flocking scenario")
    _common(p, "runs/simulate-flock")
    _flock_flags(p)
    p.add_argument("--n-flocks", type=int, choices=(2, 3, 4), default=2)
    p.add_argument("--record-every", type=_positive_int, default=10)
    p.set_defaults(func=cmd_simulate_flock)

    p = sub.add_parser("gen-flock-data", help="generate (phase-space, limit) training pairs")
    _common(p, "runs/flock-data")
    _flock_flags(p)
    p.add_argument("--n-scenarios", type=_positive_int, default=250)
    p.set_defaults(func=cmd_gen_flock_data)

    p = sub.add_parser("train-classify", help="train a point-cloud classifier")
    _common(p, "runs/classify")
    _sinkhorn_flags(p)
    _train_flags(p)
    p.add_argument("--data", help="labelled measure JSONL (default: synthetic blob vs ring)")
    p.add_argument("--n-train", type=_positive_int, default=200)
    p.add_argument("--n-test", type=_positive_int, default=100)
    p.add_argument("--widths", type=_widths, default=[10, 64], help="block widths, last one is the summary width")
    p.add_argument("--dense-widths", type=_widths, default=[32])
    p.add_argument("--tensorize", action="store_true", help="insert a self-tensorization layer")
    p.set_defaults(func=cmd_train_classify)

    p = sub.add_parser("train-vae", help="train a measure auto-encoder")
    _common(p, "runs/vae")
    _sinkhorn_flags(p)
    _train_flags(p, epochs=20, lr=5e-3)
    p.add_argument("--data", help="measure JSONL (default: synthetic ellipses)")
    p.add_argument("--n-train", type=_positive_int, default=100)
    p.add_argument("--latent-dim", type=_positive_int, default=2)
    p.add_argument("--n-atoms", type=_positive_int, default=100)
    p.add_argument("--noise-dim", type=_positive_int, default=2)
    p.add_argument("--hidden", type=_positive_int, default=16)
    p.add_argument("--beta", type=float, default=1.0)
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-predict", help="train the flocking limit predictor")
    _common(p, "runs/predict")
    _sinkhorn_flags(p)
    _flock_flags(p)
    _train_flags(p, epochs=5)
    p.add_argument("--data", help="dataset.jsonl from gen-flock-data (default: generate)")
    p.add_argument("--n-scenarios", type=_positive_int, default=250)
    p.add_argument("--n-test", type=_positive_int, default=50)
    p.add_argument("--widths", type=_widths, default=[4, 10, 20, 40, 60, 2])
    p.set_defaults(func=cmd_train_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p, "runs/eval")
    _sinkhorn_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run property suites against exact oracles")
    _common(p, "runs/verify")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ingest-images", help="turn grayscale images into point-cloud measures")
    _common(p, "runs/images")
    p.add_argument("--images", required=True, help=".npy array or IDX file")
    p.add_argument("--labels", help=".npy array or IDX label file")
    p.add_argument("--rho", type=float, default=0.5, help="intensity threshold")
    p.add_argument("--n-points", type=_positive_int, default=256)
    p.add_argument("--limit", type=_positive_int, default=None)
    p.set_defaults(func=cmd_ingest_images)
    return parser


USER_ERRORS = (UsageError, SdnError, FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError,
               KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except ad.UnsupportedPrimitiveError as exc:
        print(f"sdn: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except USER_ERRORS as exc:
        print(f"sdn: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        print(f"sdn: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
