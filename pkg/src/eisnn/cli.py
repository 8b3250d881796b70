"""Command-line entry point: ``eisnn train | init-stats | grad-check``.

Exit codes: 0 ok, 1 check failure, 2 usage error, 3 training collapse.
Outputs go under ``--out``, else ``$EISNN_RUN_ROOT``, else ``./runs``; each
run gets a subdirectory named by its configuration hash.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .data import (
    DatasetHandle, checksum, find_cifar10_dir, load_cifar10_bin, load_mnist, pad_to, subset,
)
from .diagnostics import collect_currents, grad_norm_report, write_histograms, write_table
from .gradcheck import corrupted_backward, run_grad_check
from .init import calibrate
from .network import Model, ModelSpec
from .train import TrainConfig, TrainingCollapse, fit, restore_checkpoint, load_checkpoint

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_COLLAPSE = 0, 1, 2, 3
RUN_ROOT_ENV = "EISNN_RUN_ROOT"

log = logging.getLogger("eisnn")

# flag name -> (type, default); also the accepted keys of a config file's [train] section
OPTIONS = {
    "data": (str, None),
    "arch": (str, "mlp:784,400,10"),
    "epochs": (int, 10),
    "lr": (float, 0.3),
    "batch_size": (int, 64),
    "micro_batch": (int, 0),
    "warmup": (int, 1),
    "seed": (int, 0),
    "init": (str, "ei"),
    "stabilize": (str, "adaptive"),
    "grad_scale": (str, "on"),
    "precision": (int, 32),
    "augment": (str, "auto"),
    "subset": (int, 0),
    "T": (int, 4),
    "out": (str, None),
}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    config: dict
    seed: int
    dataset_checksum: str
    code_version: str
    output_dir: str
    command: str
    created: float

    def write(self, path: str) -> None:
        if os.path.exists(path):
            raise UsageError(f"{path} already exists; a run manifest is never overwritten")
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eisnn", description="Train and inspect E-I circuit spiking networks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI file with [train] (and optionally [model]) sections")
        sp.add_argument("--data", help="MNIST IDX directory or CIFAR-10 binary directory")
        sp.add_argument("--arch", help="mlp:IN,H1,...,CLASSES or vgg8_small[:widths]")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--init", choices=["ei", "kaiming-ee-ie", "kaiming-all"])
        sp.add_argument("--stabilize", help="adaptive | eps=<value>")
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--micro-batch", dest="micro_batch", type=int,
                        help="accumulate gradients over chunks of this size to save memory")
        sp.add_argument("--precision", type=int, choices=[32, 64])
        sp.add_argument("--subset", type=int, help="use N training images (0 = all)")
        sp.add_argument("--T", type=int, help="time steps")
        sp.add_argument("--out", help=f"run root (default ${RUN_ROOT_ENV} or ./runs)")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="calibrate, train, write metrics/checkpoints/diagnostics")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup", type=int, help="warmup epochs")
    t.add_argument("--grad-scale", dest="grad_scale", choices=["on", "off"])
    t.add_argument("--augment", choices=["auto", "on", "off"])
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.add_argument("--no-halt", dest="halt", action="store_false",
                   help="keep training after a collapse (still exits 3)")

    s = sub.add_parser("init-stats", help="run data-dependent initialization only")
    common(s)
    s.add_argument("--synthetic-bernoulli", dest="bernoulli", type=float, metavar="P",
                   help="use Bernoulli(P) inputs instead of --data")
    s.add_argument("--samples", type=int, default=10000, help="synthetic batch size")

    g = sub.add_parser("grad-check", help="finite-difference check of the backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--arch", default="mlp:8,16,12,4")
    g.add_argument("--out", help="also write the report as JSON here")
    g.add_argument("--corrupt-backward", dest="corrupt", action="store_true",
                   help=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    cfg = {k: d for k, (_, d) in OPTIONS.items()}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"config file not found: {args.config}")
        if cp.has_section("model") and cp.has_option("model", "arch"):
            cfg["arch"] = cp.get("model", "arch")
        if cp.has_section("train"):
            for key, raw in cp.items("train"):
                key = key.replace("-", "_")
                if key not in OPTIONS:
                    raise UsageError(f"unknown config key {key!r}")
                try:
                    cfg[key] = OPTIONS[key][0](raw)
                except ValueError:
                    raise UsageError(f"bad value for {key}: {raw!r}") from None
    for key in OPTIONS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if cfg["grad_scale"] not in ("on", "off"):
        raise UsageError("grad_scale must be on or off")
    return cfg


def load_dataset(path: str):
    if not path:
        raise UsageError("--data is required")
    if not os.path.isdir(path):
        raise UsageError(f"dataset path not found: {path}")
    cifar = find_cifar10_dir(path)
    if cifar is not None:
        train, test = load_cifar10_bin(cifar)
        return "cifar10", train, test
    try:
        train, test = load_mnist(path)
    except FileNotFoundError as e:
        raise UsageError(f"no MNIST IDX or CIFAR-10 binary files in {path}: {e}") from None
    return "mnist", train, test


def _spec_for(cfg: dict, train: DatasetHandle) -> ModelSpec:
    spec = ModelSpec.parse(cfg["arch"], input_shape=train.shape, classes=train.classes, T=cfg["T"])
    if spec.architecture == "mlp" and spec.input_shape[0] != int(np.prod(train.shape)):
        raise UsageError(f"{cfg['arch']} expects {spec.input_shape[0]} inputs, "
                         f"data has {int(np.prod(train.shape))}")
    return spec


def _fit_vgg_input(cfg, train, test):
    if cfg["arch"].startswith("vgg8_small") and train.shape[-1] == 28:
        train, test = pad_to(train, 32), pad_to(test, 32)
    return train, test


def _run_dir(cfg: dict, tag: str) -> str:
    root = cfg["out"] or os.environ.get(RUN_ROOT_ENV) or "runs"
    d = os.path.join(root, tag)
    os.makedirs(d, exist_ok=True)
    return d


def _run_tag(tc: TrainConfig, spec: ModelSpec, cfg: dict) -> str:
    blob = json.dumps([tc.hash(spec), os.path.abspath(cfg["data"]), cfg["subset"]]).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _train_config(cfg: dict, kind: str, halt: bool) -> TrainConfig:
    # digits: one-pixel shifts only; natural images: 4-pixel crops and flips
    on = cfg["augment"] != "off"
    crop, flip = (1, False) if kind == "mnist" else (4, True)
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr_peak=cfg["lr"],
                       warmup_epochs=cfg["warmup"], seed=cfg["seed"], stabilization=cfg["stabilize"],
                       gradient_scaling=cfg["grad_scale"] == "on", init=cfg["init"],
                       precision=cfg["precision"], augment=on, crop_pad=crop, hflip=flip,
                       halt_on_collapse=halt, micro_batch=cfg["micro_batch"])


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, default=float)
    os.replace(tmp, path)


def _diagnose(model, probe_x, probe_y, run_dir, epoch, grads=False):
    d = os.path.join(run_dir, f"epoch_{epoch}")
    write_histograms(collect_currents(model, probe_x, epoch=epoch), d)
    if grads:
        write_table(grad_norm_report(model, probe_x, probe_y), os.path.join(d, "grad_norms.csv"))


def cmd_train(args) -> int:
    cfg = resolve(args)
    kind, train, test = load_dataset(cfg["data"])
    train, test = _fit_vgg_input(cfg, train, test)
    if cfg["subset"]:
        train = subset(train, cfg["subset"], cfg["seed"])
    try:
        spec = _spec_for(cfg, train)
        tc = _train_config(cfg, kind, args.halt)
        stab = tc.stabilization_config
    except ValueError as e:
        raise UsageError(str(e)) from None
    run_dir = _run_dir(cfg, _run_tag(tc, spec, cfg))
    tc.checkpoint = os.path.join(run_dir, "checkpoint.ckpt")
    model = Model(spec, stab, seed=cfg["seed"], dtype=tc.dtype)

    manifest_path = os.path.join(run_dir, "manifest.json")
    resume = args.resume and os.path.exists(tc.checkpoint)
    if not resume:
        RunManifest({**cfg, "model": spec.to_dict(), "train": tc.to_dict(), "dataset": kind},
                    cfg["seed"], checksum(train), __version__, run_dir, "train", time.time()
                    ).write(manifest_path)

    probe_x, probe_y = test.images[:64], test.labels[:64]
    history_path = os.path.join(run_dir, "metrics.json")
    history = []
    start, opt, rng = 0, None, None
    if resume:
        from .train import SGD
        opt = SGD(model.parameters(), tc.momentum, tc.weight_decay)
        rng = np.random.default_rng(tc.seed)
        start = restore_checkpoint(load_checkpoint(tc.checkpoint), model, opt, rng)
        if os.path.exists(history_path):
            with open(history_path) as f:
                history = json.load(f)["epochs"][:start]
        log.info("resuming %s at epoch %d", run_dir, start)

    def on_epoch(metrics, m):
        history.append(metrics)
        _write_json(history_path, {"epochs": history})
        _diagnose(m, probe_x, probe_y, run_dir, metrics["epoch"])
        print(json.dumps({k: metrics[k] for k in ("epoch", "loss", "acc", "test_acc", "collapse_flag")
                          if k in metrics}, default=float), flush=True)

    if not resume:
        # diagnostics at initialization need the calibrated model, so calibrate here
        first = train.images[np.random.default_rng(tc.seed).permutation(len(train))[:tc.batch_size]]
        reports = calibrate(model, first, seed=tc.seed, mode=tc.init)
        _write_json(os.path.join(run_dir, "init_report.json"), [r.to_dict() for r in reports])
        _diagnose(model, probe_x, probe_y, run_dir, 0, grads=True)
    try:
        result = fit(model, train, tc, test, on_epoch=on_epoch, calibrate_first=False,
                     start_epoch=start, opt=opt, rng=rng)
    except TrainingCollapse as e:
        _write_json(os.path.join(run_dir, "collapse.json"), {"reason": str(e), **e.telemetry})
        print(f"collapse: {e}", file=sys.stderr)
        return EXIT_COLLAPSE
    if result.collapsed:
        return EXIT_COLLAPSE
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_init_stats(args) -> int:
    cfg = resolve(args)
    if args.bernoulli is not None:
        spec = ModelSpec.parse(cfg["arch"], T=cfg["T"])
        if spec.architecture != "mlp":
            raise UsageError("--synthetic-bernoulli needs an mlp architecture")
        rng = np.random.default_rng(cfg["seed"])
        x = (rng.random((args.samples, spec.input_shape[0])) < args.bernoulli).astype(np.float64)
        kind, digest = f"bernoulli({args.bernoulli})", None
    else:
        kind, train, test = load_dataset(cfg["data"])
        train, _ = _fit_vgg_input(cfg, train, test)
        try:
            spec = _spec_for(cfg, train)
        except ValueError as e:
            raise UsageError(str(e)) from None
        idx = np.random.default_rng(cfg["seed"]).permutation(len(train))[:cfg["batch_size"]]
        x, digest = train.images[idx], checksum(train)
    try:
        stab = TrainConfig(stabilization=cfg["stabilize"]).stabilization_config
    except ValueError as e:
        raise UsageError(str(e)) from None
    dtype = np.float32 if cfg["precision"] == 32 else np.float64
    model = Model(spec, stab, seed=cfg["seed"], dtype=dtype)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        reports = calibrate(model, x, seed=cfg["seed"], mode=cfg["init"])
    out = {"dataset": kind, "dataset_checksum": digest, "arch": spec.describe(),
           "layers": [r.to_dict() for r in reports],
           "warnings": [str(w.message) for w in caught]}
    text = json.dumps(out, indent=2, default=float)
    print(text)
    if cfg["out"] or os.environ.get(RUN_ROOT_ENV):
        d = _run_dir(cfg, "init_stats")
        with open(os.path.join(d, "init_report.json"), "w") as f:
            f.write(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.corrupt:
        with corrupted_backward():
            res = run_grad_check(args.seed, args.arch)
    else:
        res = run_grad_check(args.seed, args.arch)
    for name, err in res.errors.items():
        print(f"{name:16s} rel_err {err:.3e}")
    print(f"max relative error {res.max_error:.3e} ({res.worst}); tolerance {res.tolerance:g}; "
          f"min denominator {res.min_denominator:.3f}")
    if args.out:
        _write_json(args.out, res.to_dict())
    if not res.passed:
        print(f"FAILED: worst parameter {res.worst}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"train": cmd_train, "init-stats": cmd_init_stats, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"eisnn: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
