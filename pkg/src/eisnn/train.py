"""Training loop, optimizer, learning-rate schedule and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .circuit import dale_project
from .data import AugmentConfig, DatasetHandle, augment, iterate_batches
from .neuron import StateCorruptionError
from .network import Model, ModelSpec
from .prop import StabilizationConfig, fallback_events, scale_inhibitory_gradient
from .tensor import ContractError, Tensor, backward, cross_entropy, no_grad

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "SGD", "sgd_step", "lr_at", "train_epoch", "evaluate", "fit",
    "TrainingCollapse", "save_checkpoint", "load_checkpoint", "restore_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"EISNNCKP"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr_peak: float = 0.02
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    stabilization: str = "adaptive"
    gradient_scaling: bool = True
    init: str = "ei"
    checkpoint: Optional[str] = None
    precision: int = 32
    augment: bool = False
    crop_pad: int = 4
    hflip: bool = True
    halt_on_collapse: bool = True
    micro_batch: int = 0        # split each batch to bound memory; 0 keeps it whole

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be positive")
        if self.init not in ("ei", "kaiming-ee-ie", "kaiming-all"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.micro_batch < 0:
            raise ValueError("micro_batch must be non-negative")
        if self.precision not in (32, 64):
            raise ValueError("precision is 32 or 64")
        StabilizationConfig.parse(self.stabilization)

    @property
    def stabilization_config(self) -> StabilizationConfig:
        return StabilizationConfig.parse(self.stabilization)

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self, spec: Optional[ModelSpec] = None) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in ("checkpoint", "micro_batch")}
        if spec is not None:
            payload["model"] = spec.to_dict()
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class TrainingCollapse(RuntimeError):
    def __init__(self, message, telemetry):
        super().__init__(message)
        self.telemetry = telemetry


def lr_at(epoch_frac: float, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then half-cosine to 0.

    ``epoch_frac`` is the elapsed fraction of all epochs, in [0, 1].
    """
    w = config.warmup_epochs / config.epochs
    f = min(max(epoch_frac, 0.0), 1.0)
    if w > 0 and f < w:
        return config.lr_peak * f / w
    t = (f - w) / (1 - w)
    return config.lr_peak * (1 + math.cos(math.pi * t)) / 2


def sgd_step(params: dict, buffers: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum * v + (grad + wd * w);  w <- w - lr * v."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"sgd_step: {name} has no gradient")
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = buffers.get(name)
        if v is None:
            v = buffers[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        p.data -= lr * v


class SGD:
    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        sgd_step(self.params, self.buffers, lr, self.momentum, self.weight_decay)


def _project(model: Model) -> None:
    for p in model.layers:
        dale_project(p)


def train_step(model: Model, opt: SGD, x, y, lr: float, gradient_scaling: bool = True,
               micro_batch: int = 0):
    """One forward/backward/update. Returns ``(loss, n_correct)``.

    With ``micro_batch`` the batch is processed in chunks whose gradients are
    summed; samples never interact, so the update matches the whole batch up to
    float rounding.
    """
    model.zero_grad()
    n = len(y)
    step = micro_batch if 0 < micro_batch < n else n
    lv, correct = 0.0, 0
    for lo in range(0, n, step):
        xs, ys = x[lo:lo + step], y[lo:lo + step]
        logits = model.forward_T(Tensor(xs, dtype=model.dtype))
        loss = cross_entropy(logits, ys)
        part = float(loss.data)
        if not math.isfinite(part):
            return part, 0
        backward(loss * (len(ys) / n))
        lv += part * len(ys) / n
        correct += int((logits.data.argmax(axis=1) == ys).sum())
    if gradient_scaling:
        for p in model.layers:
            scale_inhibitory_gradient(p)
    opt.step(lr)
    _project(model)
    return lv, correct


def train_epoch(model: Model, data: DatasetHandle, config: TrainConfig, opt: SGD, epoch: int,
                rng: np.random.Generator, max_batches: Optional[int] = None) -> dict:
    """One pass over ``data``. Sets ``collapse_flag`` on a non-finite loss or
    when train accuracy does not beat the majority-class rate."""
    aug = AugmentConfig(config.augment, config.crop_pad, config.hflip)
    n_batches = math.ceil(len(data) / config.batch_size)
    if max_batches is not None:
        n_batches = min(n_batches, max_batches)
    total_loss, correct, seen = 0.0, 0, 0
    labels_seen = []
    collapse, reason = False, ""
    t0 = time.perf_counter()
    fallback_before = fallback_events["count"]
    with np.errstate(all="ignore"):
        for b, (_, x, y) in enumerate(iterate_batches(data, config.batch_size, rng)):
            if b >= n_batches:
                break
            x = augment(x, aug, rng)
            lr = lr_at((epoch + b / n_batches) / config.epochs, config)
            try:
                lv, c = train_step(model, opt, x, y, lr, config.gradient_scaling, config.micro_batch)
            except (StateCorruptionError, FloatingPointError, ContractError) as e:
                lv, c, reason = float("nan"), 0, f"{type(e).__name__}: {e}"
            if not math.isfinite(lv):
                collapse = True
                reason = reason or f"non-finite loss at batch {b}"
                break
            total_loss += lv * len(y)
            correct += c
            seen += len(y)
            labels_seen.append(y)
    acc = correct / seen if seen else 0.0
    if not collapse and seen:
        majority = np.bincount(np.concatenate(labels_seen), minlength=data.classes).max() / seen
        if acc <= majority:
            collapse = True
            reason = f"train accuracy {acc:.4f} not above majority-class rate {majority:.4f}"
    return {
        "epoch": epoch + 1,
        "loss": total_loss / seen if seen else float("nan"),
        "acc": acc,
        "collapse_flag": collapse,
        "collapse_reason": reason,
        "lr_end": lr_at((epoch + 1) / config.epochs, config),
        "seconds": time.perf_counter() - t0,
        "fallback_events": fallback_events["count"] - fallback_before,
    }


def evaluate(model: Model, data: DatasetHandle, batch_size: int = 256) -> dict:
    correct, total_loss = 0, 0.0
    with no_grad(), np.errstate(all="ignore"):
        for _, x, y in iterate_batches(data, batch_size, shuffle=False):
            logits = model.forward_T(Tensor(x, dtype=model.dtype))
            total_loss += float(cross_entropy(logits, y).data) * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = len(data)
    return {"acc": correct / n, "loss": total_loss / n}


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str, model: Model, opt: SGD, epoch: int, rng: np.random.Generator,
                    config: Optional[TrainConfig] = None) -> None:
    """Versioned container: magic, u32 header length, JSON header, raw LE blobs."""
    blobs, index, offset = [], [], 0
    items = [(f"param/{k}", t.data) for k, t in model.parameters().items()]
    items += [(f"momentum/{k}", v) for k, v in opt.buffers.items()]
    for name, arr in items:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_dict(),
        "stabilization": str(model.stabilization),
        "epoch": epoch,
        "config": config.to_dict() if config else None,
        "config_hash": config.hash(model.spec) if config else None,
        "rng_state": rng.bit_generator.state,
        "tensors": index,
    }
    hb = json.dumps(header).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    header["arrays"] = tensors
    return header


def restore_checkpoint(ckpt: dict, model: Model, opt: Optional[SGD] = None,
                       rng: Optional[np.random.Generator] = None) -> int:
    """Copy checkpoint contents into ``model``/``opt``/``rng``; returns the epoch."""
    arrays = ckpt["arrays"]
    for name, t in model.parameters().items():
        t.data[...] = arrays[f"param/{name}"]
    if opt is not None:
        for name in opt.buffers:
            opt.buffers[name][...] = arrays[f"momentum/{name}"]
    if rng is not None:
        rng.bit_generator.state = ckpt["rng_state"]
    return ckpt["epoch"]


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    init_reports: list = field(default_factory=list)
    collapsed: bool = False
    test: Optional[float] = None     # final test accuracy


def fit(model: Model, train: DatasetHandle, config: TrainConfig, test: Optional[DatasetHandle] = None,
        on_epoch=None, max_batches: Optional[int] = None,
        calibrate_first: bool = True, start_epoch: int = 0, opt: Optional[SGD] = None,
        rng: Optional[np.random.Generator] = None) -> FitResult:
    """Calibrate (unless resuming), then train for ``config.epochs`` epochs.

    Raises :class:`TrainingCollapse` when a collapse is detected and
    ``config.halt_on_collapse`` is set.
    """
    from .init import calibrate

    rng = rng or np.random.default_rng(config.seed)
    result = FitResult()
    if calibrate_first:
        first = next(iterate_batches(train, config.batch_size, np.random.default_rng(config.seed)))[1]
        result.init_reports = calibrate(model, first, seed=config.seed, mode=config.init)
    opt = opt or SGD(model.parameters(), config.momentum, config.weight_decay)
    for epoch in range(start_epoch, config.epochs):
        metrics = train_epoch(model, train, config, opt, epoch, rng, max_batches)
        if test is not None and not metrics["collapse_flag"]:
            ev = evaluate(model, test)
            metrics["test_acc"], metrics["test_loss"] = ev["acc"], ev["loss"]
        result.history.append(metrics)
        log.info("epoch %d loss %.4f acc %.4f%s", metrics["epoch"], metrics["loss"], metrics["acc"],
                 f" test {metrics['test_acc']:.4f}" if "test_acc" in metrics else "")
        if config.checkpoint:
            save_checkpoint(config.checkpoint, model, opt, epoch + 1, rng, config)
        if on_epoch is not None:
            on_epoch(metrics, model)
        if metrics["collapse_flag"]:
            result.collapsed = True
            if config.halt_on_collapse:
                raise TrainingCollapse(metrics["collapse_reason"],
                                       {"history": result.history, "epoch": epoch + 1})
    if test is not None:
        result.test = result.history[-1].get("test_acc") if result.history else None
    return result
