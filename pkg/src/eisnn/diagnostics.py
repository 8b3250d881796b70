"""Plot-ready data: current histograms, gradient magnitudes, firing rates."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .prop import scale_inhibitory_gradient
from .tensor import avg_pool2, backward, cross_entropy, no_grad, scale

__all__ = [
    "Histogram", "histogram", "collect_currents", "grad_norm_report",
    "inhibitory_gradient_ratios", "inhibitory_norm_ratios", "firing_rates", "write_histograms", "write_table",
]


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    layer: int
    quantity: str = "I_int"
    epoch: Optional[int] = None
    mean: float = float("nan")
    std: float = float("nan")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def histogram(values, layer: int, quantity: str = "I_int", epoch: Optional[int] = None,
              bins: int = 100) -> Histogram:
    """Uniform bins spanning the sample range (a unit-wide bin for constant data)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return Histogram(edges, counts, layer, quantity, epoch, float(v.mean()), float(v.std()))


def collect_currents(model, batch, layers: Optional[Iterable[int]] = None, bins: int = 100,
                     epoch: Optional[int] = None) -> list:
    """Histogram the integrated current of each selected layer over all
    neurons, samples and time steps. Runs a fresh forward pass without
    recording gradients; parameters are not touched."""
    n = len(model.blocks)
    layers = list(range(n)) if layers is None else list(layers)
    for l in layers:
        if not 0 <= l < n:
            raise ValueError(f"unknown layer id {l} (model has {n} E-I layers)")
    record = {l: [] for l in layers}
    x = model.prepare_input(batch)
    with no_grad(), np.errstate(all="ignore"):
        model.forward_T(x, record=record)
    return [histogram(np.concatenate([c.I_int.data.ravel() for c in record[l]]), l, "I_int", epoch, bins)
            for l in layers]


def firing_rates(model, batch) -> list:
    """Mean excitatory spike rate per layer over neurons, samples and steps
    (measured before pooling)."""
    x = model.prepare_input(batch)
    seq = [x] * model.spec.T
    rates = []
    with no_grad(), np.errstate(all="ignore"):
        for l, blk in enumerate(model.blocks):
            pool, blk.pool = blk.pool, False
            try:
                out = model.run_block(l, seq)
            finally:
                blk.pool = pool
            rates.append(float(np.mean([s.data.mean() for s in out])))
            seq = [avg_pool2(s) for s in out] if pool else out
    return rates


def grad_norm_report(model, batch=None, labels=None, loss_scale: float = 1.0,
                     apply_scaling: bool = False) -> dict:
    """Mean absolute gradient per parameter.

    With ``batch`` given, gradients are recomputed from scratch by one
    backward pass (``loss_scale`` multiplies the loss); otherwise the
    currently accumulated gradients are read. With ``apply_scaling`` the
    lateral-weight gradients are divided by the fan-in first. Gradients are
    zeroed again afterwards, so training state is unchanged.
    """
    if batch is not None:
        model.zero_grad()
        x = model.prepare_input(batch)
        with np.errstate(all="ignore"):
            loss = cross_entropy(model.forward_T(x), labels)
            backward(scale(loss, loss_scale))
    if apply_scaling:
        for p in model.layers:
            scale_inhibitory_gradient(p)
    report = {name: float(np.abs(t.grad).mean()) if t.grad is not None else 0.0
              for name, t in model.parameters().items()}
    if batch is not None:
        model.zero_grad()
    return report


def inhibitory_gradient_ratios(report: dict, n_layers: int) -> list:
    """Per-layer ratio mean|grad W_EI| / mean|grad W_EE|."""
    out = []
    for l in range(n_layers):
        ee = report[f"layer{l}.W_EE"]
        ei = report[f"layer{l}.W_EI"]
        out.append(ei / ee if ee > 0 else float("inf"))
    return out


def write_histograms(hists: list, out_dir: str, tag: str = "currents") -> str:
    """One CSV row per bin plus a JSON manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{tag}.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "quantity", "epoch", "bin_lo", "bin_hi", "count"])
        for h in hists:
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                w.writerow([h.layer, h.quantity, "" if h.epoch is None else h.epoch,
                            repr(float(lo)), repr(float(hi)), int(c)])
    manifest = {
        "csv": os.path.basename(csv_path),
        "histograms": [{"layer": h.layer, "quantity": h.quantity, "epoch": h.epoch,
                        "bins": len(h.counts), "samples": h.total, "mean": h.mean, "std": h.std,
                        "min": float(h.edges[0]), "max": float(h.edges[-1])} for h in hists],
    }
    man_path = os.path.join(out_dir, f"{tag}.json")
    with open(man_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return man_path


def write_table(table: dict, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["parameter", "mean_abs_grad"])
        for k, v in table.items():
            w.writerow([k, repr(v)])


def inhibitory_norm_ratios(model) -> list:
    """Per-layer ||grad W_EI|| / ||grad W_EE|| (Frobenius) from accumulated grads."""
    out = []
    for p in model.layers:
        ee = float(np.linalg.norm(p.W_EE.grad))
        ei = float(np.linalg.norm(p.W_EI.grad))
        out.append(ei / ee if ee > 0 else float("inf"))
    return out
