"""Data-dependent initialization of E-I circuit layers.

Given the mean presynaptic firing probability ``p`` of a layer with fan-in
``d``:

* ``W_EE`` and ``W_IE`` are drawn i.i.d. from Exp(lam) with
  ``lam = sqrt(d (2 - p) / (1 - p))``, so excitatory currents have
  mean ``d p / lam`` and standard deviation ``sqrt(p (1 - p))``;
* every ``W_EI`` entry is ``1 / n_I``, which balances the mean subtractive
  current against the mean excitatory current;
* every ``g_I`` entry is ``sqrt((2 - p) / (d p))``, which makes the mean
  divisive current equal the standard deviation of the excitatory current;
* ``g_E = 1`` and ``b_E = 0``.

``p`` is estimated on the first training batch, layer by layer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .circuit import EILayerParams, excitatory_projections, lateral_inhibition
from .prop import stabilize
from .tensor import Tensor, no_grad

__all__ = [
    "InitReport", "P_MIN", "P_MAX", "rate_for", "divisive_gain_for",
    "sample_exponential_weights", "init_layer", "clamped_kaiming_init", "calibrate",
]

P_MIN, P_MAX = 0.01, 0.99


@dataclass
class InitReport:
    layer: int
    d: int
    n_E: int
    n_I: int
    p_hat: float
    lam: float
    g_I_value: float
    p_raw: float = float("nan")
    clamped: bool = False
    mode: str = "ei"
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def rate_for(d: int, p: float) -> float:
    return math.sqrt(d * (2 - p) / (1 - p))


def divisive_gain_for(d: int, p: float) -> float:
    return math.sqrt((2 - p) / (d * p))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_exponential_weights(shape, lam: float, rng_seed=None, dtype=np.float64) -> np.ndarray:
    if not lam > 0:
        raise ValueError(f"exponential rate must be positive, got {lam}")
    return _rng(rng_seed).exponential(1.0 / lam, size=shape).astype(dtype, copy=False)


def _clamp_p(p: float, layer: int):
    if not np.isfinite(p) or p < P_MIN or p > P_MAX:
        clamped = float(np.clip(np.nan_to_num(p, nan=P_MIN), P_MIN, P_MAX))
        warnings.warn(f"layer {layer}: firing probability {p:.4g} clamped to {clamped:.4g}",
                      RuntimeWarning, stacklevel=3)
        return clamped, True
    return float(p), False


def init_layer(params: EILayerParams, p_hat: float, rng=None, layer: int = 0) -> InitReport:
    """Initialize ``params`` in place for presynaptic firing probability ``p_hat``."""
    p, clamped = _clamp_p(p_hat, layer)
    rng = _rng(rng)
    lam = rate_for(params.d, p)
    g_i = divisive_gain_for(params.d, p)
    dt = params.W_EE.data.dtype
    params.W_EE.data[...] = sample_exponential_weights(params.W_EE.shape, lam, rng, dt)
    params.W_IE.data[...] = sample_exponential_weights(params.W_IE.shape, lam, rng, dt)
    params.W_EI.data[...] = 1.0 / params.n_I
    params.g_I.data[...] = g_i
    params.g_E.data[...] = 1.0
    params.b_E.data[...] = 0.0
    return InitReport(layer, params.d, params.n_E, params.n_I, p, lam, g_i,
                      p_raw=float(p_hat), clamped=clamped)


def _kaiming_clamped(shape, fan_in, rng, dtype):
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return np.maximum(w, 0).astype(dtype, copy=False)


def clamped_kaiming_init(params: EILayerParams, which: str = "EE_IE", p_hat: float = 0.5,
                         rng=None, layer: int = 0) -> InitReport:
    """Ablation baseline: fan-in Kaiming normal weights clamped at zero.

    ``which`` selects ``EE_IE`` (only the excitatory projections) or
    ``EE_IE_EI`` (the lateral weight too). Everything else follows
    :func:`init_layer`.
    """
    if which not in ("EE_IE", "EE_IE_EI"):
        raise ValueError(f"unknown Kaiming variant {which!r}")
    rng = _rng(rng)
    report = init_layer(params, p_hat, rng, layer)
    dt = params.W_EE.data.dtype
    params.W_EE.data[...] = _kaiming_clamped(params.W_EE.shape, params.d, rng, dt)
    params.W_IE.data[...] = _kaiming_clamped(params.W_IE.shape, params.d, rng, dt)
    if which == "EE_IE_EI":
        params.W_EI.data[...] = _kaiming_clamped(params.W_EI.shape, params.n_I, rng, dt)
    report.mode = f"kaiming_{which}"
    return report


def current_stats(params: EILayerParams, inputs, stabilization) -> dict:
    """Empirical current moments of one layer over a list of input tensors."""
    ee, sub, div, raw = [], [], [], []
    with no_grad():
        for x in inputs:
            I_EE, I_IE = excitatory_projections(params, x)
            _, I_sub, I_div = lateral_inhibition(params, I_IE)
            ee.append(I_EE.data.ravel())
            sub.append(I_sub.data.ravel())
            raw.append(I_div.data.ravel())
            div.append(stabilize(I_div, stabilization).data.ravel())
    ee, sub, div, raw = (np.concatenate(a).astype(np.float64) for a in (ee, sub, div, raw))
    mean_ee, std_ee = float(ee.mean()), float(ee.std())
    mean_sub, mean_div = float(sub.mean()), float(div.mean())
    return {
        "mean_I_EE": mean_ee,
        "std_I_EE": std_ee,
        "mean_I_EI_sub": mean_sub,
        "mean_I_EI_div": mean_div,
        "mean_I_EI_div_raw": float(raw.mean()),
        "zero_fraction_I_EI_div": float((raw == 0).mean()),
        "balance_residual": abs(mean_ee - mean_sub) / abs(mean_ee) if mean_ee else float("nan"),
        "gain_residual": abs(mean_div - std_ee) / std_ee if std_ee else float("nan"),
    }


def calibrate(model, first_batch, seed=0, mode: str = "ei") -> list:
    """Initialize ``model``'s E-I layers in depth order from one batch.

    Layer ``l`` is initialized from the mean rate of the input it actually
    receives once layers ``0..l-1`` are initialized: the positive part of the
    encoded image for the first layer, (pooled) spikes afterwards. ``mode``
    is ``ei``, ``kaiming-ee-ie`` or ``kaiming-all``.
    """
    x = first_batch.data if isinstance(first_batch, Tensor) else np.asarray(first_batch)
    if x.shape[0] == 0:
        raise ValueError("calibration batch is empty")
    if mode not in ("ei", "kaiming-ee-ie", "kaiming-all"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = _rng(seed)
    x = model.prepare_input(x.astype(model.dtype, copy=False))
    seq = [x] * model.spec.T
    reports = []
    with no_grad():             # calibration never backpropagates
        for l, blk in enumerate(model.blocks):
            if l == 0:
                p_hat = float(np.maximum(x.data, 0).mean())
            else:
                p_hat = float(np.mean([s.data.mean() for s in seq]))
            if mode == "ei":
                rep = init_layer(blk.params, p_hat, rng, l)
            else:
                which = "EE_IE" if mode == "kaiming-ee-ie" else "EE_IE_EI"
                rep = clamped_kaiming_init(blk.params, which, p_hat, rng, l)
            rep.stats = current_stats(blk.params, seq, model.stabilization)
            seq = model.run_block(l, seq)
            rep.stats["output_rate"] = float(np.mean([s.data.mean() for s in seq]))
            reports.append(rep)
    return reports
