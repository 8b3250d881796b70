"""Stabilizing the divisive pathway during training.

The divisive inhibitory current can be exactly zero wherever no inhibitory
neuron fires. Zeros are replaced, per sample, by the smallest positive value
of that sample; the replacement is invisible to the backward pass, which
treats it as the identity. The gradient of the lateral inhibitory weight is
additionally scaled by 1/fan-in after each backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ContractError, Tensor, add, custom_grad

log = logging.getLogger(__name__)

__all__ = [
    "StabilizationConfig", "adaptive_zero_replace", "epsilon_stabilize",
    "stabilize", "scale_inhibitory_gradient", "fallback_events",
]

# Number of all-zero samples that received the fallback denominator.
fallback_events = {"count": 0}


@dataclass(frozen=True)
class StabilizationConfig:
    mode: str = "adaptive"
    epsilon: float = 1e-8
    all_zero_fallback: float = 1.0

    def __post_init__(self):
        if self.mode not in ("adaptive", "epsilon", "none"):
            raise ValueError(f"unknown stabilization mode {self.mode!r}")
        if self.mode == "epsilon" and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def parse(cls, text: str) -> "StabilizationConfig":
        """Parse ``adaptive``, ``none`` or ``eps=<value>``."""
        text = text.strip()
        if text in ("adaptive", "none"):
            return cls(mode=text)
        if text.startswith("eps="):
            return cls(mode="epsilon", epsilon=float(text[4:]))
        raise ValueError(f"bad stabilization spec {text!r} (adaptive | none | eps=<v>)")

    def __str__(self):
        return f"eps={self.epsilon:g}" if self.mode == "epsilon" else self.mode


def adaptive_zero_replace(x: Tensor, batch_axis: int = 0, fallback: float = 1.0) -> Tensor:
    """Replace zeros by the smallest positive entry of the same sample.

    Samples without any positive entry are filled with ``fallback``. The
    backward pass is the identity onto ``x``.
    """
    xd = x.data
    if np.any(xd < 0):
        raise ContractError("adaptive_zero_replace: input has negative entries")
    if not np.any(xd == 0):
        return x
    moved = np.moveaxis(xd, batch_axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out, n_empty = kernels.zero_replace_rows(flat, fallback)
    if n_empty:
        fallback_events["count"] += n_empty
        log.debug("divisive current all-zero in %d sample(s); using %g", n_empty, fallback)
    out = np.moveaxis(out.reshape(moved.shape), 0, batch_axis)
    return custom_grad(Tensor(out, dtype=xd.dtype), x)


def epsilon_stabilize(x: Tensor, eps: float) -> Tensor:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return add(x, eps)


def stabilize(x: Tensor, config: StabilizationConfig) -> Tensor:
    if config.mode == "adaptive":
        return adaptive_zero_replace(x, fallback=config.all_zero_fallback)
    if config.mode == "epsilon":
        return epsilon_stabilize(x, config.epsilon)
    return x


def scale_inhibitory_gradient(params) -> None:
    """Divide the accumulated gradient of ``W_EI`` by the layer fan-in."""
    w = params.W_EI
    if w.grad is None:
        raise ContractError("scale_inhibitory_gradient: W_EI has no gradient")
    w.grad /= params.d
