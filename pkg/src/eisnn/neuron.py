"""Spiking neuron operators.

Excitatory neurons are discrete-time LIF units with soft reset; spikes are
emitted by a Heaviside step whose backward pass uses a surrogate derivative.
Inhibitory neurons are fast-spiking and reduce to an instantaneous rectifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import DimensionError, Tensor, get_default_dtype, make_op, max0

__all__ = [
    "SurrogateSpec", "ExcState", "StateCorruptionError",
    "surrogate_derivative", "spike", "lif_step", "fs_inhibitory",
]


class StateCorruptionError(RuntimeError):
    """Membrane state contains NaN or Inf."""


@dataclass(frozen=True)
class SurrogateSpec:
    """Pseudo-derivative of the spike step.

    ``arctan``: alpha/2 / (1 + (pi*alpha*v/2)^2), the derivative of
    atan(pi*alpha*v/2)/pi + 1/2.
    ``rectangular``: 1/alpha inside |v| < alpha/2, else 0.
    """

    kind: str = "arctan"
    width_alpha: float = 2.0

    def __post_init__(self):
        if self.kind not in ("arctan", "rectangular"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if not self.width_alpha > 0:
            raise ValueError("width_alpha must be positive")

    def derivative(self, v: np.ndarray, g=None) -> np.ndarray:
        if g is None:
            g = np.ones_like(v)
        a = self.width_alpha
        if self.kind == "arctan":
            return kernels.arctan_surrogate_grad(v, g, a)
        return g * ((np.abs(v) < a / 2) / a)

    def primitive(self, v: np.ndarray) -> np.ndarray:
        """Smooth step whose exact derivative is :meth:`derivative`."""
        a = self.width_alpha
        if self.kind == "arctan":
            return np.arctan(math.pi * a * v / 2) / math.pi + 0.5
        return np.clip(v / a + 0.5, 0.0, 1.0)


DEFAULT_SURROGATE = SurrogateSpec()


def surrogate_derivative(v, spec: SurrogateSpec = DEFAULT_SURROGATE) -> Tensor:
    v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=float)
    return Tensor(spec.derivative(v))


def spike(u: Tensor, theta: float = 1.0, spec: SurrogateSpec = DEFAULT_SURROGATE,
          smooth: bool = False) -> Tensor:
    """Threshold-inclusive spikes H(u - theta) with surrogate backward.

    With ``smooth=True`` the forward pass uses the surrogate's primitive as
    well, so the operator is genuinely differentiable (gradient checks).
    """
    v = u.data - theta
    if smooth:
        out = spec.primitive(v).astype(v.dtype, copy=False)
    else:
        out = (v >= 0).astype(v.dtype)
    return make_op(out, (u,), lambda g: (spec.derivative(v, g),), "spike")


@dataclass
class ExcState:
    """Membrane potentials of one excitatory population plus its last spikes."""

    u: Tensor
    spikes: Tensor = None
    tau_E: float = 2.0
    theta_E: float = 1.0

    def __post_init__(self):
        if not self.tau_E > 1:
            raise ValueError(f"tau_E must exceed 1, got {self.tau_E}")
        if self.spikes is None:
            self.spikes = Tensor(np.zeros_like(self.u.data))

    @classmethod
    def zeros(cls, shape, tau_E=2.0, theta_E=1.0, dtype=None):
        z = np.zeros(shape, dtype=dtype or get_default_dtype())
        return cls(Tensor(z), Tensor(z.copy()), tau_E, theta_E)

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.tau_E


def _lif_update(u: Tensor, s: Tensor, current: Tensor, decay: float, theta: float) -> Tensor:
    k = decay * theta
    out = decay * (u.data - theta * s.data) + current.data
    return make_op(out.astype(current.data.dtype, copy=False), (u, s, current),
                   lambda g: (decay * g, -k * g, g), "lif_update")


def lif_step(state: ExcState, input_current: Tensor, spec: SurrogateSpec = DEFAULT_SURROGATE,
             smooth: bool = False):
    """One soft-reset LIF update followed by thresholding.

    u' = (1 - 1/tau_E) * (u - theta_E * s_prev) + I,   s = H(u' - theta_E)
    """
    if input_current.shape != state.u.shape:
        raise DimensionError(f"input current {input_current.shape} vs state {state.u.shape}")
    if not np.all(np.isfinite(state.u.data)):
        raise StateCorruptionError("membrane potential contains NaN/Inf")
    u_new = _lif_update(state.u, state.spikes, input_current, state.decay, state.theta_E)
    s = spike(u_new, state.theta_E, spec, smooth)
    return s, ExcState(u_new, s, state.tau_E, state.theta_E)


def fs_inhibitory(input_current) -> Tensor:
    """Fast-spiking inhibitory output: continuous max(0, I)."""
    return max0(input_current)
