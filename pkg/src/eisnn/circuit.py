"""Excitatory-inhibitory circuit layer.

One time step of a layer::

    I_EE  = W_EE s_in              I_IE = W_IE s_in
    s_I   = max(0, I_IE)
    I_sub = W_EI s_I               I_div = W_EI (g_I * s_I)
    I_int = g_E * (I_EE - I_sub) / stabilize(I_div) + b_E
    s_out = LIF(I_int)

All synaptic weights and ``g_I`` are nonnegative. The convolutional form
uses a k x k convolution for both excitatory projections, a 1x1 channel
mixing for ``W_EI`` and per-channel ``g_I``, ``g_E``, ``b_E``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .neuron import DEFAULT_SURROGATE, ExcState, SurrogateSpec, fs_inhibitory, lif_step
from .prop import StabilizationConfig, stabilize
from .tensor import (
    ContractError, DimensionError, Tensor, add, concat, conv1x1, conv2d, div,
    get_default_dtype, linear, mul, reshape, split, sub,
)

__all__ = [
    "EILayerParams", "LayerCurrents", "CONSTRAINED",
    "excitatory_projections", "lateral_inhibition", "integrate",
    "ei_layer_step", "dale_project",
]

CONSTRAINED = ("W_EE", "W_IE", "W_EI", "g_I")
E_TO_I_RATIO = 4


@dataclass
class EILayerParams:
    W_EE: Tensor
    W_IE: Tensor
    W_EI: Tensor
    g_I: Tensor
    g_E: Tensor
    b_E: Tensor
    n_E: int
    n_I: int
    d: int
    kind: str = "dense"
    kernel_size: int = 1
    padding: int = 0

    @classmethod
    def dense(cls, d: int, n_E: int, dtype=None) -> "EILayerParams":
        n_I = _inhibitory_count(n_E)
        return cls._placeholder((n_E, d), (n_I, d), n_E, n_I, d, "dense", 1, 0, dtype)

    @classmethod
    def conv(cls, in_channels: int, n_E: int, kernel_size: int = 3,
             padding: Optional[int] = None, dtype=None) -> "EILayerParams":
        n_I = _inhibitory_count(n_E)
        k = kernel_size
        pad = k // 2 if padding is None else padding
        return cls._placeholder((n_E, in_channels, k, k), (n_I, in_channels, k, k),
                                n_E, n_I, in_channels * k * k, "conv", k, pad, dtype)

    @classmethod
    def _placeholder(cls, ee_shape, ie_shape, n_E, n_I, d, kind, k, pad, dtype):
        dt = dtype or get_default_dtype()

        def leaf(arr, name):
            return Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)
        return cls(
            W_EE=leaf(np.zeros(ee_shape), "W_EE"),
            W_IE=leaf(np.zeros(ie_shape), "W_IE"),
            W_EI=leaf(np.full((n_E, n_I), 1.0 / n_I), "W_EI"),
            g_I=leaf(np.zeros(n_I), "g_I"),
            g_E=leaf(np.ones(n_E), "g_E"),
            b_E=leaf(np.zeros(n_E), "b_E"),
            n_E=n_E, n_I=n_I, d=d, kind=kind, kernel_size=k, padding=pad,
        )

    def parameters(self) -> dict:
        return {"W_EE": self.W_EE, "W_IE": self.W_IE, "W_EI": self.W_EI,
                "g_I": self.g_I, "g_E": self.g_E, "b_E": self.b_E}

    def output_shape(self, input_shape) -> tuple:
        """Excitatory output shape for an input batch of ``input_shape``."""
        if self.kind == "dense":
            return (input_shape[0], self.n_E)
        B, _, H, W = input_shape
        k, p = self.kernel_size, self.padding
        return (B, self.n_E, H + 2 * p - k + 1, W + 2 * p - k + 1)


def _inhibitory_count(n_E: int) -> int:
    if n_E <= 0 or n_E % E_TO_I_RATIO:
        raise ValueError(f"excitatory width {n_E} must be a positive multiple of {E_TO_I_RATIO}")
    return n_E // E_TO_I_RATIO


@dataclass
class LayerCurrents:
    I_EE: Tensor
    I_IE: Tensor
    s_I: Tensor
    I_EI_sub: Tensor
    I_EI_div: Tensor
    I_int: Tensor
    I_EI_div_raw: Optional[Tensor] = None


def _per_neuron(params: EILayerParams, t: Tensor) -> Tensor:
    # conv outputs are NCHW; per-channel vectors broadcast as (C, 1, 1)
    if params.kind == "conv":
        return reshape(t, (t.shape[0], 1, 1))
    return t


def excitatory_projections(params: EILayerParams, s_in):
    """Return ``(I_EE, I_IE)`` from one shared product with both weights."""
    s_in = s_in if isinstance(s_in, Tensor) else Tensor(s_in)
    w = concat([params.W_EE, params.W_IE], axis=0)
    if params.kind == "dense":
        if s_in.ndim != 2 or s_in.shape[1] != params.d:
            raise DimensionError(f"dense layer with fan-in {params.d} got input {s_in.shape}")
        both = linear(s_in, w)
        axis = 1
    else:
        if s_in.ndim != 4 or s_in.shape[1] * params.kernel_size ** 2 != params.d:
            raise DimensionError(f"conv layer with fan-in {params.d} got input {s_in.shape}")
        both = conv2d(s_in, w, params.padding)
        axis = 1
    I_EE, I_IE = split(both, [params.n_E, params.n_I], axis=axis)
    return I_EE, I_IE


def lateral_inhibition(params: EILayerParams, I_IE: Tensor):
    """Return ``(s_I, I_EI_sub, I_EI_div)`` with ``I_EI_div`` unstabilized."""
    s_I = fs_inhibitory(I_IE)
    gated = mul(s_I, _per_neuron(params, params.g_I))
    if params.kind == "dense":
        return s_I, linear(s_I, params.W_EI), linear(gated, params.W_EI)
    return s_I, conv1x1(s_I, params.W_EI), conv1x1(gated, params.W_EI)


def integrate(params: EILayerParams, currents: LayerCurrents) -> Tensor:
    """``g_E * (I_EE - I_EI_sub) / I_EI_div + b_E``; the denominator must be stabilized."""
    den = currents.I_EI_div
    if np.any(den.data == 0):
        raise ContractError("integrate: zero divisive current (stabilization skipped)")
    net = div(sub(currents.I_EE, currents.I_EI_sub), den)
    return add(mul(net, _per_neuron(params, params.g_E)), _per_neuron(params, params.b_E))


def ei_layer_step(params: EILayerParams, state: ExcState, s_in,
                  stabilization: StabilizationConfig = StabilizationConfig(),
                  surrogate: SurrogateSpec = DEFAULT_SURROGATE, smooth: bool = False):
    """Full circuit pass for one time step: ``(s_out, new_state, currents)``."""
    I_EE, I_IE = excitatory_projections(params, s_in)
    s_I, I_sub, I_div_raw = lateral_inhibition(params, I_IE)
    I_div = stabilize(I_div_raw, stabilization)
    currents = LayerCurrents(I_EE, I_IE, s_I, I_sub, I_div, None, I_div_raw)
    currents.I_int = integrate(params, currents)
    s_out, new_state = lif_step(state, currents.I_int, surrogate, smooth)
    return s_out, new_state, currents


def dale_project(params: EILayerParams) -> None:
    """Clamp the sign-constrained parameters to be nonnegative, in place."""
    for name in CONSTRAINED:
        arr = getattr(params, name).data
        np.maximum(arr, 0, out=arr)
