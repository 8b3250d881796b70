"""Finite-difference check of the full E-I backward pass.

A small two-layer E-I MLP runs in smooth mode (the spike nonlinearity is
replaced by its surrogate primitive so the loss is differentiable) in
float64. Inputs are strictly positive, which keeps every inhibitory current
away from the rectifier kink and every divisive denominator well above zero.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import neuron
from .init import calibrate
from .network import Model, ModelSpec
from .prop import StabilizationConfig
from .tensor import backward, cross_entropy, make_op, no_grad

__all__ = ["GradCheckResult", "run_grad_check", "corrupted_backward", "TOLERANCE"]

TOLERANCE = 1e-4
FD_EPS = 1e-5


@dataclass
class GradCheckResult:
    errors: dict                      # parameter name -> relative error
    worst: str
    max_error: float
    min_denominator: float
    n_parameters: int
    tolerance: float = TOLERANCE
    elementwise: dict = field(default_factory=dict)   # name -> max |analytic - numeric|

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        return {"errors": self.errors, "worst": self.worst, "max_error": self.max_error,
                "min_denominator": self.min_denominator, "n_parameters": self.n_parameters,
                "tolerance": self.tolerance, "max_abs_diff": self.elementwise,
                "passed": self.passed}


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    return float(np.linalg.norm(a - n)) / scale if scale > 0 else 0.0


def _small_model(seed: int, arch: str):
    spec = ModelSpec.parse(arch, T=3)
    model = Model(spec, StabilizationConfig("none"), smooth=True, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.2, 0.8, size=(6, spec.input_shape[0]))
    y = rng.integers(0, spec.classes, size=6)
    calibrate(model, x, seed=seed)
    return model, x, y


def run_grad_check(seed: int = 0, arch: str = "mlp:8,16,12,4", eps: float = FD_EPS) -> GradCheckResult:
    model, x, y = _small_model(seed, arch)
    params = model.parameters()

    record = {l: [] for l in range(len(model.blocks))}
    model.zero_grad()
    loss = cross_entropy(model.forward_T(x, record=record), y)
    backward(loss)
    min_den = min(float(c.I_EI_div.data.min()) for cs in record.values() for c in cs)
    analytic = {k: t.grad.copy() for k, t in params.items()}

    def loss_value():
        with no_grad():
            return float(cross_entropy(model.forward_T(x), y).data)

    errors, diffs = {}, {}
    for name, t in params.items():
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        g = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_value()
            flat[i] = orig - eps
            lm = loss_value()
            flat[i] = orig
            g[i] = (lp - lm) / (2 * eps)
        errors[name] = relative_error(analytic[name], num)
        diffs[name] = float(np.abs(analytic[name] - num).max())
    worst = max(errors, key=errors.get)
    return GradCheckResult(errors, worst, errors[worst], min_den, model.n_parameters(),
                           elementwise=diffs)


@contextlib.contextmanager
def corrupted_backward(factor: float = 1.05):
    """Test hook: scale the membrane-current gradient of the LIF update by
    ``factor`` while leaving the forward pass untouched."""
    original = neuron._lif_update

    def bad(u, s, current, decay, theta):
        out = original(u, s, current, decay, theta)
        return make_op(out.data, (u, s, current),
                       lambda g: (decay * g, -decay * theta * g, factor * g), "lif_update_corrupt")
    neuron._lif_update = bad
    try:
        yield
    finally:
        neuron._lif_update = original
