"""Stacks of E-I circuit layers with a linear readout.

Two families are supported: a dense E-I MLP and a small VGG-style
convolutional stack (2x2 average pooling after every second conv layer and
after the last one). Inputs are direct-encoded: the same normalized image is
presented at every one of the T steps. The readout is an unconstrained
linear layer on the time-averaged spikes of the last E-I layer.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .circuit import EILayerParams, ei_layer_step
from .neuron import DEFAULT_SURROGATE, ExcState, SurrogateSpec
from .prop import StabilizationConfig
from .tensor import (
    DimensionError, Tensor, add, avg_pool2, get_default_dtype, linear, reshape, scale,
)

__all__ = ["ModelSpec", "Block", "Model", "direct_encode", "avg_pool2", "build_model"]

VGG8_SMALL_WIDTHS = (64, 64, 128, 128, 256)


@dataclass
class ModelSpec:
    """Architecture description.

    ``architecture`` is ``mlp`` or ``vgg8_small``. For ``mlp``, ``widths``
    holds the hidden E-I widths and ``input_shape`` is ``(d,)``. For
    ``vgg8_small``, ``widths`` are conv channel counts and ``input_shape`` is
    ``(C, H, W)``.
    """

    architecture: str = "mlp"
    widths: tuple = (400,)
    input_shape: tuple = (784,)
    classes: int = 10
    T: int = 4
    tau_E: float = 2.0
    theta_E: float = 1.0
    kernel_size: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.architecture not in ("mlp", "vgg8_small"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if not self.widths:
            raise ValueError("at least one E-I layer is required")
        for w in self.widths:
            if w % 4:
                raise ValueError(f"E-I width {w} is not divisible by 4")
        if self.T < 1:
            raise ValueError("T must be at least 1")

    @classmethod
    def parse(cls, text: str, input_shape=None, classes=None, T: int = 4) -> "ModelSpec":
        """Parse ``mlp:784,400,10`` or ``vgg8_small[:64,64,128,128,256]``.

        For ``mlp`` the first number is the input width and the last the class
        count; the numbers in between are the E-I hidden widths.
        """
        name, _, rest = text.partition(":")
        nums = [int(v) for v in rest.split(",") if v.strip()] if rest else []
        if name == "mlp":
            if len(nums) < 3:
                raise ValueError("mlp needs input,hidden...,classes")
            return cls("mlp", tuple(nums[1:-1]), (nums[0],), nums[-1], T)
        if name == "vgg8_small":
            return cls("vgg8_small", tuple(nums) or VGG8_SMALL_WIDTHS,
                       tuple(input_shape or (3, 32, 32)), classes or 10, T)
        raise ValueError(f"unknown architecture {name!r}")

    def describe(self) -> str:
        if self.architecture == "mlp":
            return "mlp:" + ",".join(str(v) for v in (*self.input_shape, *self.widths, self.classes))
        return "vgg8_small:" + ",".join(str(v) for v in self.widths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    @classmethod
    def from_config(cls, path: str) -> "ModelSpec":
        """Read the ``[model]`` section of an INI-style key = value file."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        sec = cp["model"]
        arch = sec.get("arch", "mlp:784,400,10")
        spec = cls.parse(arch,
                         input_shape=_ints(sec.get("input_shape")) or None,
                         classes=sec.getint("classes", fallback=None),
                         T=sec.getint("T", fallback=4))
        spec.tau_E = sec.getfloat("tau_E", fallback=spec.tau_E)
        spec.theta_E = sec.getfloat("theta_E", fallback=spec.theta_E)
        return spec


def _ints(text):
    if not text:
        return ()
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())


@dataclass
class Block:
    params: EILayerParams
    pool: bool = False


def direct_encode(image, T: int) -> list:
    """The same (already normalized) input at each of ``T`` steps."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    return [x] * T


class Model:
    def __init__(self, spec: ModelSpec, stabilization: StabilizationConfig = StabilizationConfig(),
                 surrogate: SurrogateSpec = DEFAULT_SURROGATE, smooth: bool = False,
                 seed: int = 0, dtype=None):
        self.spec = spec
        self.stabilization = stabilization
        self.surrogate = surrogate
        self.smooth = smooth
        self.dtype = np.dtype(dtype or get_default_dtype()).type
        self.blocks: list[Block] = []
        if spec.architecture == "mlp":
            d = spec.input_shape[0]
            for w in spec.widths:
                self.blocks.append(Block(EILayerParams.dense(d, w, self.dtype)))
                d = w
            features = d
        else:
            c, h, wd = spec.input_shape
            n = len(spec.widths)
            for i, w in enumerate(spec.widths):
                pool = i % 2 == 1 or i == n - 1
                self.blocks.append(Block(EILayerParams.conv(c, w, spec.kernel_size, dtype=self.dtype), pool))
                c = w
                if pool:
                    if h % 2 or wd % 2:
                        raise DimensionError(f"spatial size {h}x{wd} cannot be pooled at layer {i}")
                    h, wd = h // 2, wd // 2
            features = c * h * wd
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(features)
        self.head_W = Tensor(rng.uniform(-bound, bound, (spec.classes, features)).astype(self.dtype),
                             requires_grad=True, name="head.W")
        self.head_b = Tensor(rng.uniform(-bound, bound, spec.classes).astype(self.dtype),
                             requires_grad=True, name="head.b")

    @property
    def layers(self) -> list:
        return [b.params for b in self.blocks]

    def parameters(self) -> dict:
        out = {}
        for i, p in enumerate(self.layers):
            for name, t in p.parameters().items():
                out[f"layer{i}.{name}"] = t
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def _step_block(self, l: int, state: Optional[ExcState], x: Tensor, record=None):
        blk = self.blocks[l]
        if state is None:
            state = ExcState.zeros(blk.params.output_shape(x.shape), self.spec.tau_E,
                                   self.spec.theta_E, self.dtype)
        s, state, cur = ei_layer_step(blk.params, state, x, self.stabilization,
                                      self.surrogate, self.smooth)
        if record is not None and l in record:
            record[l].append(cur)
        if blk.pool:
            s = avg_pool2(s)
        return s, state

    def run_block(self, l: int, inputs: list, record=None) -> list:
        """Run block ``l`` over a length-T input sequence from a fresh state."""
        state, outs = None, []
        for x in inputs:
            s, state = self._step_block(l, state, x, record)
            outs.append(s)
        return outs

    def prepare_input(self, x) -> Tensor:
        """Wrap, cast and shape-check a batch; the MLP flattens image batches."""
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        expected = tuple(self.spec.input_shape)
        if self.spec.architecture == "mlp" and x.ndim > 2 and int(np.prod(x.shape[1:])) == expected[0]:
            x = reshape(x, (x.shape[0], expected[0]))
        if tuple(x.shape[1:]) != expected:
            raise DimensionError(f"model expects inputs of shape (B, {expected}), got {x.shape}")
        return x

    def forward_T(self, x, record: Optional[dict] = None) -> Tensor:
        """Logits from T direct-encoded steps; every call starts from rest.

        ``record`` may map layer indices to lists that receive that layer's
        :class:`~eisnn.circuit.LayerCurrents` at each step.
        """
        x = self.prepare_input(x)
        T = self.spec.T
        states = [None] * len(self.blocks)
        total = None
        for h in direct_encode(x, T):
            for l in range(len(self.blocks)):
                h, states[l] = self._step_block(l, states[l], h, record)
            total = h if total is None else add(total, h)
        rate = scale(total, 1.0 / T) if T > 1 else total
        rate = reshape(rate, (rate.shape[0], -1))
        return add(linear(rate, self.head_W), self.head_b)

    __call__ = forward_T


def build_model(spec: ModelSpec, stabilization: StabilizationConfig = StabilizationConfig(),
                **kwargs) -> Model:
    return Model(spec, stabilization, **kwargs)
