"""Dense numpy tensors with a reverse-mode differentiation tape.

Every operation that touches a tensor requiring gradients records a
:class:`TapeNode` holding its inputs and a backward rule. ``backward``
walks the recorded graph once in reverse topological order.

Broadcasting is deliberately narrow: one operand may be expanded to the
other's shape when it is a scalar or its shape right-aligns against the
other with extents that are equal or 1 (per-neuron / per-channel
parameters). Expanding both operands at once is rejected.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "TapeNode", "DimensionError", "ContractError",
    "set_default_dtype", "get_default_dtype", "set_debug", "no_grad",
    "tensor", "zeros", "make_op", "custom_grad", "detach",
    "add", "sub", "mul", "div", "neg", "scale", "affine", "max0",
    "elementwise", "matmul", "linear", "conv2d", "conv1x1", "avg_pool2",
    "reshape", "concat", "split", "sum", "mean", "cross_entropy", "backward",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


_dtype = np.float64
_debug = os.environ.get("EISNN_DEBUG", "") not in ("", "0")
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _dtype = dtype.type


def get_default_dtype():
    return _dtype


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf and zero-denominator traps on every operation."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    __slots__ = ("inputs", "backward_rule", "output_shape")

    def __init__(self, inputs, backward_rule, output_shape):
        self.inputs = inputs
        self.backward_rule = backward_rule
        self.output_shape = output_shape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    # Keep numpy from hijacking reflected operators.
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Optional[TapeNode] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced NaN/Inf")


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward_rule: Callable, name: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an operation over ``inputs``.

    ``backward_rule(g)`` must return one gradient (or None) per input, each
    already shaped like that input.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _debug:
        _check_finite(name, data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(tuple(inputs), backward_rule, data.shape)
    return out


# -- broadcasting -----------------------------------------------------------

def _broadcast_shape(a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape
    if len(a_shape) < len(b_shape) or (len(a_shape) == len(b_shape) and _fits(a_shape, b_shape)):
        small, big = a_shape, b_shape
    else:
        small, big = b_shape, a_shape
    if not _fits(small, big):
        raise DimensionError(f"cannot broadcast {a_shape} with {b_shape}")
    return big


def _fits(small, big):
    if len(small) > len(big):
        return False
    for s, b in zip(reversed(small), reversed(big)):
        if s != b and s != 1:
            return False
    return True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return make_op(ad * bd, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    """Quotient ``a / b``. The denominator must be free of zeros."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if _debug and np.any(bd == 0):
        raise ContractError("div: zero in denominator (stabilize it first)")
    q = ad / bd

    def rule(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * q / bd, bd.shape) if b.requires_grad else None
        return ga, gb
    return make_op(q, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def affine(x, g, b) -> Tensor:
    """``x * g + b`` with trailing-dimension broadcast of ``g`` and ``b``."""
    return add(mul(x, g), b)


def max0(a) -> Tensor:
    """Rectifier; the gradient at exactly 0 is 0."""
    a = _as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0).astype(a.data.dtype, copy=False), (a,),
                   lambda g: (g * mask,), "max0")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "max0": max0, "scale": scale, "affine": affine,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)
    return make_op(ad @ bd, (a, b), rule, "matmul")


def linear(x, w) -> Tensor:
    """Batched ``x @ w.T`` for ``x`` of shape (B, d) and ``w`` of shape (n, d)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} with weight {w.shape}")
    xd, wd = x.data, w.data

    def rule(g):
        return (g @ wd if x.requires_grad else None,
                g.T @ xd if w.requires_grad else None)
    return make_op(xd @ wd.T, (x, w), rule, "linear")


def conv2d(x, w, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation, NCHW input, (O, C, k, k) kernel.

    The patch matrix is rebuilt during backward instead of being kept alive
    across all time steps.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} with kernel {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {H}x{W}")
    xd = x.data
    w2 = w.data.reshape(O, -1)
    cols = kernels.im2col(xd, k, padding)
    out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = None
        if w.requires_grad:
            c = kernels.im2col(xd, k, padding)
            gw = (g2.T @ c).reshape(w.shape)
        if x.requires_grad:
            gx = kernels.col2im(g2 @ w2, xd.shape, k, padding)
        return gx, gw
    return make_op(out, (x, w), rule, "conv2d")


def conv1x1(x, w) -> Tensor:
    """Per-site channel mixing: (B, C, H, W) with (O, C) -> (B, O, H, W)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1x1: input {x.shape} with weight {w.shape}")
    B, C, H, W = x.shape
    O = w.shape[0]
    xd = x.data.reshape(B, C, H * W)
    wd = w.data

    def rule(g):
        g3 = g.reshape(B, O, H * W)
        gx = (wd.T @ g3).reshape(B, C, H, W) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g3.transpose(1, 0, 2).reshape(O, -1) @ xd.transpose(0, 2, 1).reshape(-1, C)
        return gx, gw
    return make_op((wd @ xd).reshape(B, O, H, W), (x, w), rule, "conv1x1")


def avg_pool2(x) -> Tensor:
    """2x2 mean pooling over the last two axes of an NCHW tensor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2 expects NCHW, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {x.shape[2:]}")
    return make_op(kernels.avg_pool2(x.data), (x,),
                   lambda g: (kernels.avg_pool2_backward(g),), "avg_pool2")


# -- shape ------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return make_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return make_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split(a, sizes: Sequence[int], axis: int = 0):
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    a = _as_tensor(a)
    if int(np.sum(sizes)) != a.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        index = tuple(index)

        def rule(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)
        outs.append(make_op(np.ascontiguousarray(a.data[index]), (a,), rule, "split"))
        start += n
    return outs


# -- reductions and loss ----------------------------------------------------

def sum(a) -> Tensor:  # noqa: A001 - mirrors the numpy name on purpose
    a = _as_tensor(a)
    shape = a.shape
    return make_op(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return make_op(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, g / n, dtype=a.data.dtype),), "mean")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class ids."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / len(labels)),)
    return make_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), rule, "cross_entropy")


# -- gradient routing -------------------------------------------------------

def detach(a) -> Tensor:
    return Tensor(_as_tensor(a).data)


def custom_grad(forward_value, grad_source) -> Tensor:
    """Carry ``forward_value``'s data but send all gradient to ``grad_source``.

    This is the detach trick ``fwd.detach() + (src - src.detach())`` as one
    node, so the forward value is exact rather than rounded through an add.
    """
    fv, src = _as_tensor(forward_value), _as_tensor(grad_source)
    if fv.shape != src.shape:
        raise DimensionError(f"custom_grad: {fv.shape} vs {src.shape}")
    return make_op(fv.data, (src,), lambda g: (g,), "custom_grad")


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every participating leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
