import numpy as np

from eisnn.tensor import Tensor, backward, mul, sum as tsum


def numeric_grads(fn, arrays, weights, eps=1e-5):
    """Central differences of sum(fn(*arrays) * weights) w.r.t. every array."""
    def value():
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays, weights):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(tsum(mul(fn(*ts), Tensor(weights))))
    return [t.grad for t in ts]


def rel_err(a, n):
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0
