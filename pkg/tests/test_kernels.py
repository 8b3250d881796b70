import os
import subprocess
import sys

import numpy as np
import pytest

from eisnn import _pykernels as py
from eisnn import kernels

try:
    from eisnn import _ckernels as ck
except ImportError:                      # extension not built
    ck = None

needs_c = pytest.mark.skipif(ck is None, reason="compiled kernels not built")


@needs_c
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,pad", [(1, 0), (3, 1), (3, 0), (5, 2)])
def test_im2col_col2im_agree(dtype, k, pad):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6)).astype(dtype)
    a, b = py.im2col(x, k, pad), ck.im2col(x, k, pad)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_allclose(py.col2im(cols, x.shape, k, pad), ck.col2im(cols, x.shape, k, pad),
                               rtol=1e-5 if dtype == np.float32 else 1e-12,
                               atol=1e-5 if dtype == np.float32 else 1e-12)


@needs_c
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_pool_zero_replace_surrogate_agree(dtype):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 6)).astype(dtype)
    np.testing.assert_allclose(py.avg_pool2(x), ck.avg_pool2(x), rtol=1e-6)
    g = rng.standard_normal((2, 3, 2, 3)).astype(dtype)
    np.testing.assert_array_equal(py.avg_pool2_backward(g), ck.avg_pool2_backward(g))
    z = (rng.exponential(size=(5, 8)) * (rng.random((5, 8)) > 0.5)).astype(dtype)
    z[2] = 0
    (oa, na), (ob, nb) = py.zero_replace_rows(z, 1.0), ck.zero_replace_rows(z, 1.0)
    assert np.array_equal(oa, ob) and na == nb == 1
    v, gg = rng.standard_normal(20).astype(dtype), rng.standard_normal(20).astype(dtype)
    np.testing.assert_allclose(py.arctan_surrogate_grad(v, gg, 2.0), ck.arctan_surrogate_grad(v, gg, 2.0),
                               rtol=1e-6)


def test_im2col_layout():
    x = np.arange(2 * 1 * 3 * 3, dtype=float).reshape(2, 1, 3, 3)
    cols = kernels.im2col(x, 3, 1)
    assert cols.shape == (18, 9)
    # centre patch of the first image is the image itself
    np.testing.assert_array_equal(cols[4], x[0, 0].ravel())


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 2, 5, 5))
    c = rng.standard_normal(kernels.im2col(x, 3, 1).shape)
    lhs = np.sum(kernels.im2col(x, 3, 1) * c)
    rhs = np.sum(x * kernels.col2im(c, x.shape, 3, 1))
    assert lhs == pytest.approx(rhs)


def test_pure_python_backend_selected_by_env():
    code = ("import numpy as np; from eisnn import kernels; from eisnn.network import Model, ModelSpec;"
            "from eisnn.init import calibrate; m = Model(ModelSpec.parse('vgg8_small:8,8', input_shape=(1,8,8)));"
            "x = np.random.default_rng(0).standard_normal((2,1,8,8)); calibrate(m, x);"
            "print(kernels.BACKEND); np.save(__import__('sys').argv[1], m(x).data)")
    outs = {}
    for flag in ("1", ""):
        path = f"{os.environ.get('TMPDIR', '/tmp')}/eisnn_backend_{flag or 'default'}.npy"
        env = {**os.environ, "EISNN_PURE_PYTHON": flag}
        r = subprocess.run([sys.executable, "-c", code, path], env=env, capture_output=True, text=True,
                           check=True)
        outs[r.stdout.strip()] = np.load(path)
    assert "python" in outs
    if ck is not None:
        np.testing.assert_allclose(outs["python"], outs["cython"], rtol=1e-10)
