import configparser

import numpy as np
import pytest

from eisnn.init import calibrate
from eisnn.network import Model, ModelSpec, direct_encode
from eisnn.tensor import DimensionError, Tensor, avg_pool2, backward, cross_entropy, no_grad


def test_parse_and_describe():
    spec = ModelSpec.parse("mlp:784,400,10")
    assert spec.widths == (400,) and spec.input_shape == (784,) and spec.classes == 10
    assert spec.describe() == "mlp:784,400,10"
    vgg = ModelSpec.parse("vgg8_small")
    assert vgg.widths == (64, 64, 128, 128, 256) and vgg.input_shape == (3, 32, 32)
    assert ModelSpec.from_dict(vgg.to_dict()) == vgg
    with pytest.raises(ValueError):
        ModelSpec.parse("resnet18")
    with pytest.raises(ValueError):
        ModelSpec.parse("mlp:10,6,2")


def test_from_config(tmp_path):
    cp = configparser.ConfigParser()
    cp["model"] = {"arch": "vgg8_small:8,8,16", "input_shape": "1x16x16", "classes": "5", "T": "2",
                   "tau_E": "3.0"}
    path = tmp_path / "m.ini"
    with open(path, "w") as f:
        cp.write(f)
    spec = ModelSpec.from_config(str(path))
    assert spec.widths == (8, 8, 16) and spec.input_shape == (1, 16, 16) and spec.T == 2
    assert spec.classes == 5 and spec.tau_E == 3.0


def test_direct_encode():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    seq = direct_encode(x, 4)
    assert len(seq) == 4 and all(s is x for s in seq)
    assert len(direct_encode(x, 1)) == 1
    np.testing.assert_array_equal(sum(s.data for s in seq), 4 * x.data)


def test_avg_pool_examples():
    np.testing.assert_array_equal(avg_pool2(Tensor(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]))).data, [[[[0.5]]]])
    np.testing.assert_array_equal(avg_pool2(Tensor(np.full((1, 1, 4, 4), 3.0))).data, 3.0)
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    backward(avg_pool2(x).sum())
    np.testing.assert_array_equal(x.grad, 0.25)


def _tiny_vgg():
    spec = ModelSpec.parse("vgg8_small:8,8,16", input_shape=(2, 8, 8), classes=3, T=2)
    return Model(spec, seed=0)


def test_zero_input_gives_bias():
    model = Model(ModelSpec.parse("mlp:6,8,3"))
    calibrate(model, np.random.default_rng(0).random((4, 6)))
    logits = model(np.zeros((2, 6)))
    np.testing.assert_allclose(logits.data, np.tile(model.head_b.data, (2, 1)))


def test_state_isolation_and_shapes():
    model = _tiny_vgg()
    x = np.random.default_rng(1).standard_normal((3, 2, 8, 8))
    calibrate(model, x)
    with no_grad():
        a, b = model(x).data, model(x).data
    assert a.shape == (3, 3) and np.all(np.isfinite(a))
    assert np.array_equal(a, b)


def test_every_layer_receives_gradient():
    model = _tiny_vgg()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 2, 8, 8))
    calibrate(model, x)
    backward(cross_entropy(model(x), rng.integers(0, 3, 4)))
    for p in model.layers:
        assert np.linalg.norm(p.W_EE.grad) > 0


def test_mlp_accepts_image_batches():
    model = Model(ModelSpec.parse("mlp:16,8,2"))
    calibrate(model, np.random.default_rng(0).random((2, 1, 4, 4)))
    with no_grad():
        assert model(np.ones((2, 1, 4, 4))).shape == (2, 2)
    with pytest.raises(DimensionError):
        model(np.ones((2, 15)))


def _scalar_two_layer(model, x, T):
    """Hand-rolled dense forward for one sample."""
    def layer(p, inp, u, s):
        sI = np.maximum(0, p.W_IE.data @ inp)
        I = p.g_E.data * (p.W_EE.data @ inp - p.W_EI.data @ sI) / (p.W_EI.data @ (p.g_I.data * sI)) + p.b_E.data
        u = 0.5 * (u - s) + I
        return u, (u >= 1).astype(float)
    p0, p1 = model.layers
    u0 = s0 = np.zeros(p0.n_E)
    u1 = s1 = np.zeros(p1.n_E)
    acc = np.zeros(p1.n_E)
    for _ in range(T):
        u0, s0 = layer(p0, x, u0, s0)
        u1, s1 = layer(p1, s0, u1, s1)
        acc += s1
    return model.head_W.data @ (acc / T) + model.head_b.data


def test_two_layer_matches_scalar_oracle():
    model = Model(ModelSpec.parse("mlp:5,8,8,3", T=2))
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 1.0, (1, 5))
    calibrate(model, x)
    with no_grad():
        got = model(x).data[0]
    np.testing.assert_allclose(got, _scalar_two_layer(model, x[0], 2), atol=1e-12)


def test_parameter_names_and_count():
    model = Model(ModelSpec.parse("mlp:4,8,2"))
    names = set(model.parameters())
    assert {"layer0.W_EE", "layer0.W_EI", "head.W", "head.b"} <= names
    assert model.n_parameters() == 8 * 4 + 2 * 4 + 8 * 2 + 2 + 8 + 8 + 2 * 8 + 2
