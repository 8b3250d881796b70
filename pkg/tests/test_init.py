import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eisnn.circuit import EILayerParams
from eisnn.init import (
    P_MAX, P_MIN, calibrate, clamped_kaiming_init, current_stats, divisive_gain_for, init_layer,
    rate_for, sample_exponential_weights,
)
from eisnn.network import Model, ModelSpec
from eisnn.prop import StabilizationConfig
from eisnn.tensor import Tensor


def test_closed_forms_at_reference_point():
    assert rate_for(300, 0.5) == pytest.approx(30.0)
    assert divisive_gain_for(300, 0.5) == pytest.approx(0.1)


@settings(max_examples=50, deadline=None)
@given(d=st.integers(2, 2000), p=st.floats(0.01, 0.99))
def test_moment_identities(d, p):
    lam, g = rate_for(d, p), divisive_gain_for(d, p)
    std = math.sqrt(d * p * (2 - p)) / lam
    # unit-variance-style target: std of excitatory current = sqrt(p(1-p))
    assert std == pytest.approx(math.sqrt(p * (1 - p)))
    # mean divisive current d p g / lam equals that std
    assert d * p * g / lam == pytest.approx(std)


@settings(max_examples=20, deadline=None)
@given(p=st.floats(0.05, 0.95), d1=st.integers(2, 500), d2=st.integers(2, 500))
def test_rate_grows_with_fan_in(p, d1, d2):
    if d1 < d2:
        assert rate_for(d1, p) < rate_for(d2, p)


def test_exponential_samples_monte_carlo():
    w = sample_exponential_weights((400_000,), 30.0, 0)
    assert w.min() >= 0
    assert w.mean() == pytest.approx(1 / 30, rel=0.01)
    assert w.var() == pytest.approx(1 / 900, rel=0.02)
    with pytest.raises(ValueError):
        sample_exponential_weights((3,), 0.0)


def test_init_layer_sets_deterministic_parts():
    p = EILayerParams.dense(300, 256)
    rep = init_layer(p, 0.5, 0)
    assert np.all(p.W_EI.data == 1 / 64)
    assert np.allclose(p.g_I.data, 0.1) and np.all(p.g_E.data == 1) and not p.b_E.data.any()
    assert rep.lam == pytest.approx(30) and set(rep.to_dict()) >= {"lambda", "g_I_value", "p_hat"}


def test_monte_carlo_currents_match_closed_forms():
    rng = np.random.default_rng(1)
    p = EILayerParams.dense(300, 256)
    init_layer(p, 0.5, rng)
    x = (rng.random((10_000, 300)) < 0.5).astype(float)
    st_ = current_stats(p, [Tensor(x)], StabilizationConfig())
    assert st_["mean_I_EE"] == pytest.approx(5.0, rel=0.05)
    assert st_["std_I_EE"] == pytest.approx(0.5, rel=0.1)
    assert st_["mean_I_EI_div"] == pytest.approx(0.5, rel=0.1)
    assert st_["balance_residual"] <= 0.05


def test_clamping_warns():
    p = EILayerParams.dense(10, 8)
    with pytest.warns(RuntimeWarning):
        rep = init_layer(p, 0.0)
    assert rep.p_hat == P_MIN and rep.clamped
    with pytest.warns(RuntimeWarning):
        rep = init_layer(p, 1.0)
    assert rep.p_hat == P_MAX


def test_kaiming_variants():
    p = EILayerParams.dense(400, 400)
    clamped_kaiming_init(p, "EE_IE", 0.5, 0)
    assert abs((p.W_EE.data == 0).mean() - 0.5) < 0.01
    assert np.all(p.W_EI.data == 1 / 100)
    clamped_kaiming_init(p, "EE_IE_EI", 0.5, 0)
    assert abs((p.W_EI.data == 0).mean() - 0.5) < 0.02
    with pytest.raises(ValueError):
        clamped_kaiming_init(p, "all")


def test_calibrate_is_sequential_and_reports_every_layer():
    model = Model(ModelSpec.parse("mlp:20,16,8,4"))
    x = np.random.default_rng(0).random((32, 20))
    reps = calibrate(model, x, seed=0)
    assert [r.layer for r in reps] == [0, 1]
    assert reps[0].p_hat == pytest.approx(x.mean())
    # second layer's estimate is the first layer's measured output rate
    assert reps[1].p_hat == pytest.approx(np.clip(reps[0].stats["output_rate"], P_MIN, P_MAX))
    again = Model(ModelSpec.parse("mlp:20,16,8,4"))
    calibrate(again, x, seed=0)
    assert np.array_equal(again.layers[1].W_EE.data, model.layers[1].W_EE.data)


def test_calibrate_rejects_empty_batch():
    with pytest.raises(ValueError):
        calibrate(Model(ModelSpec.parse("mlp:4,8,2")), np.zeros((0, 4)))
