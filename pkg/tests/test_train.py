import numpy as np
import pytest

from eisnn.circuit import CONSTRAINED
from eisnn.data import DatasetHandle, iterate_batches
from eisnn.init import calibrate
from eisnn.network import Model, ModelSpec
from eisnn.tensor import Tensor
from eisnn.train import (
    SGD, TrainConfig, TrainingCollapse, evaluate, fit, load_checkpoint, lr_at, restore_checkpoint,
    save_checkpoint, sgd_step, train_epoch, train_step,
)


def _toy_data(n=96, d=12, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    centers = rng.random((3, d)) * 4
    x = centers[y] + 0.3 * rng.standard_normal((n, d))
    x = (x - x.mean(0)) / x.std(0)
    return DatasetHandle(x, y, classes=3)


def _model(seed=0, dtype=np.float64):
    return Model(ModelSpec.parse("mlp:12,16,3"), seed=seed, dtype=dtype)


def test_sgd_step_example():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad[...] = 0.5
    buf = {}
    sgd_step({"w": w}, buf, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert w.data[0] == pytest.approx(0.95)
    sgd_step({"w": w}, buf, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert buf["w"][0] == pytest.approx(0.95) and w.data[0] == pytest.approx(0.855)


def test_weight_decay_enters_the_velocity():
    w = Tensor(np.array([2.0]), requires_grad=True)
    buf = {}
    sgd_step({"w": w}, buf, lr=1.0, momentum=0.9, weight_decay=0.1)
    assert w.data[0] == pytest.approx(1.8)


def test_lr_schedule_examples():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, lr_peak=0.1)
    assert lr_at(0.0, cfg) == 0.0
    assert lr_at(0.1, cfg) == pytest.approx(0.05)
    assert lr_at(0.2, cfg) == pytest.approx(0.1)
    assert lr_at(0.6, cfg) == pytest.approx(0.05)
    assert lr_at(1.0, cfg) == pytest.approx(0.0, abs=1e-15)
    lrs = [lr_at(f, cfg) for f in np.linspace(0.2, 1.0, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, warmup_epochs=2)
    with pytest.raises(ValueError):
        TrainConfig(init="xavier")
    with pytest.raises(ValueError):
        TrainConfig(stabilization="eps=-1")
    assert TrainConfig().hash() == TrainConfig().hash() != TrainConfig(lr_peak=0.5).hash()


def test_fit_learns_and_respects_dale():
    data = _toy_data()
    cfg = TrainConfig(epochs=8, batch_size=16, lr_peak=0.2, precision=64)
    model = _model()
    res = fit(model, data, cfg, data)
    assert res.history[-1]["test_acc"] > 0.8 and not res.collapsed
    for p in model.layers:
        for n in CONSTRAINED:
            assert getattr(p, n).data.min() >= 0


def test_fit_is_deterministic():
    data = _toy_data()
    cfg = TrainConfig(epochs=2, batch_size=16, lr_peak=0.2, precision=64)
    a, b = _model(), _model()
    fit(a, data, cfg)
    fit(b, data, cfg)
    for (n, t), u in zip(a.parameters().items(), b.parameters().values()):
        assert np.array_equal(t.data, u.data), n


def test_checkpoint_resume_is_bit_identical(tmp_path):
    data = _toy_data()
    path = str(tmp_path / "ck.bin")
    cfg = TrainConfig(epochs=3, batch_size=16, lr_peak=0.2, precision=64, checkpoint=path)

    straight = _model()
    fit(straight, data, cfg)

    # run one epoch, checkpoint, then resume into a fresh model
    partial = _model()
    calibrate(partial, next(iterate_batches(data, 16, np.random.default_rng(cfg.seed)))[1], seed=cfg.seed)
    opt = SGD(partial.parameters(), cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    train_epoch(partial, data, cfg, opt, 0, rng)
    save_checkpoint(path, partial, opt, 1, rng, cfg)

    resumed = _model(seed=99)
    opt2 = SGD(resumed.parameters(), cfg.momentum, cfg.weight_decay)
    rng2 = np.random.default_rng(12345)
    ck = load_checkpoint(path)
    start = restore_checkpoint(ck, resumed, opt2, rng2)
    assert start == 1 and ck["config_hash"] == cfg.hash(resumed.spec)
    fit(resumed, data, cfg, calibrate_first=False, start_epoch=start, opt=opt2, rng=rng2)
    for (n, t), u in zip(straight.parameters().items(), resumed.parameters().values()):
        assert np.array_equal(t.data, u.data), n


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(str(p))


def test_collapse_on_non_finite_state():
    data = _toy_data()
    model = _model()
    cfg = TrainConfig(epochs=2, batch_size=16, lr_peak=0.2, precision=64)

    def poison(metrics, m):
        m.layers[0].b_E.data[...] = np.nan
    with pytest.raises(TrainingCollapse) as exc:
        fit(model, data, cfg, on_epoch=poison)
    assert exc.value.telemetry["epoch"] == 2


def test_collapse_when_not_beating_majority_class():
    data = _toy_data()
    model = _model()
    model.head_W.data[...] = 0
    model.head_b.data[...] = [5.0, 0.0, 0.0]
    cfg = TrainConfig(epochs=2, batch_size=16, lr_peak=1e-12, precision=64, halt_on_collapse=False)
    res = fit(model, data, cfg)
    assert res.collapsed and "majority" in res.history[0]["collapse_reason"]


def test_evaluate_reports_accuracy():
    data = _toy_data()
    model = _model()
    out = evaluate(model, data, batch_size=40)
    assert 0 <= out["acc"] <= 1 and np.isfinite(out["loss"])


def test_micro_batches_match_whole_batch_update():
    data = _toy_data()
    x, y = data.images[:16], data.labels[:16]
    out = []
    for mb in (0, 5):
        model = _model()
        calibrate(model, x)
        opt = SGD(model.parameters(), 0.9, 5e-4)
        lv, c = train_step(model, opt, x, y, 0.1, micro_batch=mb)
        out.append((lv, c, {k: t.data.copy() for k, t in model.parameters().items()}))
    (la, ca, pa), (lb, cb, pb) = out
    assert la == pytest.approx(lb, rel=1e-12) and ca == cb
    for k in pa:
        np.testing.assert_allclose(pa[k], pb[k], rtol=1e-10, atol=1e-13, err_msg=k)
