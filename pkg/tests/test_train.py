import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from onlinesar import loss, rda, simgen, train
from onlinesar.loss import KdWeights, LossWeights
from onlinesar.sarcore import RadarParams
from onlinesar.ssm import TinyModel
from onlinesar.train import TrainConfig

P = RadarParams.desk()


def toy_rasters(n_a=128, n_r=128, seed=1, n_targets=6):
    spec = simgen.SceneSpec(n_pulses=n_a, n_range_bins=n_r, clutter_mean_power=1e-2, seed=seed)
    spec = replace(spec, targets=simgen.random_targets(spec, n_targets, seed))
    raw = simgen.synth_raw(spec)
    f = rda.batched_filters_for(raw)
    return rda.range_compress(raw, f.h_r).data, rda.focus_batched(raw, f).data


@pytest.fixture(scope="module")
def toy():
    rc, az = toy_rasters()
    cfg = TrainConfig(strip_len=64)
    return train.strip_dataset(rc[:, 40:44], az[:, 40:44], cfg).subset(np.arange(4))


def test_strip_dataset_shapes_and_errors():
    rc, az = toy_rasters(n_a=128, n_r=128)
    big = np.zeros((1000, 8), complex)
    d = train.strip_dataset(big, big, TrainConfig())
    assert len(d) == 8 and d.strip_len == 1000
    with pytest.raises(ValueError):
        train.strip_dataset(big[:999], big[:999], TrainConfig())
    with pytest.raises(ValueError):
        train.strip_dataset(rc, az[:, :5])
    cfg = TrainConfig(strip_len=32)
    a, b = train.strip_dataset(rc, az, cfg), train.strip_dataset(rc, az, cfg)
    assert np.array_equal(a.origin, b.origin) and np.array_equal(a.inputs, b.inputs)
    assert len(a) == 128 * 4
    r, s = a.origin[0]
    assert np.allclose(a.inputs[0] * 2000, rc[s:s + 32, r])
    assert np.allclose(a.targets[0] * 2000, az[s:s + 32, r])
    assert a.p_r[0] == pytest.approx(r / 127)
    tr, va = a.split(0.25)
    assert len(va) == 128 and len(tr) == 384


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_fd_gradient_of_quadratic(vals):
    theta = np.array(vals)
    g = train.fd_gradient(lambda t: float(np.sum(t**2)), theta)
    assert np.allclose(g, 2 * theta, atol=1e-6)


def test_fd_gradient_of_abs_and_nonfinite():
    assert train.fd_gradient(lambda t: abs(t[0]), np.array([1.0]))[0] == pytest.approx(1.0)
    with pytest.raises(FloatingPointError):
        train.fd_gradient(lambda t: math.inf, np.zeros(2))


def test_fast_gradient_equals_plain_fd(toy):
    model = TinyModel.init()
    obj = train.BatchObjective(model, toy, LossWeights(), KdWeights(lambda_kd=0))
    value, g = obj.gradient(1e-4)
    assert value == obj.value()
    coords = [0, 17, 60, 200, 493]
    ref = train.fd_gradient(obj.value, model.param_vector(), 1e-4, coords)
    assert np.allclose(g[coords], ref[coords], rtol=1e-6, atol=1e-10)


def test_gradient_single_fc_weight_against_fourth_order(toy):
    rows = train.gradcheck(TinyModel.init(), toy, coords=[3])
    assert rows[0]["param"] == "fc1[3]"
    assert rows[0]["rel_err"] < 1e-3


def test_schedule():
    cfg = TrainConfig(lr=4e-4, warmup_epochs=3, max_epochs=13)
    got = [train.lr_at(e, cfg) for e in range(13)]
    assert got[:3] == pytest.approx([4e-4 / 3, 8e-4 / 3, 4e-4])
    for e in range(3, 13):
        assert got[e] == pytest.approx(0.5 * 4e-4 * (1 + math.cos(math.pi * (e - 3) / 10)))


def test_clip_and_adam():
    g = np.array([3.0, 4.0])
    assert np.allclose(train.clip_by_norm(g, 0.5), [0.3, 0.4])
    assert np.array_equal(train.clip_by_norm(g, 10), g)
    opt = train.Adam.for_size(2, TrainConfig())
    theta = opt.step(np.zeros(2), g, 0.1)
    # first bias-corrected step moves every coordinate by lr against the gradient sign
    assert np.allclose(theta, [-0.1, -0.1], atol=1e-7)


def test_config_parsing():
    cfg = TrainConfig.from_mapping({"lr": "1e-3", "max_epochs": "5"})
    assert cfg.lr == 1e-3 and cfg.max_epochs == 5 and isinstance(cfg.max_epochs, int)
    with pytest.raises(KeyError):
        TrainConfig.from_mapping({"learning_rate": "1"})
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_training_reduces_loss_on_toy_set(toy):
    cfg = TrainConfig(lr=1e-2, max_epochs=20, strip_len=64, batch_strips=4, grad_accum=1, patience=40)
    w = LossWeights()
    before = train.dataset_loss(TinyModel.init(), toy, w, batch_strips=4)
    res = train.train_student(TinyModel.init(), toy, cfg, w=w)
    after = train.dataset_loss(res.model, toy, w, batch_strips=4)
    assert after <= 0.7 * before
    assert len(res.history) == 20
    assert {"epoch", "lr", "train_loss", "val_loss", "val_amp_corr", "train_ampcorr"} <= set(res.history[0])


def test_zero_distillation_ignores_teacher(toy):
    cfg = TrainConfig(lr=1e-2, max_epochs=2, strip_len=64, batch_strips=2, grad_accum=1)
    kw = KdWeights(lambda_kd=0)
    other = train.TeacherRef(train.TeacherKind.SSM_TEACHER, TinyModel.init(seed=7))
    a = train.train_student(TinyModel.init(), toy, cfg, kw=kw)
    b = train.train_student(TinyModel.init(), toy, cfg, teacher=other, kw=kw)
    assert np.array_equal(a.final.param_vector(), b.final.param_vector())
    c = train.train_student(TinyModel.init(), toy, cfg, kw=KdWeights(lambda_kd=0.05), teacher=other)
    assert not np.array_equal(a.final.param_vector(), c.final.param_vector())


def test_early_stopping_and_history(toy, tmp_path):
    cfg = TrainConfig(lr=1e-9, max_epochs=30, patience=2, strip_len=64, batch_strips=4, grad_accum=1,
                      min_delta=1.0)
    res = train.train_student(TinyModel.init(), toy, cfg)
    assert res.stopped_early and len(res.history) == 3
    res.write_history(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0].startswith("epoch,lr,train_loss")


def test_divergence_is_reported(toy):
    model = TinyModel.init()
    theta = model.param_vector()
    theta[0] = 1e308
    cfg = TrainConfig(max_epochs=1, strip_len=64, batch_strips=4)
    with np.errstate(all="ignore"), pytest.raises(train.TrainingDiverged) as e:
        train.train_student(model.with_params(theta), toy, cfg)
    assert e.value.last_good is not None


def test_eval_run_matches_direct_metrics(toy):
    m = TinyModel.init()
    got = train.eval_run(m, toy)
    out = m.forward_strip(np.stack([toy.inputs.real, toy.inputs.imag,
                                    np.broadcast_to(toy.p_r[:, None], toy.inputs.shape)], -1))
    ref = loss.metrics((out[..., 0] + 1j * out[..., 1]) * 2000, toy.targets * 2000)
    assert got == ref
