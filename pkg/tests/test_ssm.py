import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onlinesar import rda, sarcore, simgen, ssm
from onlinesar.ssm import ModelConfig, S4DLayer, TinyModel
from oracles import s4d_recurrence

P = sarcore.RadarParams.desk()


def random_model(seed, widths=None, state_dim=None, disc=None, jitter=0.3):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(widths=tuple(widths or r.integers(1, 5, 4)), state_dim=int(state_dim or r.integers(1, 17)),
                      discretization=disc or str(r.choice(["zoh", "bilinear"])))
    m = TinyModel.init(cfg, seed)
    theta = m.param_vector()
    return m.with_params(theta + jitter * r.standard_normal(theta.size))


configs = st.builds(lambda s, w, n, d: random_model(s, w, n, d),
                    st.integers(0, 10**6), st.tuples(*[st.integers(1, 4)] * 4),
                    st.integers(1, 16), st.sampled_from(["zoh", "bilinear"]))


# -- S4D layer ---------------------------------------------------------------

def test_lin_init():
    layer = ssm.s4d_lin_init(8, 3, seed=5)
    assert layer.lam[0, 0] == pytest.approx(-0.5 + 0j)
    assert np.allclose(layer.lam.real, -0.5)
    assert np.allclose(layer.lam.imag[1], np.pi * np.arange(8))
    assert np.all(layer.d == 1)
    assert np.all((layer.dt >= 1e-3) & (layer.dt <= 1e-1))
    again = ssm.s4d_lin_init(8, 3, seed=5)
    assert np.array_equal(layer.b, again.b) and np.array_equal(layer.log_dt, again.log_dt)
    big = ssm.s4d_lin_init(64, 64, seed=1)
    assert np.mean(np.abs(big.b) ** 2) == pytest.approx(1.0, rel=0.05)


def one_mode(lam, b=1.0, c=1.0, dt=1.0, disc="zoh"):
    return S4DLayer(np.array([[np.log(-lam.real)]]), np.array([[lam.imag]]), np.array([[b + 0j]]),
                    np.array([[c + 0j]]), np.zeros(1), np.array([np.log(dt)]), disc)


def test_discretization_closed_forms():
    lam_bar, _ = ssm.discretize(one_mode(-1 + 0j, dt=np.log(2)))
    assert lam_bar[0, 0] == pytest.approx(0.5)
    layer = ssm.s4d_lin_init(4, 2, seed=0)
    for dt in (1e-3, 1e-4):
        small = S4DLayer(layer.log_a_re, layer.a_im, layer.b, layer.c, layer.d, np.full(2, np.log(dt)))
        lb, _ = ssm.discretize(small)
        assert np.max(np.abs(lb - (1 + layer.lam * dt))) < 10 * dt**2 * np.max(np.abs(layer.lam)) ** 2


@given(configs)
def test_discrete_modes_are_stable(model):
    for layer in model.ssms.values():
        assert np.all(np.abs(layer.discrete[0]) < 1)


def test_geometric_kernel():
    # lam_bar = 0.5 with b_bar = 1 needs b = lam / (lam_bar - 1) under zero-order hold
    lam = -np.log(2) + 0j
    layer = one_mode(lam, b=lam.real / (0.5 - 1))
    k = ssm.s4d_kernel(layer, 6)[0]
    assert np.allclose(k, 2 * 0.5 ** np.arange(6))


def test_kernel_decays_and_matches_impulse():
    layer = ssm.s4d_lin_init(8, 2, seed=3)
    k = ssm.s4d_kernel(layer, 1000)
    assert np.all(np.abs(k[:, -1]) < np.abs(k[:, 0]))
    state = ssm.s4d_zero_state(layer)
    u = np.zeros((20, 2))
    u[0] = 1
    ys = []
    for l in range(20):
        state, y = ssm.s4d_step(layer, state, u[l])
        ys.append(y - layer.d * u[l])
    assert np.allclose(np.array(ys).T, k[:, :20], atol=1e-12)


@pytest.mark.parametrize("disc", ["zoh", "bilinear"])
def test_layer_against_explicit_recurrence(rng, disc):
    layer = ssm.s4d_lin_init(6, 3, seed=11, discretization=disc)
    u = rng.standard_normal((256, 3))
    conv = ssm.s4d_forward_conv(layer, u)
    for h in range(3):
        ref = s4d_recurrence(layer.lam[h], layer.b[h], layer.c[h], layer.d[h], layer.dt[h], u[:, h], disc)
        assert np.max(np.abs(conv[:, h] - ref)) < 1e-5


def test_conv_edge_cases(rng):
    layer = ssm.s4d_lin_init(4, 2, seed=2)
    assert not np.any(ssm.s4d_forward_conv(layer, np.zeros((32, 2))))
    imp = np.zeros((32, 2))
    imp[0] = 1
    out = ssm.s4d_forward_conv(layer, imp)
    assert np.allclose(out.T, ssm.s4d_kernel(layer, 32) + layer.d[:, None] * imp.T)
    s, y = ssm.s4d_step(layer, ssm.s4d_zero_state(layer), np.zeros(2))
    assert not np.any(s) and not np.any(y)
    with pytest.raises(ValueError):
        ssm.s4d_step(layer, np.zeros((3, 4), complex), np.zeros(3))


def test_causal_conv_against_direct(rng):
    u, k = rng.standard_normal((2, 40))
    direct = np.array([sum(k[j] * u[l - j] for j in range(l + 1)) for l in range(40)])
    assert np.allclose(ssm.causal_conv(u, k), direct)


def test_long_recurrence_stays_bounded():
    model = TinyModel.init()
    state = model.zero_state((4,))
    x = np.random.default_rng(0).uniform(-1, 1, (4, 3))
    peak = 0.0
    for _ in range(100_000 // 100):
        for _ in range(100):
            state, y = model.step(state, x)
        peak = max(peak, float(np.abs(y).max()))
    assert np.isfinite(peak) and peak < 1e3


# -- network -----------------------------------------------------------------

def test_default_sizes():
    m = TinyModel.init()
    assert m.n_params() == m.param_vector().size == 494
    assert sum(f for _, f in ssm.layer_flops()) == 1097
    assert [n for n, _ in ssm.layer_flops()] == [n for n in ssm.CHAIN]
    slices = m.param_slices()
    assert slices[0][2] == 0 and slices[-1][3] == 494
    assert all(a[3] == b[2] for a, b in zip(slices, slices[1:]))


@given(configs)
def test_param_vector_round_trip(model):
    theta = model.param_vector()
    assert np.array_equal(model.with_params(theta).param_vector(), theta)
    with pytest.raises(ValueError):
        model.with_params(theta[:-1])


@settings(max_examples=25)
@given(configs, st.sampled_from([16, 64, 256]))
def test_strip_equals_step_rollout(model, length):
    x = np.random.default_rng(length).uniform(-1, 1, (2, length, 3))
    conv = model.forward_strip(x)
    state = model.zero_state((2,))
    out = []
    for l in range(length):
        state, y = model.step(state, x[:, l])
        out.append(y)
    assert np.max(np.abs(conv - np.stack(out, 1))) < 1e-5


def test_zero_input_zero_bias_gives_zero():
    m = TinyModel.init()
    assert not np.any(m.forward_strip(np.zeros((5, 3))))
    state, y = ssm.tiny_step(m, m.zero_state(), 0j, 0.0)
    assert y == 0 and not any(np.any(s) for s in state)


def test_shared_parameters_across_bins(rng):
    m = random_model(4)
    strip = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    out = ssm.predict_strips(m, np.stack([strip, strip]), np.array([0.3, 0.3]))
    assert np.array_equal(out[0], out[1])


def test_nonfinite_activation_named():
    m = TinyModel.init()
    theta = m.param_vector()
    _, name, start, _ = m.param_slices()[2]          # third parameterised layer (fc3)
    theta[start] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(ssm.NonFiniteActivationError) as e:
        m.with_params(theta).forward_strip(np.ones((4, 3)))
    assert e.value.layer == name


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(widths=(1, 2, 3))
    with pytest.raises(ValueError):
        ModelConfig(discretization="euler")
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


# -- streaming ---------------------------------------------------------------

def small_raw(n_a=128, n_r=128, seed=0):
    spec = simgen.SceneSpec(n_pulses=n_a, n_range_bins=n_r, clutter_mean_power=1e-2, seed=seed,
                            targets=(simgen.PointTarget(60 * P.pulse_spacing, 30 * P.range_bin_spacing),))
    return simgen.synth_raw(spec)


def test_stream_equals_conv_mode():
    raw = small_raw()
    m = random_model(7, widths=(3, 2, 2, 2), state_dim=8, disc="zoh", jitter=0.1)
    rows = list(ssm.osp_focus_stream(m, P, raw.data))
    assert [r.k for r in rows] == list(range(raw.rows))
    stream = np.stack([r.data for r in rows])
    rc = rda.range_compress(raw, rda.range_filter(P, raw.cols)).data
    conv = ssm.osp_focus_strip(m, rc)
    assert np.max(np.abs(stream - conv)) < 1e-4 * max(1.0, np.abs(conv).max())


def test_zero_stream_and_order_errors():
    # the range-position feature is a nonzero input, so zero-in/zero-out needs it switched off
    proc = ssm.OnlineProcessor(TinyModel.init(), P, 128, use_range_feature=False)
    assert not np.any(proc.push(np.zeros(128)).data)
    with pytest.raises(sarcore.PulseOrderError):
        proc.push(np.zeros(128), 5)
    with pytest.raises(ValueError):
        proc.push(np.zeros(64))
    assert list(ssm.osp_focus_stream(TinyModel.init(), P, [])) == []


def test_threaded_range_bins_identical():
    raw = small_raw()
    m = random_model(9, widths=(3, 2, 2, 2), state_dim=8, disc="zoh", jitter=0.1)
    a = ssm.OnlineProcessor(m, P, raw.cols)
    b = ssm.OnlineProcessor(m, P, raw.cols, range_threads=3)
    try:
        for k in range(20):
            assert np.array_equal(a.push(raw.data[k]).data, b.push(raw.data[k]).data)
    finally:
        b.close()


def test_state_bank_size_is_fixed():
    m = TinyModel.init()
    proc = ssm.OnlineProcessor(m, P, 128)
    before = proc.bank.nbytes
    for k in range(50):
        proc.push(np.ones(128), k)
    assert proc.bank.nbytes == before == 128 * sum(w * 8 for w in m.config.widths) * 16


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = random_model(3)
    ssm.save_model(m, tmp_path / "m.ospm")
    back = ssm.load_model(tmp_path / "m.ospm")
    assert back.config == m.config
    assert np.array_equal(back.param_vector(), m.param_vector().astype(np.float32).astype(np.float64))
    ssm.save_model(back, tmp_path / "m2.ospm")
    assert (tmp_path / "m.ospm").read_bytes() == (tmp_path / "m2.ospm").read_bytes()


def test_checkpoint_errors(tmp_path):
    ssm.save_model(TinyModel.init(), tmp_path / "m")
    blob = (tmp_path / "m").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(sarcore.MagicError):
        ssm.load_model(tmp_path / "bad")
    (tmp_path / "short").write_bytes(blob[:-4])
    with pytest.raises(sarcore.TruncatedPayloadError):
        ssm.load_model(tmp_path / "short")
