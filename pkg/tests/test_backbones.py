import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmrul import tensor as T
from ssmrul.backbones import (
    BACKBONES,
    Linear,
    LstmLayer,
    ModelConfig,
    SsmLayer,
    build_model,
    count_mult_adds,
    count_params,
    forward,
    mult_adds_breakdown,
)
from ssmrul.fft import conv_fft_size
from ssmrul.sqr import masked_objective

from .helpers import model_gradient_error, random_batch, small_model


def test_config_validation():
    for bad in (dict(layers=0), dict(latent_dim=0), dict(window_len=0), dict(input_features=0), dict(dropout=1.0)):
        with pytest.raises(ValueError):
            build_model(ModelConfig(**bad))
    with pytest.raises(ValueError, match="unknown backbone"):
        build_model(ModelConfig(backbone="transformer"))
    with pytest.raises(ValueError, match="unknown model config keys"):
        ModelConfig.from_dict({"backbone": "s4", "heads": 8})
    cfg = ModelConfig(backbone="s5", latent_dim=12)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_discretisation_defaults():
    assert ModelConfig(backbone="s4").method == "bilinear"
    assert ModelConfig(backbone="s4d").method == "zoh"
    assert ModelConfig(backbone="s4d", discretization="bilinear").method == "bilinear"


@pytest.mark.parametrize("backbone", BACKBONES)
def test_same_config_same_parameters(backbone):
    a = small_model(backbone, 3).parameters()
    b = small_model(backbone, 3).parameters()
    assert list(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = small_model(backbone, 4).parameters()
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


# -- parameter counts -------------------------------------------------------------


def test_affine_param_count():
    lin = Linear(np.random.default_rng(0), 24, 64)
    assert sum(p.size for p in lin.params().values()) == 24 * 64 + 64 == 1600


def test_lstm_cell_param_formula():
    cell = LstmLayer(np.random.default_rng(0), 24, 64)
    assert sum(p.size for p in cell.params().values()) == 4 * (64 * (64 + 24) + 64)


def test_lstm_model_param_count():
    m = build_model(ModelConfig(backbone="lstm", latent_dim=64, layers=1, input_features=24))
    encoder = (24 + 1) * 64 + 64  # tau is one extra input channel in concat mode
    cell = 4 * (64 * (64 + 64) + 64)  # the cell sees the 64-wide encoder output
    norm = 2 * 64
    decoder = 64 + 1
    assert count_params(m) == encoder + norm + cell + decoder


@pytest.mark.parametrize("N", [4, 8])
def test_s4d_layer_param_enumeration(N):
    H = 64
    layer = SsmLayer(np.random.default_rng(0), "S4D", N, H, "zoh", "scan", 1e-3, 1e-1)
    sizes = {k: v.size for k, v in layer.params().items()}
    # N stored modes, each complex value counted as two reals
    assert sizes == {
        "log_neg_lambda_re": H * N,
        "lambda_im": H * N,
        "B_re": H * N,
        "B_im": H * N,
        "C_re": H * N,
        "C_im": H * N,
        "D": H,
        "log_dt": H,
    }
    assert sum(sizes.values()) == 6 * H * N + 2 * H


def test_s4_and_s5_param_enumeration():
    s4 = SsmLayer(np.random.default_rng(0), "S4", 4, 6, "bilinear", "scan", 1e-3, 1e-1)
    assert sum(p.size for p in s4.params().values()) == 8 * 6 * 4 + 2 * 6
    s5 = SsmLayer(np.random.default_rng(0), "S5", 4, 6, "zoh", "scan", 1e-3, 1e-1)
    assert sum(p.size for p in s5.params().values()) == 2 * 4 + 2 * 4 * 6 + 2 * 6 * 4 + 6 + 1


def test_empty_model_counts_zero():
    class Empty:
        def parameters(self):
            return {}

    assert count_params(Empty()) == 0


# -- mult-adds ------------------------------------------------------------------------


def test_affine_mult_adds():
    lin = Linear(np.random.default_rng(0), 24, 64)
    assert lin.mult_adds(100) == 153600
    with T.count_mult_adds() as c:
        lin(T.Tensor(np.zeros((1, 100, 24))))
    assert c.total == 153600


def test_lstm_mult_adds_formula_and_instrumentation():
    cell = LstmLayer(np.random.default_rng(0), 64, 64)
    assert cell.mult_adds(100) == 3_276_800
    with T.count_mult_adds() as c:
        cell(T.Tensor(np.random.default_rng(1).normal(size=(1, 100, 64))))
    assert c.total == 3_276_800


def test_lstm_model_instrumented_total():
    m = small_model("lstm", 0)
    x, _, _, taus = random_batch(m, 0, B=1)
    with T.count_mult_adds() as c:
        m(x, taus)
    assert c.total == count_mult_adds(m)


@pytest.mark.parametrize("backbone", ["s4d", "s5"])
def test_ssm_model_affine_parts_instrumented(backbone):
    m = small_model(backbone, 0)
    L, H, N = m.cfg.window_len, m.cfg.latent_dim, m.cfg.state_dim
    x, _, _, taus = random_batch(m, 0, B=1)
    with T.count_mult_adds() as c:
        m(x, taus)
    parts = mult_adds_breakdown(m, L)
    affine = sum(v for k, v in parts.items() if not k.endswith(".ssm"))
    # the scan's input and output projections are matmuls too
    projections = 2 * L * N * H * m.cfg.layers if backbone == "s5" else 0
    assert c.total == affine + projections


def test_fft_layer_formula():
    L, H = 100, 64
    layer = SsmLayer(np.random.default_rng(0), "S4D", 8, H, "zoh", "scan", 1e-3, 1e-1)
    n = conv_fft_size(L)
    assert n == 256
    # three length-n transforms at n log2 n each, a pointwise product, the skip term
    assert layer.mult_adds(L) == 3 * n * int(np.log2(n)) * H + n * H + L * H


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(BACKBONES), st.integers(1, 600))
def test_mult_adds_at_least_double_with_length(backbone, L):
    m = small_model(backbone)
    assert count_mult_adds(m, 2 * L) >= 2 * count_mult_adds(m, L)


# -- forward ----------------------------------------------------------------------------


@pytest.mark.parametrize("backbone", BACKBONES)
@pytest.mark.parametrize("conditioning", ["concat", "multiplicative", "multiplicative_raw", "learned"])
def test_output_shape_and_sign(backbone, conditioning):
    m = small_model(backbone, conditioning=conditioning)
    x, _, _, taus = random_batch(m, 1, B=3)
    out = m(x, taus)
    assert out.shape == (3, m.cfg.window_len)
    assert np.all(out.data >= 0)


def test_multiplicative_identities():
    m = small_model("s4d", conditioning="multiplicative")
    x = random_batch(m, 0, B=2)[0]
    base = m.base(x).data
    assert np.array_equal(forward(m, x, [0.5, 0.5]).data, base)
    np.testing.assert_array_equal(forward(m, x, [0.9, 0.9]).data, base * 1.8)
    raw = small_model("s4d", conditioning="multiplicative_raw")
    np.testing.assert_array_equal(forward(raw, x, [0.3, 0.3]).data, raw.base(x).data * 0.3)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_multiplicative_ratio(t1, t2):
    m = small_model("s5", conditioning="multiplicative")
    x = random_batch(m, 0, B=1)[0]
    o1 = forward(m, x, [t1]).data
    o2 = forward(m, x, [t2]).data
    np.testing.assert_allclose(o2, (t2 / t1) * o1, rtol=1e-13)


def test_learned_conditioning_starts_as_multiplicative():
    a = small_model("s4", conditioning="learned")
    b = small_model("s4", conditioning="multiplicative")
    x = random_batch(a, 0, B=2)[0]
    np.testing.assert_array_equal(forward(a, x, [0.2, 0.7]).data, forward(b, x, [0.2, 0.7]).data)


def test_forward_errors():
    m = small_model("s4d")
    x = random_batch(m, 0, B=2)[0]
    for bad in ([0.0, 0.5], [0.5, 1.0], [1.2, 0.3]):
        with pytest.raises(ValueError):
            m(x, bad)
    with pytest.raises(T.ShapeError):
        m(x, [0.5, 0.5, 0.5])
    with pytest.raises(T.ShapeError):
        m(x[..., :3], [0.5, 0.5])


def test_s5_conv_mode_matches_scan():
    a = small_model("s5", 2)
    b = small_model("s5", 2, s5_mode="conv")
    x, _, _, taus = random_batch(a, 0)
    np.testing.assert_allclose(a(x, taus).data, b(x, taus).data, atol=1e-10)


def test_dropout_only_with_rng():
    m = small_model("s4d", dropout=0.5)
    x, _, _, taus = random_batch(m, 0)
    assert np.array_equal(m(x, taus).data, m(x, taus).data)
    assert not np.array_equal(m(x, taus, np.random.default_rng(0)).data, m(x, taus).data)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_no_dead_parameters(backbone):
    m = small_model(backbone, 0, conditioning="learned")
    x, y, mask, taus = random_batch(m, 0, B=4)
    params = m.parameters()
    T.backward(masked_objective(y, mask, m(x, taus), taus))
    dead = [k for k, p in params.items() if p.grad is None or not np.any(p.grad != 0)]
    assert dead == []


def test_load_parameters_checks_names_and_shapes():
    m = small_model("s4d")
    vals = {k: p.data for k, p in m.parameters().items()}
    vals.pop("decoder.b")
    with pytest.raises(ValueError, match="decoder.b"):
        m.load_parameters(vals)
    vals = {k: p.data for k, p in m.parameters().items()}
    vals["decoder.b"] = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        m.load_parameters(vals)


@pytest.mark.parametrize("backbone,conditioning", [("s4", "concat"), ("s4d", "learned"), ("s5", "multiplicative"), ("lstm", "concat")])
def test_full_loss_gradient(backbone, conditioning):
    m = small_model(backbone, 7, conditioning=conditioning)
    err, where = model_gradient_error(m, random_batch(m, 7), eps=1e-4)
    assert err < 1e-4, where
