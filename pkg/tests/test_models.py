import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit, softplus

from pareval.core import DimensionError, residual, sequential_evaluate
from pareval.models import (ArGRUModel, FiniteDifferenceModel, GruParams, GRUModel,
                            fd_jacobian, fit_noisy_sine_argru, gru_jacobian, gru_jacobian_diag,
                            gru_step, init_random, load_model, model_from_dict, model_to_dict,
                            save_model, stiff_tanh)

KINDS = ["gru", "argru", "affine", "tanh"]


def make(kind, seed=0, T=50):
    return init_random(kind, seed, D=None if kind == "argru" else 4, T=T)


def scalar_params(**kw):
    vals = dict(W_z=0.3, U_z=-0.2, b_z=0.1, W_r=0.5, U_r=0.4, b_r=-0.3,
                W_h=-0.7, U_h=1.1, b_h=0.2)
    vals.update(kw)
    return GruParams(*(np.array([[vals[n]]]) if n[0] in "WU" else np.array([vals[n]])
                       for n in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")))


def test_gru_zero_weights_fixed_point():
    p = GruParams.random(np.random.default_rng(0), 3, 2, scale=0.0)
    assert_array_equal(gru_step(p, np.zeros(2), np.zeros(3)), np.zeros(3))


def test_gru_scalar_hand_value():
    out = gru_step(scalar_params(), np.array([0.8]), np.array([-0.4]))
    assert_allclose(out, [-0.47112250799204913], atol=1e-12)


def test_gru_bounded():
    rng = np.random.default_rng(1)
    p = GruParams.random(rng, 5, 3, scale=3.0)
    h = rng.uniform(-4, 4, size=(200, 5))
    out = gru_step(p, rng.normal(size=(200, 3)) * 5, h)
    assert np.all(np.abs(out) <= np.maximum(np.max(np.abs(h), axis=1, keepdims=True), 1.0) + 1e-15)


def test_gru_trace_in_unit_box():
    model = init_random("gru", 2, D=8, T=300)
    assert np.all(np.abs(sequential_evaluate(model, 300)) <= 1.0)


def test_gru_pass_through_gate():
    p = scalar_params(b_z=-50.0)
    J = gru_jacobian(p, np.array([0.3]), np.array([0.2]))
    assert_allclose(J, [[1.0]], atol=1e-12)


def test_gru_params_validation():
    p = GruParams.random(np.random.default_rng(0), 3, 2)
    with pytest.raises(DimensionError):
        GruParams(p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, np.zeros((2, 2)), p.b_z, p.b_r, p.b_h)
    bad = p.b_h.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError):
        GruParams(p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, p.U_h, p.b_z, p.b_r, bad)


@pytest.mark.parametrize("kind", KINDS)
def test_jacobian_matches_finite_differences(kind):
    rng = np.random.default_rng(3)
    model = make(kind)
    for _ in range(10):
        k = int(rng.integers(0, 50))
        s = rng.normal(size=model.state_dim)
        J = model.jacobian(k, s)
        J_fd = fd_jacobian(model, k, s)
        assert np.max(np.abs(J - J_fd)) <= 1e-5 * max(1.0, np.max(np.abs(J_fd)))


@pytest.mark.parametrize("kind", KINDS)
def test_diag_matches_dense(kind):
    rng = np.random.default_rng(4)
    model = make(kind)
    prev = rng.normal(size=(50, model.state_dim))
    dense = model.jacobian_all(prev)
    diag = model.jacobian_diag_all(prev)
    assert_allclose(diag, np.diagonal(dense, axis1=1, axis2=2), atol=1e-12, rtol=0)
    assert_allclose(model.jacobian_diag(7, prev[7]), np.diag(model.jacobian(7, prev[7])),
                    atol=1e-12, rtol=0)


@pytest.mark.parametrize("kind", KINDS)
def test_batched_matches_single(kind):
    rng = np.random.default_rng(5)
    model = make(kind)
    prev = rng.normal(size=(10, model.state_dim))
    assert_allclose(model.step_all(prev, start=3),
                    np.stack([model.step(3 + k, p) for k, p in enumerate(prev)]), atol=1e-14)
    assert_allclose(model.jacobian_all(prev, start=3),
                    np.stack([model.jacobian(3 + k, p) for k, p in enumerate(prev)]), atol=1e-14)


def test_gru_diag_is_exact():
    rng = np.random.default_rng(6)
    p = GruParams.random(rng, 6, 2)
    x, h = rng.normal(size=(20, 2)), rng.normal(size=(20, 6))
    assert_allclose(gru_jacobian_diag(p, x, h), np.diagonal(gru_jacobian(p, x, h), axis1=1, axis2=2),
                    atol=1e-12, rtol=0)


def argru_loop(model, T):
    """Autoregressive generation written directly from the cell equations."""
    p = model.gru
    x, h = model.initial_state[0], model.initial_state[1:]
    out = []
    for t in range(T):
        z = expit(p.W_z[:, 0] * x + p.U_z @ h + p.b_z)
        r = expit(p.W_r[:, 0] * x + p.U_r @ h + p.b_r)
        cand = np.tanh(p.W_h[:, 0] * x + p.U_h @ (r * h) + p.b_h)
        h = (1 - z) * h + z * cand
        mean = model.w_mean @ h + model.b_mean
        var = softplus(model.w_var @ h + model.b_var)
        x = mean + np.sqrt(var) * model.noise[t]
        out.append(np.concatenate([[x], h]))
    return np.array(out)


def test_argru_matches_generation_loop():
    model = make("argru", T=100)
    trace = sequential_evaluate(model, 100)
    assert np.max(np.abs(trace - argru_loop(model, 100))) < 1e-12
    assert np.max(np.abs(residual(trace, model))) < 1e-12


def test_argru_zero_noise_gives_means():
    base = make("argru", T=20)
    model = ArGRUModel(base.gru, base.w_mean, base.b_mean, base.w_var, base.b_var, np.zeros(20))
    trace = sequential_evaluate(model, 20)
    mean, _ = model.readout(trace[:, 1:])
    assert_array_equal(trace[:, 0], mean)


def test_argru_variance_positive():
    model = make("argru")
    _, var = model.readout(np.random.default_rng(0).normal(scale=50, size=(100, 3)))
    assert np.all(var > 0)


def test_argru_rejects_vector_inputs():
    p = GruParams.random(np.random.default_rng(0), 3, 2)
    with pytest.raises(DimensionError):
        ArGRUModel(p, np.zeros(3), 0.0, np.zeros(3), 0.0, np.zeros(5))


def test_affine_identity_and_jacobian():
    model = init_random("affine", 0, D=3, rho=0.5)
    assert np.max(np.abs(np.linalg.eigvals(model.A))) == pytest.approx(0.5)
    assert_array_equal(model.jacobian(0, np.ones(3)), model.A)


def test_affine_growth_rate():
    model = init_random("affine", 1, D=3, rho=1.5)
    trace = sequential_evaluate(model, 200)
    ratio = np.linalg.norm(trace[199]) / np.linalg.norm(trace[99])
    assert ratio ** (1 / 100) == pytest.approx(1.5, rel=0.02)


def test_init_random_deterministic():
    a, b = make("gru", seed=5), make("gru", seed=5)
    s = np.random.default_rng(0).normal(size=4)
    assert_array_equal(a.step(3, s), b.step(3, s))
    c = make("gru", seed=6)
    assert not np.array_equal(a.params.U_h, c.params.U_h)


def test_init_random_errors():
    with pytest.raises(DimensionError):
        init_random("gru", 0, D=0, T=5)
    with pytest.raises(DimensionError):
        init_random("argru", 0, D=7, T=5)
    with pytest.raises(ValueError):
        init_random("lstm", 0, D=3, T=5)


def test_float32_models():
    model = init_random("gru", 0, D=4, T=10, dtype=np.float32)
    assert sequential_evaluate(model, 10).dtype == np.float32


@pytest.mark.parametrize("kind", KINDS)
def test_serialization_round_trip(kind, tmp_path):
    model = make(kind)
    path = tmp_path / "m.json"
    save_model(model, path)
    doc = json.loads(path.read_text())
    assert doc["schema_version"] == 1 and doc["kind"] == kind and doc["seed"] == 0
    back = load_model(path)
    assert_array_equal(sequential_evaluate(back, 50), sequential_evaluate(model, 50))


def test_model_from_dict_rejects_versions():
    doc = model_to_dict(make("affine"))
    doc["schema_version"] = 99
    with pytest.raises(ValueError):
        model_from_dict(doc)


def test_finite_difference_model():
    model = make("tanh")
    fd = FiniteDifferenceModel(model)
    s = np.full(4, 0.1)
    assert_allclose(fd.jacobian(0, s), model.jacobian(0, s), atol=1e-7)
    assert_allclose(fd.jacobian_diag(0, s), model.jacobian_diag(0, s), atol=1e-7)


def test_stiff_tanh_is_high_gain():
    model = stiff_tanh(0)
    assert model.gain == 5.0 and model.state_dim == 4


def test_noisy_sine_argru_tracks_a_sine():
    model = fit_noisy_sine_argru(0, 400)
    x = sequential_evaluate(model, 400)[:, 0]
    assert np.all(np.isfinite(x))
    # the generated signal oscillates with roughly the target amplitude
    assert 3.0 < np.std(x) < 15.0
