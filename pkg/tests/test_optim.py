"""Adam: trivial fixed points, the first-step sign rule, and a reference trace."""

import numpy as np
import pytest

from mtsad.errors import ShapeError
from mtsad.optim import adam_init, adam_step


def test_zero_gradient_leaves_parameters_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = adam_init(params)
    out, state = adam_step(state, params, {"w": np.zeros(3)})
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.step == 1


def test_first_step_is_signed_lr():
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    g = 0.37
    params = {"w": np.array([5.0])}
    state = adam_init(params, lr=1e-3)
    out, _ = adam_step(state, params, {"w": np.array([g])})
    expected = 5.0 - 1e-3 * g / (abs(g) + 1e-8)
    np.testing.assert_allclose(out["w"], [expected], rtol=0, atol=1e-15)


def test_five_step_quadratic_matches_reference_trace():
    # hand-rolled reference: the textbook update formulas, written straight-line
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    theta_ref = np.array([1.0, -2.0])
    m = np.zeros(2)
    v = np.zeros(2)
    trace = []
    for t in range(1, 6):
        g = 2.0 * theta_ref  # d/dtheta of sum(theta^2)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta_ref = theta_ref - lr * m_hat / (np.sqrt(v_hat) + eps)
        trace.append(theta_ref.copy())

    params = {"theta": np.array([1.0, -2.0])}
    state = adam_init(params, lr=lr)
    for t in range(5):
        grads = {"theta": 2.0 * params["theta"]}
        params, state = adam_step(state, params, grads)
        np.testing.assert_allclose(params["theta"], trace[t], rtol=0, atol=1e-12)


def test_second_moment_stays_nonnegative():
    params = {"w": np.array([0.5, -0.5])}
    state = adam_init(params)
    rng = np.random.default_rng(0)
    for _ in range(20):
        params, state = adam_step(state, params, {"w": rng.normal(size=2)})
        assert (state.v["w"] >= 0).all()
        assert state.m["w"].shape == params["w"].shape


def test_shape_mismatch_rejected():
    params = {"w": np.zeros(3)}
    state = adam_init(params)
    with pytest.raises(ShapeError):
        adam_step(state, params, {"w": np.zeros(4)})
    with pytest.raises(ShapeError):
        adam_step(state, params, {})


def test_warmup_override_changes_only_this_step():
    params = {"w": np.array([1.0])}
    state = adam_init(params, lr=1e-3)
    out, state = adam_step(state, params, {"w": np.array([1.0])}, lr=0.0)
    np.testing.assert_array_equal(out["w"], params["w"])
    assert state.lr == 1e-3
