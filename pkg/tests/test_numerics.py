import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smlrec.errors import ContractError
from smlrec.numerics import (NonFiniteEvaluation, OptimizerState, ParamOptimizer, finite_diff_check, gelu,
                             gelu_grad, log_sigmoid, optimizer_step, rng_stream, sigmoid)

# 1 * Phi(1), evaluated with mpmath at 40 digits
GELU_AT_1 = 0.8413447460685429


def test_gelu_fixed_points():
    assert gelu(0.0) == 0.0
    assert gelu(1.0) == pytest.approx(GELU_AT_1, abs=1e-15)
    for x in (6.0, 7.5, 20.0):
        assert abs(gelu(x) - x) < 1e-6


def test_gelu_grad_values():
    assert gelu_grad(0.0) == 0.5
    assert abs(gelu_grad(-30.0)) < 1e-12
    h = 1e-5
    fd = (gelu(1 + h) - gelu(1 - h)) / (2 * h)
    assert gelu_grad(1.0) == pytest.approx(fd, abs=1e-6)


def test_gelu_grad_matches_central_difference_on_grid():
    x = np.linspace(-8, 8, 1000)
    h = 1e-5
    fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
    a = gelu_grad(x)
    rel = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
    assert rel.max() <= 1e-6


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    with np.errstate(over="raise"):
        assert sigmoid(40.0) == 1.0
        assert 0.0 < sigmoid(-700.0) < 1e-300
    assert log_sigmoid(0.0) == pytest.approx(-np.log(2.0))
    assert np.isfinite(log_sigmoid(-1000.0))


@given(st.floats(-30, 30))
def test_sigmoid_symmetry(x):
    assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-12


def test_sgd_step():
    st_ = OptimizerState("sgd", 0.1)
    assert optimizer_step(np.array(1.0), np.array(2.0), st_) == pytest.approx(0.8)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_is_identity(kind):
    p = np.array([[1.5, -2.0], [0.0, 3.0]])
    st_ = OptimizerState(kind, 0.01)
    out = optimizer_step(p, np.zeros_like(p), st_)
    assert np.array_equal(out, p)
    assert st_.step == 1


def test_adam_first_step_hand_computed():
    lr, g = 0.05, -0.3
    st_ = OptimizerState("adam", lr)
    out = optimizer_step(np.array([0.0]), np.array([g]), st_)
    # m = 0.1 g, v = 0.001 g^2; bias correction gives m_hat = g, v_hat = g^2
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    expected = -lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert out[0] == pytest.approx(expected, rel=1e-12)
    assert out[0] == pytest.approx(-lr * np.sign(g), rel=1e-6)


def test_optimizer_shape_mismatch():
    with pytest.raises(ContractError):
        optimizer_step(np.zeros(3), np.zeros(4), OptimizerState("adam", 0.1))


def test_param_optimizer_grow_pads_moments():
    opt = ParamOptimizer("adam", 0.1)
    params = {"P": np.ones((2, 3))}
    opt.step(params, {"P": np.ones((2, 3))})
    opt.grow("P", 4)
    assert opt.states["P"].m.shape == (4, 3)
    assert np.all(opt.states["P"].m[2:] == 0)


def test_rng_stream_replays_bitwise():
    a = rng_stream(7, "candidates/3").random(50)
    b = rng_stream(7, "candidates/3").random(50)
    c = rng_stream(7, "candidates/4").random(50)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_fd_check_simple_cases():
    rep = finite_diff_check(lambda w: float(w @ w), np.array([3.0]), np.array([6.0]))
    assert rep.passed and rep.max_rel_error <= 1e-7
    for h in (1e-6, 1e-4, 1e-3):
        assert finite_diff_check(lambda w: float(np.sum(w)), np.ones((2, 3)), np.ones((2, 3)), h=h).passed


def test_fd_check_rejects_bad_step_and_nonfinite():
    with pytest.raises(ContractError):
        finite_diff_check(lambda w: 0.0, np.zeros(1), np.zeros(1), h=1e-2)
    def blows_up(w):
        return float("inf") if w[1] == 0 else 1.0 / w[1]

    with pytest.raises(NonFiniteEvaluation) as e:
        finite_diff_check(blows_up, np.array([1.0, 0.0]), np.zeros(2), h=1e-4)
    assert e.value.index == (0,)


def test_fd_check_detects_wrong_gradient():
    rep = finite_diff_check(lambda w: float(w @ w), np.array([1.0, 2.0]), np.array([2.0, 4.1]), tol=1e-5)
    assert not rep.passed
    assert rep.worst_index == (1,)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_fd_check_on_quadratics(xs):
    x = np.array(xs)
    A = np.diag(np.arange(1.0, len(xs) + 1))
    rep = finite_diff_check(lambda w: float(w @ A @ w), x, 2 * A @ x, h=1e-4, tol=1e-5)
    assert rep.passed
