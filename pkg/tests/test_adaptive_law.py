import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmrac.adaptive_law import (
    OuterWeights,
    adaptation_direction,
    adaptive_term,
    clamp,
    make_gains,
    outer_step,
    project,
    raw_update_direction,
    total_control,
    tracking_error,
    weight_rate,
)
from dmrac.errors import DimensionMismatch, NotPositiveDefinite
from dmrac.numerics import make_rng
from dmrac.plant import PlantModel, Term, UncertaintySpec, build_matched_pair, eval_uncertainty, plant_derivative

A2 = np.array([[0.0, 1.0], [0.0, 0.0]])
B2 = np.array([[0.0], [1.0]])
K2 = np.array([[16.0, 4.0]])
KR2 = np.array([[16.0]])


def scalar_gains(gamma=0.5, P=2.0):
    # 1-state stand-in whose Lyapunov solution is P: A_rm = -1, Q = 2P
    return make_gains([[-1.0]], [[0.0]], [[1.0]], gamma * np.eye(2), [[2.0 * P]])


def test_tracking_error():
    assert np.array_equal(tracking_error([1.0, 2.0], [1.0, 2.0]), [0.0, 0.0])
    assert np.array_equal(tracking_error([1.0, 2.0], [0.5, 2.0]), [0.5, 0.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3), st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_tracking_error_antisymmetric(a, b):
    assert np.array_equal(tracking_error(a, b), -tracking_error(b, a))


def test_adaptive_term():
    assert np.array_equal(adaptive_term(OuterWeights(np.zeros((2, 1))), [3.0, 1.0]), [0.0])
    assert np.array_equal(adaptive_term(OuterWeights([[1.0], [-2.0]]), [3.0, 1.0]), [1.0])


@given(
    a=st.floats(-10, 10), b=st.floats(-10, 10),
    p1=st.lists(st.floats(-10, 10), min_size=2, max_size=2),
    p2=st.lists(st.floats(-10, 10), min_size=2, max_size=2),
)
def test_adaptive_term_linear(a, b, p1, p2):
    W = OuterWeights([[1.5], [-0.5]])
    lhs = adaptive_term(W, a * np.array(p1) + b * np.array(p2))
    rhs = a * adaptive_term(W, p1) + b * adaptive_term(W, p2)
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_adaptive_term_dimension():
    with pytest.raises(DimensionMismatch):
        adaptive_term(OuterWeights(np.zeros((2, 1))), [1.0, 2.0, 3.0])


def test_total_control():
    gains = make_gains([[-1.0, 0.0], [0.0, -1.0]], [[1.0, 2.0]], [[1.0]], np.eye(1), np.eye(2))
    assert np.array_equal(total_control(gains, [0.0, 0.0], [0.0], [0.0]), [0.0])
    assert np.array_equal(total_control(gains, [1.0, 1.0], [2.0], [0.5]), [-1.5])


def test_matched_cancellation():
    rng = make_rng(0)
    delta = UncertaintySpec(
        "polynomial-trig",
        terms=((Term("mono", 0.5), Term("mono", 1.0, (1,)), Term("sin", 1.0, index=0, freq=2.0)),),
    )
    plant = PlantModel(A2, B2, delta)
    ref = build_matched_pair(A2, B2, K2, KR2)
    gains = make_gains(ref.A_rm, K2, KR2, np.eye(3), np.eye(2))
    for _ in range(50):
        x, r = rng.normal(size=2), rng.normal(size=1)
        u = total_control(gains, x, r, eval_uncertainty(delta, x))
        assert np.allclose(plant_derivative(plant, x, u), ref.A_rm @ x + ref.B_rm @ r, rtol=0, atol=1e-12)


def test_make_gains_rejects_indefinite_gamma():
    with pytest.raises(NotPositiveDefinite):
        make_gains([[-1.0]], [[0.0]], [[1.0]], -np.eye(2), [[1.0]])


def test_scalar_gains_p():
    assert scalar_gains().P[0, 0] == pytest.approx(2.0, abs=1e-15)


# ------------------------------------------------------------- directions


def test_raw_direction_zero_error():
    assert np.array_equal(raw_update_direction([1.0, 2.0], [0.0], np.array([[2.0]]), np.array([[1.0]])), np.zeros((2, 1)))


def test_raw_direction_scalar():
    Y = raw_update_direction([1.0, 2.0], [0.5], np.array([[2.0]]), np.array([[1.0]]))
    assert np.array_equal(Y, [[1.0], [2.0]])


@given(st.floats(-100, 100))
def test_raw_direction_linear_in_error(c):
    P, B = np.array([[2.0, 0.3], [0.3, 1.0]]), B2
    e = np.array([0.4, -1.1])
    Y1 = raw_update_direction([1.0, -2.0, 0.5], c * e, P, B)
    Y2 = c * raw_update_direction([1.0, -2.0, 0.5], e, P, B)
    assert np.allclose(Y1, Y2, rtol=1e-12, atol=1e-12)


def test_adaptation_direction_is_descent():
    Y = adaptation_direction([1.0, 2.0], [0.5], np.array([[2.0]]), np.array([[1.0]]))
    assert np.array_equal(Y, [[-2.0], [-4.0]])


def test_lyapunov_cross_term_cancels():
    # d/dt of e^T P e + tr(W~^T Gamma^-1 W~)/2 along e' = A_rm e - B W~^T Phi
    # must reduce to -e^T Q e for the implemented weight rate.
    rng = make_rng(1)
    ref = build_matched_pair(A2, B2, K2, KR2)
    Q = np.diag([3.0, 1.0])
    for _ in range(20):
        G = rng.normal(size=(3, 3))
        gains = make_gains(ref.A_rm, K2, KR2, G @ G.T + np.eye(3), Q)
        W_star, W = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
        e, phi = rng.normal(size=2), rng.normal(size=3)
        Wt = W_star - W
        e_dot = ref.A_rm @ e - B2 @ (Wt.T @ phi)
        W_dot = weight_rate(W, phi, e, gains, B2, float("inf"), 0.1)
        v_dot = 2 * e @ gains.P @ e_dot - np.sum(Wt * np.linalg.solve(gains.Gamma, W_dot))
        assert v_dot == pytest.approx(-e @ Q @ e, rel=1e-9, abs=1e-9)


# ------------------------------------------------------------- projection


def test_projection_interior_passthrough():
    w = OuterWeights([[0.1], [0.2]], bound=1.0)
    Y = np.array([[5.0], [-3.0]])
    assert np.array_equal(project(w, Y), Y)


def test_projection_outward_on_shell():
    bound, eps = 1.0, 0.1
    W = np.array([[0.6], [0.8]]) * bound * np.sqrt(1 + eps)
    w = OuterWeights(W, bound, eps)
    out = project(w, 2.5 * W)
    assert abs(np.sum(W * out)) <= 1e-12


def test_projection_inward_on_shell():
    W = np.array([[0.6], [0.8]]) * np.sqrt(1.1)
    w = OuterWeights(W, 1.0, 0.1)
    Y = -W + np.array([[0.8], [-0.6]])
    assert np.array_equal(project(w, Y), Y)


def test_projection_partial_scaling():
    # halfway into the boundary layer the outward component is halved
    bound, eps = 1.0, 0.1
    W = np.array([[np.sqrt(1 + eps / 2)], [0.0]])
    out = project(OuterWeights(W, bound, eps), np.array([[1.0], [1.0]]))
    assert out == pytest.approx(np.array([[0.5], [1.0]]), abs=1e-12)


def test_projection_disabled():
    w = OuterWeights([[100.0]], bound=float("inf"))
    assert np.array_equal(project(w, np.array([[1.0]])), [[1.0]])


def test_projection_dimension():
    with pytest.raises(DimensionMismatch):
        project(OuterWeights(np.zeros((2, 1)), 1.0), np.zeros((3, 1)))


def test_clamp():
    assert np.array_equal(clamp(np.array([[3.0], [4.0]]), 1.0, 0.44), np.array([[3.0], [4.0]]) * (1.2 / 5.0))
    assert np.array_equal(clamp(np.array([[0.3]]), 1.0, 0.1), [[0.3]])


# ------------------------------------------------------------- outer step


def test_outer_step_zero_error():
    w = OuterWeights([[0.3], [-0.2]], 10.0)
    out = outer_step(w, [1.0, 2.0], [0.0], scalar_gains(), np.array([[1.0]]), 0.05)
    assert np.array_equal(out.W, w.W)


def test_outer_step_scalar_example():
    # descent law: W += dt * Gamma * (-2) * Phi (e P B) = -0.05 * [1; 2]
    w = OuterWeights(np.zeros((2, 1)), 10.0)
    out = outer_step(w, [1.0, 2.0], [0.5], scalar_gains(0.5, 2.0), np.array([[1.0]]), 0.05)
    assert np.allclose(out.W, [[-0.05], [-0.1]], rtol=0, atol=1e-15)


def test_outer_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        outer_step(OuterWeights(np.zeros((2, 1))), [1.0, 2.0], [0.5], scalar_gains(), np.array([[1.0]]), 0.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bound=st.floats(0.05, 20.0), eps=st.floats(0.01, 1.0),
       scale=st.floats(0.01, 1e3))
def test_projection_never_exceeds_bound(seed, bound, eps, scale):
    rng = make_rng(seed)
    ref = build_matched_pair(A2, B2, K2, KR2)
    gains = make_gains(ref.A_rm, K2, KR2, rng.uniform(0.1, 50.0) * np.eye(4), np.eye(2))
    w = OuterWeights(np.zeros((4, 1)), bound, eps)
    for _ in range(100):
        w = outer_step(w, rng.normal(scale=scale, size=4), rng.normal(scale=scale, size=2), gains, B2,
                       rng.uniform(1e-4, 1.0))
        assert w.norm <= bound * (1 + eps)
