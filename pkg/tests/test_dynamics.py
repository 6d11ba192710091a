import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpfc.dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    AugmentedState,
    ConstraintSet,
    DynamicsError,
    PathParamState,
    PathSpec,
    RobotParams,
    RobotState,
    advance_timing_law,
    augmented_rhs,
    cartesian_output,
    coriolis,
    gravity,
    inertia,
    integrate,
    path_error,
    path_error_rate,
    rk4_step,
    robot_rhs,
)

angles = st.floats(-np.pi, np.pi)
speeds = st.floats(-4.7, 4.7)


def test_params_reject_wrong_signs():
    with pytest.raises(ValueError):
        RobotParams(c1=25.0)
    with pytest.raises(ValueError):
        RobotParams(b5=0.0)


def test_inertia_positive_definite_on_grid():
    q2 = np.linspace(-np.pi, np.pi, 2001)
    q = np.stack([np.zeros_like(q2), q2], -1)
    B = inertia(q)
    assert np.allclose(B, np.swapaxes(B, -1, -2))
    assert np.linalg.eigvalsh(B).min() > 0


def test_gravity_at_zero_configuration():
    # g1 + g2 and g2 from the parameter table
    g = gravity(np.zeros(2))
    assert g == pytest.approx([1030.1, 245.3])
    assert np.linalg.norm(g) == pytest.approx(1058.9, abs=0.05)


def test_cartesian_output_stretched_arm():
    assert cartesian_output(np.zeros(2)) == pytest.approx([1.0, 0.0])
    assert cartesian_output(np.array([np.pi / 2, 0.0])) == pytest.approx([0.0, 1.0], abs=1e-15)


def test_coriolis_hand_value():
    # q2 = pi/2, qdot = (1, 2): 25 * [[1, 3], [-1, 0]] @ (1, 2)
    q, qd = np.array([0.3, np.pi / 2]), np.array([1.0, 2.0])
    assert coriolis(q, qd) @ qd == pytest.approx([175.0, -25.0])


def test_coriolis_vanishes_with_straight_elbow():
    assert np.abs(coriolis(np.array([0.7, 0.0]), np.array([3.0, -2.0]))).max() == 0.0


@settings(max_examples=30, deadline=None)
@given(angles, angles, speeds, speeds, st.floats(-3000, 3000), st.floats(-3000, 3000))
def test_robot_rhs_matches_matrix_form(q1, q2, d1, d2, u1, u2):
    q, qd, u = np.array([q1, q2]), np.array([d1, d2]), np.array([u1, u2])
    acc = np.linalg.solve(inertia(q), u - coriolis(q, qd) @ qd - gravity(q))
    assert robot_rhs(np.concatenate([q, qd]), u)[2:] == pytest.approx(acc, rel=1e-9, abs=1e-9)


def test_singular_inertia_raises():
    p = RobotParams(b1=1.0, b2=0.1, b3=1.0, b4=0.1, b5=1.0)
    with pytest.raises(DynamicsError):
        robot_rhs(np.zeros(4), np.zeros(2), p)


def test_rhs_broadcasts_over_leading_axes(rng):
    s = rng.normal(size=(3, 4, 6))
    w = rng.normal(size=(3, 4, 3))
    out = augmented_rhs(s, w)
    assert out.shape == (3, 4, 6)
    assert out[1, 2] == pytest.approx(augmented_rhs(s[1, 2], w[1, 2]))


@settings(max_examples=40, deadline=None)
@given(st.floats(-5.3, 0.0))
def test_path_derivatives_match_finite_differences(theta):
    h = 1e-5
    d1 = (DEFAULT_PATH.value(theta + h) - DEFAULT_PATH.value(theta - h)) / (2 * h)
    d2 = (DEFAULT_PATH.deriv1(theta + h) - DEFAULT_PATH.deriv1(theta - h)) / (2 * h)
    assert DEFAULT_PATH.deriv1(theta) == pytest.approx(d1, abs=1e-7)
    assert DEFAULT_PATH.deriv2(theta) == pytest.approx(d2, abs=1e-7)


def test_path_is_regular_and_validated():
    assert DEFAULT_PATH.is_regular()
    with pytest.raises(ValueError):
        PathSpec(theta0=1.0, theta1=0.0)


def test_path_error_vanishes_on_the_path():
    th = np.linspace(-5.3, 0, 7)
    q = DEFAULT_PATH.value(th)
    qd = DEFAULT_PATH.deriv1(th) * 0.3
    s = np.hstack([q, qd, th[:, None], np.full((7, 1), 0.3)])
    assert np.abs(path_error(s)).max() == 0.0
    assert np.abs(path_error_rate(s)).max() < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 0), st.floats(0, 2), st.floats(-10, 10), st.floats(1e-4, 0.1))
def test_timing_law_closed_form(theta, thetadot, v, dt):
    z = np.array([theta, thetadot])
    exact = advance_timing_law(z, v, dt)
    assert exact == pytest.approx([theta + thetadot * dt + v * dt**2 / 2, thetadot + v * dt])
    s = np.concatenate([DEFAULT_PATH.value(0.0), [0.0, 0.0], z])
    w = np.concatenate([gravity(DEFAULT_PATH.value(0.0)), [v]])
    assert rk4_step(augmented_rhs, s, w, dt)[4:] == pytest.approx(exact, abs=1e-12)


def test_integrate_piecewise_controls_and_grid_check():
    s0 = np.concatenate([DEFAULT_PATH.value(0.0), [0.0, 0.0, 0.0, 0.0]])
    hold = np.concatenate([gravity(s0[0:2]), [0.0]])
    traj = integrate(augmented_rhs, s0, np.stack([hold, hold]), 0.0, 0.1, 0.01,
                     breakpoints=[0.0, 0.05, 0.1])
    assert traj.states.shape == (11, 6)
    assert np.abs(traj.final - s0).max() < 1e-12
    with pytest.raises(ValueError):
        integrate(augmented_rhs, s0, hold, 0.0, 0.105, 0.01)


def test_state_containers():
    with pytest.raises(ValueError):
        RobotState([np.nan, 0.0], [0.0, 0.0])
    s = np.arange(6.0)
    a = AugmentedState.from_array(s)
    assert isinstance(a.z, PathParamState)
    assert np.array_equal(a.as_array(), s)


def test_constraint_set_modes():
    c = ConstraintSet()
    assert c.u_max == 4000 and c.qdot_max == pytest.approx(1.5 * np.pi)
    assert c.constrain_z and not c.with_mode("velocity").constrain_z
    assert ConstraintSet.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        ConstraintSet(mode="other")
