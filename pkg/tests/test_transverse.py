import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpfc.checks import check_phi_roundtrip, check_vector_field, random_states
from mpfc.dynamics import DEFAULT_PATH, augmented_rhs, gravity
from mpfc.terminal_set import solve_care
from mpfc.transverse import (
    EtaGain,
    TransverseCoords,
    XiGain,
    from_transverse,
    feedforward_torque,
    terminal_controls,
    terminal_u,
    terminal_v,
    to_transverse,
    transverse_rhs,
)

GAIN = EtaGain(-0.1, -1.33)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip(seed):
    s = random_states(np.random.default_rng(seed), 5)
    assert np.abs(from_transverse(to_transverse(s)) - s).max() < 1e-12


def test_coords_container():
    c = TransverseCoords.from_array(np.arange(6.0))
    assert np.array_equal(c.xi, [0, 1, 2, 3]) and np.array_equal(c.eta, [4, 5])
    assert np.array_equal(c.as_array(), np.arange(6.0))


def test_hygiene_checks_pass():
    assert check_phi_roundtrip().passed
    assert check_vector_field().passed


def test_eta_gain_eigen_data():
    # roots of l^2 + 1.33 l + 0.1
    disc = np.sqrt(1.33**2 - 0.4)
    slow, fast = GAIN.eigenvalues()
    assert slow == pytest.approx((-1.33 + disc) / 2) and fast == pytest.approx((-1.33 - disc) / 2)
    assert np.sort(np.linalg.eigvals(GAIN.closed_loop).real) == pytest.approx([fast, slow])


def test_eta_gain_conditions():
    with pytest.raises(ValueError):
        EtaGain(0.1, -1.0)
    with pytest.raises(ValueError):
        EtaGain(-1.0, -1.0)  # complex pair
    with pytest.raises(ValueError):
        EtaGain(-0.1, -1.0, theta0=-5.3, thetadot_bar=0.4)  # too weak damping
    EtaGain(-0.1, -1.33, theta0=-5.3, thetadot_bar=0.4)


def test_xi_gain_rejects_unstable_gain():
    with pytest.raises(ValueError):
        XiGain(np.zeros((2, 4)), np.eye(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_terminal_torque_linearizes_xi_block(seed):
    xi_gain = solve_care()
    s = random_states(np.random.default_rng(seed), 8)
    c = to_transverse(s)
    u = terminal_u(c, xi_gain, GAIN)
    v = terminal_v(c[:, 4:6], GAIN)
    rhs = transverse_rhs(c, u, v)
    assert rhs[:, 0:4] == pytest.approx(c[:, 0:4] @ xi_gain.closed_loop.T, abs=1e-8)
    assert rhs[:, 5] == pytest.approx(-0.1 * c[:, 4] - 1.33 * c[:, 5])


def test_terminal_controls_hold_path_end():
    s = np.concatenate([DEFAULT_PATH.value(0.0), np.zeros(4)])
    w = terminal_controls(s, solve_care(), GAIN)
    assert w[0:2] == pytest.approx(gravity(s[0:2])) and w[2] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5.2, 0.0), st.floats(-1.0, 1.0), st.floats(-5.0, 5.0))
def test_feedforward_torque_keeps_motion_on_path(theta, thetadot, v):
    path = DEFAULT_PATH
    q = path.value(theta)
    qd = path.deriv1(theta) * thetadot
    s = np.concatenate([q, qd, [theta, thetadot]])
    w = np.concatenate([feedforward_torque(s, v), [v]])
    qdd = augmented_rhs(s, w)[2:4]
    expected = path.deriv2(theta) * thetadot**2 + path.deriv1(theta) * v
    np.testing.assert_allclose(qdd, expected, atol=1e-9)
