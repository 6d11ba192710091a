"""Transverse coordinates of the augmented robot and the terminal feedback laws.

The map ``Phi`` sends ``(x, z)`` to ``(xi, eta)`` with

    xi1 = q - p(theta),   xi2 = qdot - p'(theta) thetadot,   eta = z.

The arm has vector relative degree (2, 2) with respect to ``y = q`` and
therefore no internal dynamics, so ``eta`` is exactly the timing-law state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    PathSpec,
    RobotParams,
    _coriolis_times_qdot,
    gravity,
    inertia,
    solve_inertia,
)

RELATIVE_DEGREE = (2, 2)
TIMING_LAW_ORDER = max(RELATIVE_DEGREE)
RHO = sum(RELATIVE_DEGREE)

# xi block: xi_dot = A_XI xi + B_XI alpha
A_XI = np.block([[np.zeros((2, 2)), np.eye(2)], [np.zeros((2, 2)), np.zeros((2, 2))]])
B_XI = np.vstack([np.zeros((2, 2)), np.eye(2)])


@dataclass
class TransverseCoords:
    xi1: np.ndarray
    xi2: np.ndarray
    eta: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.xi1, self.xi2, self.eta], axis=-1)

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.xi1, self.xi2], axis=-1)

    @classmethod
    def from_array(cls, c) -> "TransverseCoords":
        c = np.asarray(c, dtype=float)
        return cls(c[..., 0:2], c[..., 2:4], c[..., 4:6])


@dataclass(frozen=True)
class EtaGain:
    """Linear feedback ``v = k1 eta1 + k2 eta2`` for the timing law.

    The constructor enforces k1, k2 < 0, k2^2 > -4 k1 (real eigenvalues) and,
    when ``theta0`` and ``thetadot_bar`` are supplied, k2 <= -k1 theta0 / thetadot_bar.
    """

    k1: float
    k2: float
    theta0: float | None = None
    thetadot_bar: float | None = None

    def __post_init__(self):
        if not (self.k1 < 0 and self.k2 < 0):
            raise ValueError("EtaGain requires k1 < 0 and k2 < 0")
        if not self.k2**2 > -4.0 * self.k1:
            raise ValueError("EtaGain requires k2^2 > -4 k1 (no oscillation)")
        if self.theta0 is not None and self.thetadot_bar is not None:
            limit = -self.k1 * self.theta0 / self.thetadot_bar
            if not self.k2 <= limit:
                raise ValueError(
                    f"EtaGain requires k2 <= -k1*theta0/thetadot_bar = {limit:.6g}"
                )

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.k1, self.k2])

    @property
    def closed_loop(self) -> np.ndarray:
        return np.array([[0.0, 1.0], [self.k1, self.k2]])

    def eigenvalues(self) -> np.ndarray:
        """Closed-loop eigenvalues, slow first."""
        disc = np.sqrt(self.k2**2 + 4.0 * self.k1)
        return np.array([(self.k2 + disc) / 2.0, (self.k2 - disc) / 2.0])


@dataclass(frozen=True)
class XiGain:
    """Stabilizing gain for the transverse block, ``xi_ddot = -K xi``, with Lyapunov matrix."""

    K: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if K.shape != (2, 4) or P.shape != (4, 4):
            raise ValueError("XiGain expects K (2x4) and P (4x4)")
        if np.max(np.abs(P - P.T)) > 1e-9 or np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("P must be symmetric positive definite")
        if np.linalg.eigvals(self.closed_loop_matrix(K)).real.max() >= 0:
            raise ValueError("A_xi - B_xi K is not Hurwitz")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "P", P)

    @staticmethod
    def closed_loop_matrix(K) -> np.ndarray:
        return A_XI - B_XI @ np.asarray(K)

    @property
    def closed_loop(self) -> np.ndarray:
        return self.closed_loop_matrix(self.K)


def to_transverse(s, path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Map augmented states ``(..., 6)`` to ``(xi1, xi2, eta)``."""
    s = np.asarray(s, dtype=float)
    theta, thetadot = s[..., 4], s[..., 5]
    xi1 = s[..., 0:2] - path.value(theta)
    xi2 = s[..., 2:4] - path.deriv1(theta) * thetadot[..., None]
    return np.concatenate([xi1, xi2, s[..., 4:6]], axis=-1)


def from_transverse(c, path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    eta1, eta2 = c[..., 4], c[..., 5]
    q = c[..., 0:2] + path.value(eta1)
    qd = c[..., 2:4] + path.deriv1(eta1) * eta2[..., None]
    return np.concatenate([q, qd, c[..., 4:6]], axis=-1)


def _x_of(c, path):
    eta1, eta2 = c[..., 4], c[..., 5]
    q = c[..., 0:2] + path.value(eta1)
    qd = c[..., 2:4] + path.deriv1(eta1) * eta2[..., None]
    return q, qd


def path_acceleration(eta, v, path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """``d^2/dt^2 p(theta(t)) = p''(theta) thetadot^2 + p'(theta) v``."""
    eta = np.asarray(eta, dtype=float)
    v = np.asarray(v, dtype=float)
    return (path.deriv2(eta[..., 0]) * (eta[..., 1] ** 2)[..., None]
            + path.deriv1(eta[..., 0]) * v[..., None])


def transverse_rhs(c, u, v, params: RobotParams = DEFAULT_PARAMS,
                   path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Vector field of the transverse normal form, ``(xi2, alpha, eta2, v)``."""
    c = np.asarray(c, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    q, qd = _x_of(c, path)
    acc = solve_inertia(q, u - _coriolis_times_qdot(q, qd, params) - gravity(q, params), params)
    alpha = acc - path_acceleration(c[..., 4:6], v, path)
    eta_dot = np.stack([c[..., 5], np.broadcast_to(v, c[..., 5].shape)], axis=-1)
    return np.concatenate([c[..., 2:4], alpha, eta_dot], axis=-1)


def feedforward_torque(s, v, params: RobotParams = DEFAULT_PARAMS,
                       path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Torque giving ``qddot = d^2/dt^2 p(theta)`` at augmented state ``s`` under ``v``.

    On the path manifold this is exactly the input that keeps ``e`` at zero.
    """
    s = np.asarray(s, dtype=float)
    q, qd = s[..., 0:2], s[..., 2:4]
    acc = path_acceleration(s[..., 4:6], v, path)
    return (_coriolis_times_qdot(q, qd, params) + gravity(q, params)
            + np.einsum("...ij,...j->...i", inertia(q, params), acc))


def terminal_v(eta, gain: EtaGain) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    return gain.k1 * eta[..., 0] + gain.k2 * eta[..., 1]


def terminal_u(c, xi_gain: XiGain, eta_gain: EtaGain | None,
               params: RobotParams = DEFAULT_PARAMS,
               path: PathSpec = DEFAULT_PATH, v=None) -> np.ndarray:
    """Feedback-linearizing torque that renders ``xi_dot = (A - B K) xi``.

    The path feedforward ``p''(eta1) eta2^2 + p'(eta1) v`` is evaluated with the
    companion timing-law feedback ``v = terminal_v(eta)`` unless ``v`` is given.
    """
    c = np.asarray(c, dtype=float)
    q, qd = _x_of(c, path)
    xi = c[..., 0:4]
    if v is None:
        v = terminal_v(c[..., 4:6], eta_gain)
    desired = -xi @ xi_gain.K.T + path_acceleration(c[..., 4:6], v, path)
    Bq = inertia(q, params)
    return (_coriolis_times_qdot(q, qd, params) + gravity(q, params)
            + np.einsum("...ij,...j->...i", Bq, desired))


def terminal_controls(s, xi_gain: XiGain, eta_gain: EtaGain,
                      params: RobotParams = DEFAULT_PARAMS,
                      path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Terminal control pair ``(u_E, v_E)`` as a function of the augmented state."""
    c = to_transverse(s, path)
    u = terminal_u(c, xi_gain, eta_gain, params, path)
    v = terminal_v(c[..., 4:6], eta_gain)
    return np.concatenate([u, np.asarray(v)[..., None]], axis=-1)
