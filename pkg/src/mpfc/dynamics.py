"""Robot and timing-law vector fields, the reference path and a fixed-step integrator.

State layout used throughout the package (last axis of every array):

    augmented state  s = (q1, q2, qd1, qd2, theta, thetadot)
    augmented input  w = (u1, u2, v)

All vector-field functions broadcast over leading axes, so a batch of states
with shape ``(n, 6)`` can be propagated in one call.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

NX = 4  # robot state dimension
NZ = 2  # timing-law state dimension
NS = NX + NZ
NU = 2
NW = NU + 1

DET_TOL = 1e-9


class DynamicsError(RuntimeError):
    """Raised for singular inertia matrices."""


class IntegrationError(RuntimeError):
    """Raised when the integrator hits a non-finite state."""

    def __init__(self, t: float, message: str = "non-finite state"):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class RobotParams:
    """Parameters of the planar two-link arm (defaults: Siciliano et al.)."""

    b1: float = 200.0
    b2: float = 50.0
    b3: float = 23.5
    b4: float = 25.0
    b5: float = 122.5
    c1: float = -25.0
    g1: float = 784.8
    g2: float = 245.3
    l1: float = 0.5
    l2: float = 0.5

    def __post_init__(self):
        positive = ("b1", "b2", "b3", "b4", "b5", "g1", "g2", "l1", "l2")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"RobotParams.{name} must be positive")
        if not self.c1 < 0:
            raise ValueError("RobotParams.c1 must be negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RobotParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class RobotState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise ValueError("RobotState entries must be finite")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])


@dataclass
class PathParamState:
    theta: float
    thetadot: float

    def __post_init__(self):
        if not (np.isfinite(self.theta) and np.isfinite(self.thetadot)):
            raise ValueError("PathParamState entries must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.thetadot], dtype=float)


@dataclass
class AugmentedState:
    x: RobotState
    z: PathParamState

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x.as_array(), self.z.as_array()])

    @classmethod
    def from_array(cls, s) -> "AugmentedState":
        s = np.asarray(s, dtype=float)
        return cls(RobotState(s[0:2], s[2:4]), PathParamState(float(s[4]), float(s[5])))


@dataclass(frozen=True)
class PathSpec:
    """Joint-space reference path ``p(theta) = (theta - pi/3, w1 sin(w2 (theta - pi/3)))``."""

    theta0: float = -5.3
    theta1: float = 0.0
    omega1: float = 5.0
    omega2: float = 0.6

    def __post_init__(self):
        if not self.theta0 < self.theta1:
            raise ValueError("PathSpec requires theta0 < theta1")

    def value(self, theta):
        a = np.asarray(theta, dtype=float) - np.pi / 3
        return np.stack([a, self.omega1 * np.sin(self.omega2 * a)], axis=-1)

    def deriv1(self, theta):
        a = np.asarray(theta, dtype=float) - np.pi / 3
        return np.stack(
            [np.ones_like(a), self.omega1 * self.omega2 * np.cos(self.omega2 * a)], axis=-1
        )

    def deriv2(self, theta):
        a = np.asarray(theta, dtype=float) - np.pi / 3
        return np.stack(
            [np.zeros_like(a), -self.omega1 * self.omega2**2 * np.sin(self.omega2 * a)],
            axis=-1,
        )

    def is_regular(self, n: int = 10_000) -> bool:
        th = np.linspace(self.theta0, self.theta1, n)
        return bool(np.all(np.linalg.norm(self.deriv1(th), axis=-1) > 0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PathSpec":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class ConstraintSet:
    """Input/state boxes and the path-parameter set.

    ``mode == "path"`` selects Z = [theta0, theta1] x [0, inf); ``"velocity"``
    drops the path-parameter constraint entirely.
    """

    u_max: float = 4000.0
    qdot_max: float = 1.5 * np.pi
    v_min: float = -50.0
    v_max: float = 50.0
    mode: str = "path"

    def __post_init__(self):
        if not (self.u_max > 0 and self.qdot_max > 0):
            raise ValueError("u_max and qdot_max must be positive")
        if not (self.v_min < 0 < self.v_max):
            raise ValueError("virtual input set must contain 0 in its interior")
        if self.mode not in ("path", "velocity"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def constrain_z(self) -> bool:
        return self.mode == "path"

    def with_mode(self, mode: str) -> "ConstraintSet":
        return ConstraintSet(self.u_max, self.qdot_max, self.v_min, self.v_max, mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSet":
        d = dict(d)
        mode = d.pop("mode", "path")
        return cls(**{k: float(v) for k, v in d.items()}, mode=mode)


DEFAULT_PARAMS = RobotParams()
DEFAULT_PATH = PathSpec()


# --------------------------------------------------------------------------
# robot model terms

def inertia(q, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    c2 = np.cos(q[..., 1])
    b11 = params.b1 + params.b2 * c2
    b12 = params.b3 + params.b4 * c2
    b22 = np.full_like(b11, params.b5)
    return np.stack([np.stack([b11, b12], -1), np.stack([b12, b22], -1)], -2)


def coriolis(q, qdot, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    k = -params.c1 * np.sin(q[..., 1])
    d1, d2 = qdot[..., 0], qdot[..., 1]
    zero = np.zeros_like(d1)
    rows = [np.stack([d1, d1 + d2], -1), np.stack([-d1, zero], -1)]
    return k[..., None, None] * np.stack(rows, -2)


def gravity(q, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    c12 = np.cos(q[..., 0] + q[..., 1])
    return np.stack(
        [params.g1 * np.cos(q[..., 0]) + params.g2 * c12, params.g2 * c12], axis=-1
    )


def cartesian_output(q, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    """Tool position of the arm for joint angles ``q``."""
    q = np.asarray(q, dtype=float)
    a1, a12 = q[..., 0], q[..., 0] + q[..., 1]
    return np.stack(
        [
            params.l1 * np.cos(a1) + params.l2 * np.cos(a12),
            params.l1 * np.sin(a1) + params.l2 * np.sin(a12),
        ],
        axis=-1,
    )


def _coriolis_times_qdot(q, qdot, params):
    k = -params.c1 * np.sin(q[..., 1])
    d1, d2 = qdot[..., 0], qdot[..., 1]
    return np.stack([k * (d1 * d1 + (d1 + d2) * d2), -k * d1 * d1], axis=-1)


def solve_inertia(q, rhs, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    """Return ``B(q)^{-1} rhs`` with the closed-form 2x2 inverse."""
    c2 = np.cos(q[..., 1])
    b11 = params.b1 + params.b2 * c2
    b12 = params.b3 + params.b4 * c2
    b22 = params.b5
    det = b11 * b22 - b12 * b12
    if np.any(det <= DET_TOL):
        raise DynamicsError("inertia matrix is (near) singular")
    r1, r2 = rhs[..., 0], rhs[..., 1]
    return np.stack([(b22 * r1 - b12 * r2) / det, (b11 * r2 - b12 * r1) / det], axis=-1)


def robot_rhs(x, u, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    """Time derivative of the robot state ``x = (q, qdot)`` under torque ``u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q, qd = x[..., 0:2], x[..., 2:4]
    acc = solve_inertia(q, u - _coriolis_times_qdot(q, qd, params) - gravity(q, params), params)
    return np.concatenate([qd, acc], axis=-1)


def timing_rhs(z, v) -> np.ndarray:
    """Double-integrator timing law: ``d/dt (theta, thetadot) = (thetadot, v)``."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.stack([z[..., 1], np.broadcast_to(v, z[..., 1].shape)], axis=-1)


def augmented_rhs(s, w, params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    """Stacked robot and timing-law dynamics for ``s`` (..., 6) and ``w`` (..., 3)."""
    s = np.asarray(s, dtype=float)
    w = np.asarray(w, dtype=float)
    return np.concatenate(
        [robot_rhs(s[..., 0:4], w[..., 0:2], params), timing_rhs(s[..., 4:6], w[..., 2])],
        axis=-1,
    )


def path_error(s, path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Error output ``e = q - p(theta)``."""
    s = np.asarray(s, dtype=float)
    return s[..., 0:2] - path.value(s[..., 4])


def path_error_rate(s, path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Time derivative of the error output, ``qdot - p'(theta) thetadot``."""
    s = np.asarray(s, dtype=float)
    return s[..., 2:4] - path.deriv1(s[..., 4]) * s[..., 5:6]


def advance_timing_law(z, v, dt):
    """Exact flow of the timing law for constant ``v`` over ``dt``."""
    theta, thetadot = z[..., 0], z[..., 1]
    return np.stack(
        [theta + thetadot * dt + 0.5 * v * dt * dt, thetadot + v * dt], axis=-1
    )


# --------------------------------------------------------------------------
# integration

Rhs = Callable[[np.ndarray, np.ndarray], np.ndarray]


def rk4_step(rhs: Rhs, s, w, h: float) -> np.ndarray:
    k1 = rhs(s, w)
    k2 = rhs(s + 0.5 * h * k1, w)
    k3 = rhs(s + 0.5 * h * k2, w)
    k4 = rhs(s + h * k3, w)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def integrate(rhs: Rhs, s0, controls, t0: float, t1: float, h: float,
              breakpoints=None) -> Trajectory:
    """Classical RK4 with fixed step ``h`` and piecewise-constant controls.

    Parameters
    ----------
    rhs : callable
        ``rhs(s, w)`` returning ``ds/dt``.
    s0 : array_like
        Initial state.
    controls : array_like
        Either a single control vector held on ``[t0, t1]`` or an array of
        shape ``(K, m)`` with one row per interval of ``breakpoints``.
    breakpoints : array_like, optional
        ``K + 1`` increasing times starting at ``t0``; every breakpoint must
        fall on the integration grid.

    Returns
    -------
    Trajectory
        Dense output at every substep (including both endpoints).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    s = np.array(s0, dtype=float)
    span = t1 - t0
    n = int(round(span / h))
    if abs(n * h - span) > 1e-9 * max(1.0, abs(span)):
        raise ValueError("interval length must be a multiple of the step size")
    controls = np.asarray(controls, dtype=float)
    if breakpoints is None:
        index = np.zeros(n, dtype=int)
        table = controls.reshape(1, -1)
    else:
        bp = np.asarray(breakpoints, dtype=float)
        nodes = (bp - t0) / h
        if np.any(np.abs(nodes - np.round(nodes)) > 1e-6):
            raise ValueError("control breakpoints must align with the integration grid")
        table = controls.reshape(len(bp) - 1, -1)
        index = np.searchsorted(np.round(nodes).astype(int), np.arange(n), side="right") - 1
        index = np.clip(index, 0, len(table) - 1)
    ts = t0 + h * np.arange(n + 1)
    out = np.empty((n + 1,) + s.shape)
    out[0] = s
    for i in range(n):
        s = rk4_step(rhs, s, table[index[i]], h)
        if not np.all(np.isfinite(s)):
            raise IntegrationError(float(ts[i + 1]))
        out[i + 1] = s
    return Trajectory(ts, out, table[index] if n else table[:0])
