"""Quadratic stage cost on path error, error rate, path progress and inputs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import DEFAULT_PARAMS, DEFAULT_PATH, PathSpec, RobotParams, gravity, path_error, path_error_rate
from .transverse import feedforward_torque


def _default_u_tilde():
    # holding torque at the path end p(0)
    return gravity(DEFAULT_PATH.value(DEFAULT_PATH.theta1), DEFAULT_PARAMS)


@dataclass(frozen=True)
class CostWeights:
    """Diagonal weights of ``F = |(e, edot, theta)|_Q^2 + |(u - u_tilde, v)|_R^2``.

    In velocity mode the fifth Q entry weights ``thetadot - thetadot_ref``
    instead of ``theta - theta1``, and the torque is measured against the
    path feedforward torque instead of the constant ``u_tilde`` (a constant
    offset cannot vanish along a moving reference).
    """

    Q: tuple = (1e5, 1e5, 10.0, 10.0, 5.0)
    R: tuple = (1e-3, 1e-3, 1e-4)
    u_tilde: np.ndarray = field(default_factory=_default_u_tilde)

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if Q.shape != (5,) or R.shape != (3,):
            raise ValueError("Q needs 5 and R needs 3 diagonal entries")
        if np.any(Q < 0) or np.any(R < 0):
            raise ValueError("weights must be nonnegative")
        if Q[0] <= 0 or Q[1] <= 0 or Q[4] <= 0:
            raise ValueError("the e and theta weights must be strictly positive")
        object.__setattr__(self, "Q", tuple(Q))
        object.__setattr__(self, "R", tuple(R))
        object.__setattr__(self, "u_tilde", np.asarray(self.u_tilde, dtype=float))

    @property
    def diag(self) -> np.ndarray:
        """All eight weights in residual order (e, edot, progress, u - u_tilde, v)."""
        return np.concatenate([self.Q, self.R])

    @classmethod
    def for_path(cls, path: PathSpec, params: RobotParams, Q=None, R=None) -> "CostWeights":
        kw = {}
        if Q is not None:
            kw["Q"] = tuple(Q)
        if R is not None:
            kw["R"] = tuple(R)
        return cls(u_tilde=gravity(path.value(path.theta1), params), **kw)

    def to_dict(self) -> dict:
        return {"Q": list(self.Q), "R": list(self.R), "u_tilde": self.u_tilde.tolist()}


def stage_cost(e, edot, progress, u, v, weights: CostWeights, u_ref=None) -> np.ndarray:
    """Evaluate the stage cost.

    ``progress`` is ``theta - theta1`` in path mode and ``thetadot - thetadot_ref``
    in velocity mode; the caller picks which.  ``u_ref`` replaces ``u_tilde``
    when given.
    """
    e = np.asarray(e, dtype=float)
    edot = np.asarray(edot, dtype=float)
    du = np.asarray(u, dtype=float) - (weights.u_tilde if u_ref is None else u_ref)
    Q, R = weights.Q, weights.R
    return (Q[0] * e[..., 0] ** 2 + Q[1] * e[..., 1] ** 2
            + Q[2] * edot[..., 0] ** 2 + Q[3] * edot[..., 1] ** 2
            + Q[4] * np.asarray(progress, dtype=float) ** 2
            + R[0] * du[..., 0] ** 2 + R[1] * du[..., 1] ** 2
            + R[2] * np.asarray(v, dtype=float) ** 2)


def progress_residual(s, path: PathSpec, mode: str, thetadot_ref: float = 0.0):
    s = np.asarray(s, dtype=float)
    if mode == "velocity":
        return s[..., 5] - thetadot_ref
    return s[..., 4] - path.theta1


def state_residuals(s, path: PathSpec = DEFAULT_PATH, mode: str = "path",
                    thetadot_ref: float = 0.0) -> np.ndarray:
    """Unweighted state part of the cost residual, shape ``(..., 5)``."""
    return np.concatenate(
        [path_error(s, path), path_error_rate(s, path),
         progress_residual(s, path, mode, thetadot_ref)[..., None]],
        axis=-1,
    )


def torque_reference(s, v, weights: CostWeights, mode: str = "path",
                     params: RobotParams = DEFAULT_PARAMS, path: PathSpec = DEFAULT_PATH):
    """``u_tilde`` in path mode, the path feedforward torque in velocity mode."""
    if mode == "velocity":
        return feedforward_torque(s, v, params, path)
    return weights.u_tilde


def cost_of_state(s, w, weights: CostWeights, path: PathSpec = DEFAULT_PATH,
                  mode: str = "path", thetadot_ref: float = 0.0,
                  params: RobotParams = DEFAULT_PARAMS) -> np.ndarray:
    """Stage cost as a function of augmented state ``s`` and input ``w = (u, v)``."""
    s = np.asarray(s, dtype=float)
    w = np.asarray(w, dtype=float)
    u_ref = torque_reference(s, w[..., 2], weights, mode, params, path)
    return stage_cost(path_error(s, path), path_error_rate(s, path),
                      progress_residual(s, path, mode, thetadot_ref),
                      w[..., 0:2], w[..., 2], weights, u_ref)
