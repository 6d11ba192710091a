"""Numerical verification checks shared by the command line and the test suite.

Each check returns a :class:`CheckResult` carrying the measured quantity, the
threshold it was held to and a pass flag, so reports can be printed or
serialized without re-running anything.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    ConstraintSet,
    PathSpec,
    RobotParams,
    augmented_rhs,
    coriolis,
    gravity,
    inertia,
    rk4_step,
)
from .ocp import OcpProblem, Transcription, solve
from .terminal_set import EtaPolytope, TerminalSet, care_residual
from .transverse import from_transverse, to_transverse, transverse_rhs


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value),
                "threshold": float(self.threshold), "details": self.details}

    def line(self) -> str:
        return (f"{'PASS' if self.passed else 'FAIL'}  {self.name}: "
                f"{self.value:.6g} (threshold {self.threshold:g})")


def random_states(rng: np.random.Generator, n: int, path: PathSpec = DEFAULT_PATH,
                  constraints: ConstraintSet | None = None) -> np.ndarray:
    """Augmented states with angles in ``[-pi, pi]``, velocities in the box, ``theta`` on the path."""
    constraints = constraints or ConstraintSet()
    q = rng.uniform(-np.pi, np.pi, (n, 2))
    qd = rng.uniform(-constraints.qdot_max, constraints.qdot_max, (n, 2))
    theta = rng.uniform(path.theta0, path.theta1, (n, 1))
    thetadot = rng.uniform(0.0, 1.0, (n, 1))
    return np.hstack([q, qd, theta, thetadot])


def check_care(ts: TerminalSet, tol: float = 1e-8) -> CheckResult:
    res = care_residual(ts.P, np.eye(4), np.eye(2))
    return CheckResult("CARE residual", res < tol, res, tol)


def check_phi_roundtrip(n: int = 1000, seed: int = 0, path: PathSpec = DEFAULT_PATH,
                        tol: float = 1e-12) -> CheckResult:
    s = random_states(np.random.default_rng(seed), n, path)
    err = float(np.max(np.abs(from_transverse(to_transverse(s, path), path) - s)))
    return CheckResult("transverse coordinate round trip", err < tol, err, tol)


def check_vector_field(n: int = 200, seed: int = 0, params: RobotParams = DEFAULT_PARAMS,
                       path: PathSpec = DEFAULT_PATH, tol: float = 1e-8) -> CheckResult:
    """Compare the transverse vector field with ``D Phi(s) f(s, w)``.

    The directional derivative uses a five-point central stencil, whose
    truncation error at the chosen step is far below ``tol``.
    """
    rng = np.random.default_rng(seed)
    s = random_states(rng, n, path)
    w = np.hstack([rng.uniform(-2000, 2000, (n, 2)), rng.uniform(-5, 5, (n, 1))])
    f = augmented_rhs(s, w, params)
    eps = 1e-3 / (1.0 + np.linalg.norm(f, axis=1, keepdims=True))

    def phi(a):
        return to_transverse(s + a * eps * f, path)

    d_phi = (8 * (phi(1) - phi(-1)) - (phi(2) - phi(-2))) / (12 * eps)
    direct = transverse_rhs(to_transverse(s, path), w[:, 0:2], w[:, 2], params, path)
    rel = np.linalg.norm(direct - d_phi, axis=1) / np.maximum(np.linalg.norm(d_phi, axis=1), 1.0)
    err = float(np.max(rel))
    return CheckResult("transverse vs augmented vector field", err < tol, err, tol)


def integrator_order(params: RobotParams = DEFAULT_PARAMS, t_span: float = 0.5,
                     h0: float = 0.02, seed: int = 0) -> float:
    """Observed self-convergence order of the fixed-step RK4 integrator."""
    rng = np.random.default_rng(seed)
    s0 = random_states(rng, 1, DEFAULT_PATH)[0]
    w = np.array([100.0, -50.0, 0.5])

    def final(h):
        s = s0.copy()
        for _ in range(int(round(t_span / h))):
            s = rk4_step(lambda x, u: augmented_rhs(x, u, params), s, w, h)
        return s

    y1, y2, y3 = final(h0), final(h0 / 2), final(h0 / 4)
    return float(np.log2(np.linalg.norm(y1 - y2) / np.linalg.norm(y2 - y3)))


def check_integrator_order(lo: float = 3.5, hi: float = 4.5, **kw) -> CheckResult:
    p = integrator_order(**kw)
    return CheckResult("integrator self-convergence order", lo <= p <= hi, p, 4.0,
                       {"accepted_range": [lo, hi]})


def grid_maxima(ts: TerminalSet, params: RobotParams = DEFAULT_PARAMS,
                path: PathSpec = DEFAULT_PATH, constraints: ConstraintSet | None = None,
                n: int = 100_000, seed: int = 0) -> dict:
    """Sampled maxima of the model terms that the synthesis bounds must dominate."""
    constraints = constraints or ConstraintSet()
    rng = np.random.default_rng(seed)
    q = rng.uniform(-np.pi, np.pi, (n, 2))
    qd = rng.uniform(-constraints.qdot_max, constraints.qdot_max, (n, 2))
    eta = _polytope_samples(ts.eta_poly, rng, n)
    gain = ts.eta_gain
    v = gain.k1 * eta[:, 0] + gain.k2 * eta[:, 1]
    pdot = path.deriv1(eta[:, 0]) * eta[:, 1:2]
    pddot = path.deriv2(eta[:, 0]) * eta[:, 1:2] ** 2 + path.deriv1(eta[:, 0]) * v[:, None]
    return {
        "B_bar": float(np.max(np.linalg.norm(inertia(q, params), 2, axis=(-2, -1)))),
        "C_bar": float(np.max(np.linalg.norm(coriolis(q, qd, params), 2, axis=(-2, -1)))),
        "g_bar": float(np.max(np.linalg.norm(gravity(q, params), axis=-1))),
        "pdot_bar": float(np.max(np.linalg.norm(pdot, axis=-1))),
        "pddot_bar": float(np.max(np.linalg.norm(pddot, axis=-1))),
    }


def _polytope_samples(poly: EtaPolytope, rng, n):
    # the sampler is uniform; add the vertices so corner maxima are hit exactly
    return np.vstack([poly.sample(rng, n), poly.vertices()])


def check_bounds(ts: TerminalSet, n: int = 100_000, seed: int = 0, **kw) -> CheckResult:
    grid = grid_maxima(ts, n=n, seed=seed, **kw)
    bounds = ts.bounds.to_dict()
    slack = {k: bounds[k] - grid[k] for k in grid}
    worst = min(slack.values())
    return CheckResult("model bounds dominate grid maxima", worst >= 0.0, worst, 0.0,
                       {"bounds": bounds, "grid": grid})


def check_end_penalty_equivalence(problem: OcpProblem, c_bar: float, alpha_bar: float,
                                  control_tol: float = 1e-6,
                                  cost_tol: float = 1e-8) -> CheckResult:
    """Solve ``problem`` with no end penalty and with ``c/alpha exp(-alpha t)``.

    The optimal controls must agree and the costs must differ by exactly the
    penalty value at the end of the horizon.
    """
    def penalty(t):
        return c_bar / alpha_bar * np.exp(-alpha_bar * t)

    plain = solve(Transcription(replace(problem, end_penalty=None)))
    shifted = solve(Transcription(replace(problem, end_penalty=penalty)))
    du = float(np.max(np.abs(plain.controls - shifted.controls)))
    expected = penalty(problem.t_start + problem.horizon)
    cost_err = abs((shifted.cost - plain.cost) - expected)
    ok = (du < control_tol and cost_err < cost_tol
          and plain.converged and shifted.converged)
    return CheckResult("end-penalty equivalence (controls)", ok, du, control_tol,
                       {"cost_error": cost_err, "cost_tol": cost_tol, "penalty": expected,
                        "cost_plain": plain.cost, "cost_penalized": shifted.cost,
                        "status": [plain.status, shifted.status]})


__all__ = [
    "CheckResult", "check_bounds", "check_care", "check_end_penalty_equivalence", "check_integrator_order",
    "check_phi_roundtrip", "check_vector_field", "grid_maxima", "integrator_order",
    "random_states",
]
