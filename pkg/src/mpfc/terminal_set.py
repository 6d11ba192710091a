"""Terminal region synthesis for the two-link arm.

The region is ``{(x, z) : xi^T P xi <= gamma^2, eta in E_eta}`` where ``E_eta``
is a polygon made positively invariant by ``v = K_eta eta`` and ``gamma`` is
the largest level for which the feedback-linearizing terminal torque stays
admissible.  Pipeline: :func:`compute_bounds` -> :func:`solve_care` ->
:func:`build_eta_polytope` -> :func:`maximize_level`, wrapped by
:func:`synthesize`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .cost import CostWeights, cost_of_state
from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    ConstraintSet,
    PathSpec,
    RobotParams,
    augmented_rhs,
    rk4_step,
)
from .transverse import (
    A_XI,
    B_XI,
    EtaGain,
    XiGain,
    from_transverse,
    terminal_controls,
    terminal_u,
    to_transverse,
)

ARTIFACT_VERSION = 1
MEMBERSHIP_TOL = 1e-9


class SynthesisError(RuntimeError):
    """A synthesis precondition failed; the message names the inequality."""


@dataclass(frozen=True)
class ModelBounds:
    B_bar: float
    C_bar: float
    g_bar: float
    pdot_bar: float
    pddot_bar: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EtaPolytope:
    """``{eta : theta0 <= eta1 <= 0, 0 <= eta2 <= thetadot_bar, n1 . eta <= 0}``."""

    theta0: float
    thetadot_bar: float
    n1: tuple

    def margins(self, eta) -> np.ndarray:
        """Slack of every defining inequality (all >= 0 inside)."""
        eta = np.asarray(eta, dtype=float)
        e1, e2 = eta[..., 0], eta[..., 1]
        n = np.asarray(self.n1)
        return np.stack(
            [e1 - self.theta0, -e1, e2, self.thetadot_bar - e2, -(n[0] * e1 + n[1] * e2)],
            axis=-1,
        )

    def contains(self, eta, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        return np.all(self.margins(eta) >= -tol, axis=-1)

    def vertices(self) -> np.ndarray:
        """Polygon vertices, counterclockwise (box clipped by the halfplane)."""
        box = np.array([[self.theta0, 0.0], [0.0, 0.0],
                        [0.0, self.thetadot_bar], [self.theta0, self.thetadot_bar]])
        n = np.asarray(self.n1)
        out = []
        for a, b in zip(box, np.roll(box, -1, axis=0)):
            fa, fb = n @ a, n @ b
            if fa <= 0:
                out.append(a)
            if fa * fb < 0:
                out.append(a + (b - a) * fa / (fa - fb))
        verts = np.array(out)
        # drop duplicates created by vertices on the cutting line
        keep = [0] + [i for i in range(1, len(verts))
                      if np.linalg.norm(verts[i] - verts[i - 1]) > 1e-14]
        return verts[keep]

    def area(self) -> float:
        v = self.vertices()
        x, y = v[:, 0], v[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((0, 2))
        while len(out) < n:
            cand = np.column_stack([rng.uniform(self.theta0, 0.0, 4 * n),
                                    rng.uniform(0.0, self.thetadot_bar, 4 * n)])
            out = np.vstack([out, cand[self.contains(cand, 0.0)]])
        return out[:n]


@dataclass(frozen=True)
class SpeedBand:
    """Velocity-mode replacement for ``E_eta``: ``|thetadot - ref| <= half_width``.

    Made invariant by ``v = -k (thetadot - ref)``; theta is left free.
    """

    thetadot_ref: float
    half_width: float = 0.05
    k: float = 1.33

    def margins(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        d = eta[..., 1] - self.thetadot_ref
        return np.stack([self.half_width + d, self.half_width - d], axis=-1)

    def contains(self, eta, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        return np.all(self.margins(eta) >= -tol, axis=-1)

    def feedback(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        return -self.k * (eta[..., 1] - self.thetadot_ref)


@dataclass
class TerminalSet:
    xi_gain: XiGain
    eta_gain: EtaGain
    level: float
    eta_poly: EtaPolytope
    bounds: ModelBounds | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def P(self) -> np.ndarray:
        return self.xi_gain.P

    @property
    def gamma(self) -> float:
        return float(np.sqrt(self.level))

    def with_level(self, level: float) -> "TerminalSet":
        return TerminalSet(self.xi_gain, self.eta_gain, level, self.eta_poly,
                           self.bounds, dict(self.metadata))

    def ellipsoid_value(self, s, path: PathSpec = DEFAULT_PATH) -> np.ndarray:
        xi = to_transverse(s, path)[..., 0:4]
        return np.einsum("...i,ij,...j->...", xi, self.P, xi)

    def to_dict(self) -> dict:
        return {
            "version": ARTIFACT_VERSION,
            "P_xi": self.P.ravel().tolist(),
            "K_xi": self.xi_gain.K.ravel().tolist(),
            "level": self.level,
            "gamma": self.gamma,
            "k_eta": [self.eta_gain.k1, self.eta_gain.k2],
            "eta_polytope": {
                "theta0": self.eta_poly.theta0,
                "thetadot_bar": self.eta_poly.thetadot_bar,
                "n1": list(self.eta_poly.n1),
            },
            "bounds": self.bounds.to_dict() if self.bounds else None,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TerminalSet":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported terminal-set artifact version {d.get('version')!r}")
        poly = d["eta_polytope"]
        xi_gain = XiGain(np.reshape(d["K_xi"], (2, 4)), np.reshape(d["P_xi"], (4, 4)))
        eta_gain = EtaGain(*d["k_eta"], poly["theta0"], poly["thetadot_bar"])
        bounds = ModelBounds(**d["bounds"]) if d.get("bounds") else None
        return cls(xi_gain, eta_gain, float(d["level"]),
                   EtaPolytope(poly["theta0"], poly["thetadot_bar"], tuple(poly["n1"])),
                   bounds, d.get("metadata", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TerminalSet":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# synthesis steps

def _interval_hits(lo: float, hi: float, offset: float, period: float) -> bool:
    """True when ``offset + k * period`` lies in ``[lo, hi]`` for some integer k."""
    k = np.ceil((lo - offset) / period)
    return offset + k * period <= hi


def path_derivative_sups(path: PathSpec, lo: float, hi: float) -> tuple[float, float]:
    """Exact ``sup |p'|`` and ``sup |p''|`` over ``theta in [lo, hi]``."""
    a_lo = path.omega2 * (lo - np.pi / 3)
    a_hi = path.omega2 * (hi - np.pi / 3)
    amp1 = path.omega1 * path.omega2
    amp2 = path.omega1 * path.omega2**2
    if _interval_hits(a_lo, a_hi, 0.0, np.pi):
        cos_sq = 1.0
    else:
        cos_sq = max(np.cos(a_lo) ** 2, np.cos(a_hi) ** 2)
    if _interval_hits(a_lo, a_hi, np.pi / 2, np.pi):
        sin_sq = 1.0
    else:
        sin_sq = max(np.sin(a_lo) ** 2, np.sin(a_hi) ** 2)
    return float(np.sqrt(1.0 + amp1**2 * cos_sq)), float(amp2 * np.sqrt(sin_sq))


def compute_bounds(params: RobotParams, path: PathSpec, eta_poly: EtaPolytope,
                   constraints: ConstraintSet, eta_gain: EtaGain) -> ModelBounds:
    """Upper bounds on the model terms entering the terminal torque.

    ``|B|``, ``|C|`` and ``|g|`` are maximized over the velocity box
    ``|qdot|_inf <= qdot_max`` and all joint angles.  Each maximum is exact:
    ``lambda_max(B)`` is convex in ``cos q2`` (extremes at +-1), ``|C|`` is a
    convex function of ``qdot`` times ``|sin q2|`` (extremes at box vertices)
    and ``|g|`` peaks at ``q = 0``.  Path terms use exact suprema of
    ``|p'|, |p''|`` over ``[theta0, 0]`` and of ``|K_eta eta|`` over the polygon.
    """
    if eta_poly.area() <= 0:
        raise SynthesisError("terminal polygon E_eta is empty")
    B_bar = 0.0
    for c2 in (-1.0, 1.0):
        b11 = params.b1 + params.b2 * c2
        b12 = params.b3 + params.b4 * c2
        B_bar = max(B_bar, np.linalg.eigvalsh([[b11, b12], [b12, params.b5]]).max())
    C_bar = 0.0
    qm = constraints.qdot_max
    for d1 in (-qm, qm):
        for d2 in (-qm, qm):
            M = np.array([[d1, d1 + d2], [-d1, 0.0]])
            C_bar = max(C_bar, abs(params.c1) * np.linalg.norm(M, 2))
    g_bar = float(np.hypot(params.g1 + params.g2, params.g2))
    dp, ddp = path_derivative_sups(path, eta_poly.theta0, 0.0)
    v_sup = float(np.max(np.abs(eta_poly.vertices() @ eta_gain.vector)))
    return ModelBounds(
        B_bar=float(B_bar),
        C_bar=float(C_bar),
        g_bar=g_bar,
        pdot_bar=dp * eta_poly.thetadot_bar,
        pddot_bar=ddp * eta_poly.thetadot_bar**2 + dp * v_sup,
    )


def care_residual(P, Q, R) -> float:
    res = A_XI.T @ P + P @ A_XI - P @ B_XI @ np.linalg.solve(R, B_XI.T) @ P + Q
    return float(np.linalg.norm(res, 2))


def solve_care(Q_xi=None, R_xi=None, tol: float = 1e-8) -> XiGain:
    """LQR design for the transverse double integrators."""
    Q = np.eye(4) if Q_xi is None else np.asarray(Q_xi, dtype=float)
    R = np.eye(2) if R_xi is None else np.asarray(R_xi, dtype=float)
    if np.linalg.eigvalsh(Q).min() < -1e-12 or np.linalg.eigvalsh(R).min() <= 0:
        raise SynthesisError("CARE requires Q >= 0 and R > 0")
    P = scipy.linalg.solve_continuous_are(A_XI, B_XI, Q, R)
    P = 0.5 * (P + P.T)
    if care_residual(P, Q, R) >= tol:
        raise SynthesisError(f"CARE residual {care_residual(P, Q, R):.3e} exceeds {tol:g}")
    K = np.linalg.solve(R, B_XI.T @ P)
    return XiGain(K, P)


def build_eta_polytope(gain: EtaGain, theta0: float, thetadot_bar: float) -> EtaPolytope:
    """Bound the timing-law terminal set by the fast closed-loop eigenline."""
    disc = gain.k2**2 + 4.0 * gain.k1
    if disc <= 0:
        raise SynthesisError("K_eta gives complex eigenvalues (k2^2 > -4 k1 violated)")
    slow, fast = gain.eigenvalues()
    # eigenvectors (1, lambda); normal to the fast one
    n = np.array([-fast, 1.0]) / np.hypot(fast, 1.0)
    if n @ np.array([-1.0, -slow]) > 0:
        n = -n
    return EtaPolytope(float(theta0), float(thetadot_bar), (float(n[0]), float(n[1])))


def level_limits(xi_gain: XiGain, bounds: ModelBounds,
                 constraints: ConstraintSet) -> tuple[float, float]:
    """Radii of the two norm balls the ellipsoid must fit in: ``|xi|`` and ``|xi2|``."""
    K_norm = np.linalg.norm(xi_gain.K, 2)
    num = (constraints.u_max - bounds.C_bar * constraints.qdot_max - bounds.g_bar
           - bounds.B_bar * bounds.pddot_bar)
    if num <= 0:
        raise SynthesisError(
            "insufficient input authority: u_max - C_bar*qdot_max - g_bar - B_bar*pddot_bar "
            f"= {num:.4g} <= 0"
        )
    r_q = constraints.qdot_max - bounds.pdot_bar
    if r_q <= 0:
        raise SynthesisError(f"insufficient velocity margin: qdot_max - pdot_bar = {r_q:.4g} <= 0")
    return num / (bounds.B_bar * K_norm), r_q


def _shadow_radius(P, select, gamma) -> float:
    """Largest ``|select @ xi|`` over ``xi^T P xi <= gamma^2``."""
    S = select @ np.linalg.inv(P) @ select.T
    return gamma * float(np.sqrt(np.linalg.eigvalsh(S).max()))


def maximize_level(xi_gain: XiGain, bounds: ModelBounds, constraints: ConstraintSet,
                   tol: float = 1e-6) -> float:
    """Largest ``gamma`` whose ellipsoid fits both admissibility balls (bisection)."""
    r_u, r_q = level_limits(xi_gain, bounds, constraints)
    P = xi_gain.P
    full = np.eye(4)
    lower = np.eye(4)[2:]

    def fits(g):
        return _shadow_radius(P, full, g) <= r_u and _shadow_radius(P, lower, g) <= r_q

    lo, hi = 0.0, 1.0
    while fits(hi):
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def synthesize(params: RobotParams = DEFAULT_PARAMS, path: PathSpec = DEFAULT_PATH,
               constraints: ConstraintSet | None = None, k_eta=(-0.1, -1.33),
               thetadot_bar: float = 0.4, Q_xi=None, R_xi=None,
               tol: float = 1e-6) -> TerminalSet:
    constraints = constraints or ConstraintSet()
    eta_gain = EtaGain(k_eta[0], k_eta[1], path.theta0, thetadot_bar)
    eta_poly = build_eta_polytope(eta_gain, path.theta0, thetadot_bar)
    bounds = compute_bounds(params, path, eta_poly, constraints, eta_gain)
    xi_gain = solve_care(Q_xi, R_xi)
    gamma = maximize_level(xi_gain, bounds, constraints, tol)
    r_u, r_q = level_limits(xi_gain, bounds, constraints)
    meta = {
        "bisection_tol": tol,
        "care_residual": care_residual(xi_gain.P, np.eye(4) if Q_xi is None else np.asarray(Q_xi),
                                       np.eye(2) if R_xi is None else np.asarray(R_xi)),
        "radius_xi": r_u,
        "radius_xi2": r_q,
        "bounds_method": "exact (vertex/endpoint enumeration)",
        "u_max": constraints.u_max,
        "qdot_max": constraints.qdot_max,
    }
    return TerminalSet(xi_gain, eta_gain, gamma**2, eta_poly, bounds, meta)


# --------------------------------------------------------------------------
# membership and verification

def membership(s, ts: TerminalSet, path: PathSpec = DEFAULT_PATH,
               tol: float = MEMBERSHIP_TOL):
    """Return ``(inside, margins)``; margins = (ellipsoid slack, polygon slacks...)."""
    c = to_transverse(s, path)
    xi = c[..., 0:4]
    ell = ts.level - np.einsum("...i,ij,...j->...", xi, ts.P, xi)
    margins = np.concatenate([ell[..., None], ts.eta_poly.margins(c[..., 4:6])], axis=-1)
    return np.all(margins >= -tol, axis=-1), margins


def sample_terminal_set(ts: TerminalSet, rng: np.random.Generator, n: int,
                        path: PathSpec = DEFAULT_PATH) -> np.ndarray:
    """Uniform samples of the ellipsoid times the polygon, mapped back to ``(x, z)``."""
    g = rng.standard_normal((n, 4))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    g *= rng.uniform(0.0, 1.0, (n, 1)) ** 0.25
    L = np.linalg.cholesky(ts.P)
    xi = ts.gamma * scipy.linalg.solve_triangular(L.T, g.T, lower=False).T
    eta = ts.eta_poly.sample(rng, n)
    return from_transverse(np.hstack([xi, eta]), path)


@dataclass
class InvarianceReport:
    n_samples: int
    horizon: float
    contained_fraction: float
    max_box_violation: float
    min_thetadot: float
    decay_rates: np.ndarray
    decay_constants: np.ndarray
    alpha_min: float
    c_max: float
    max_decrease_residual: float
    all_alpha_positive: bool

    @property
    def passed(self) -> bool:
        return (self.contained_fraction == 1.0 and self.max_box_violation <= 0.0
                and self.all_alpha_positive and self.max_decrease_residual <= 1e-6)

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "horizon": self.horizon,
            "contained_fraction": self.contained_fraction,
            "max_box_violation": self.max_box_violation,
            "min_thetadot": self.min_thetadot,
            "alpha_min": self.alpha_min,
            "alpha_max": float(np.max(self.decay_rates)) if len(self.decay_rates) else None,
            "c_max": self.c_max,
            "max_decrease_residual": self.max_decrease_residual,
            "all_alpha_positive": self.all_alpha_positive,
            "passed": self.passed,
        }

    def penalty(self, t, t0: float = 0.0):
        """The exponential end penalty ``c / alpha * exp(-alpha (t - t0))``."""
        return self.c_max / self.alpha_min * np.exp(-self.alpha_min * (np.asarray(t) - t0))


def fit_decay(t: np.ndarray, F: np.ndarray) -> tuple[float, float]:
    """Least-squares rate of ``log F`` and the smallest constant enveloping ``F``."""
    pos = F > 1e-300
    if pos.sum() < 2:
        return np.inf, 0.0
    slope, _ = np.polyfit(t[pos], np.log(F[pos]), 1)
    alpha = -slope
    c = float(np.max(F * np.exp(alpha * t))) if np.isfinite(alpha) else np.inf
    return float(alpha), c


def closed_loop_terminal_rhs(ts: TerminalSet, params, path, constraints):
    """Closed-loop vector field under the (input-saturated) terminal controls."""
    lim = constraints.u_max

    def f(s, _w=None):
        w = terminal_controls(s, ts.xi_gain, ts.eta_gain, params, path)
        w[..., 0:2] = np.clip(w[..., 0:2], -lim, lim)
        return augmented_rhs(s, w, params)

    return f


def verify_invariance(ts: TerminalSet, params: RobotParams = DEFAULT_PARAMS,
                      path: PathSpec = DEFAULT_PATH,
                      constraints: ConstraintSet | None = None,
                      weights: CostWeights | None = None,
                      n_samples: int = 500, horizon: float = 60.0,
                      h: float = 0.01, record_every: int = 5,
                      seed: int = 0, initial_states=None) -> InvarianceReport:
    """Monte Carlo check of positive invariance and exponential cost decay.

    Each sample is simulated under the terminal control pair.  A sample counts
    as contained when it stays in the terminal set and inside the original
    velocity box at every recorded time; box violations additionally include
    the unsaturated terminal torque leaving ``|u|_inf <= u_max``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    constraints = constraints or ConstraintSet()
    weights = weights or CostWeights.for_path(path, params)
    rng = np.random.default_rng(seed)
    if initial_states is None:
        s = sample_terminal_set(ts, rng, n_samples, path)
    else:
        s = np.atleast_2d(np.asarray(initial_states, dtype=float)).copy()
    n = len(s)
    f = closed_loop_terminal_rhs(ts, params, path, constraints)
    steps = int(round(horizon / h))
    n_rec = steps // record_every + 1
    t_rec = h * record_every * np.arange(n_rec)
    F = np.empty((n_rec, n))
    contained = np.ones(n, dtype=bool)
    box_viol = 0.0
    min_thetadot = np.inf

    def record(j, s):
        nonlocal box_viol, min_thetadot
        w = terminal_controls(s, ts.xi_gain, ts.eta_gain, params, path)
        inside, _ = membership(s, ts, path)
        qd_excess = np.max(np.abs(s[:, 2:4]), axis=1) - constraints.qdot_max
        u_excess = np.max(np.abs(w[:, 0:2]), axis=1) - constraints.u_max
        contained[:] &= inside & (qd_excess <= MEMBERSHIP_TOL)
        box_viol = max(box_viol, float(np.max(np.maximum(qd_excess, u_excess))))
        min_thetadot = min(min_thetadot, float(np.min(s[:, 5])))
        w[:, 0:2] = np.clip(w[:, 0:2], -constraints.u_max, constraints.u_max)
        F[j] = cost_of_state(s, w, weights, path, params=params)

    record(0, s)
    for k in range(1, steps + 1):
        s = rk4_step(f, s, None, h)
        if k % record_every == 0:
            record(k // record_every, s)

    rates = np.empty(n)
    consts = np.empty(n)
    for i in range(n):
        rates[i], consts[i] = fit_decay(t_rec, F[:, i])
    finite = np.isfinite(rates)
    alpha_min = float(np.min(rates[finite])) if finite.any() else np.inf
    c_max = float(np.max(consts))
    if np.isfinite(alpha_min) and alpha_min > 0:
        # d/dt penalty + F = F - c exp(-alpha t)
        resid = float(np.max(F - c_max * np.exp(-alpha_min * t_rec)[:, None]))
    else:
        resid = np.inf if not np.isfinite(alpha_min) or alpha_min <= 0 else 0.0
    return InvarianceReport(
        n_samples=n,
        horizon=horizon,
        contained_fraction=float(np.mean(contained)),
        max_box_violation=max(box_viol, 0.0),
        min_thetadot=min_thetadot,
        decay_rates=rates,
        decay_constants=consts,
        alpha_min=alpha_min,
        c_max=c_max,
        max_decrease_residual=resid,
        all_alpha_positive=bool(np.all(rates > 0)),
    )


def terminal_torque_bound(ts: TerminalSet, constraints: ConstraintSet) -> float:
    """Analytic ``sup |u_E|`` over the terminal set implied by the synthesis bounds."""
    b = ts.bounds
    r = ts.gamma * np.sqrt(np.linalg.eigvalsh(np.linalg.inv(ts.P)).max())
    return (b.C_bar * constraints.qdot_max + b.g_bar
            + b.B_bar * (b.pddot_bar + np.linalg.norm(ts.xi_gain.K, 2) * r))


__all__ = [
    "EtaPolytope", "InvarianceReport", "ModelBounds", "SpeedBand", "SynthesisError",
    "TerminalSet", "build_eta_polytope", "care_residual", "compute_bounds",
    "maximize_level", "membership", "sample_terminal_set", "solve_care", "synthesize",
    "terminal_u", "verify_invariance",
]
