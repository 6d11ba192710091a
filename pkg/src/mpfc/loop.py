"""Sampled-data receding-horizon path-following loop.

At every sampling instant the OCP is solved from the measured robot state and
the controller-internal timing-law state ``z_bar``; the first input segment is
applied for one sampling period and ``z_bar`` is advanced in closed form under
the optimal virtual input.  ``z_bar`` is never reset from the plant.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .batch_rk4 import rk4_batch
from .cost import CostWeights, cost_of_state
from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    NS,
    ConstraintSet,
    PathSpec,
    RobotParams,
    advance_timing_law,
    path_error,
)
from .ocp import (
    STATUS_INFEASIBLE,
    OcpProblem,
    OcpSolution,
    SolverOptions,
    Transcription,
    shift_warm_start,
    solve,
)
from .terminal_set import SpeedBand, TerminalSet

REFERENCE_X0 = (-5.86, 2.43, 0.0, 0.0)
REFERENCE_Z0 = (-5.3, 0.0)


class LoopAborted(RuntimeError):
    """The OCP became infeasible inside the loop; the partial log is attached."""

    def __init__(self, message: str, log: "ClosedLoopLog"):
        super().__init__(message)
        self.log = log


@dataclass
class MpfcConfig:
    delta: float = 0.005
    horizon: float = 0.75
    n_intervals: int = 20
    substeps: int = 15
    t_end: float = 15.0
    plant_substeps: int = 5
    mode: str = "path"
    thetadot_ref: float = 0.0
    speed_band_width: float = 0.05
    weights: CostWeights | None = None
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    params: RobotParams = DEFAULT_PARAMS
    path: PathSpec = DEFAULT_PATH
    solver: SolverOptions = field(default_factory=SolverOptions)
    # (c_bar, alpha_bar) of the exponential end penalty used for logging
    penalty: tuple | None = None

    def __post_init__(self):
        if not 0 < self.delta < self.horizon:
            raise ValueError("need 0 < delta < horizon")
        n = self.t_end / self.delta
        if self.t_end < 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("t_end must be a nonnegative multiple of delta")
        h_ocp = self.horizon / (self.n_intervals * self.substeps)
        m = self.delta / h_ocp
        if abs(m - round(m)) > 1e-9 * max(1.0, m):
            raise ValueError("delta must be a multiple of the OCP integrator step")
        if self.mode not in ("path", "velocity"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.constraints.mode != self.mode:
            self.constraints = self.constraints.with_mode(self.mode)
        if self.weights is None:
            self.weights = CostWeights.for_path(self.path, self.params)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.delta))

    def end_penalty(self, t: float) -> float:
        if self.penalty is None:
            return 0.0
        c, a = self.penalty
        return c / a * np.exp(-a * t)

    def problem(self, s0, terminal: TerminalSet, t_start: float = 0.0,
                with_penalty: bool = False) -> OcpProblem:
        band = None
        if self.mode == "velocity":
            band = SpeedBand(self.thetadot_ref, self.speed_band_width)
        return OcpProblem(
            s0=s0, terminal=terminal, constraints=self.constraints, weights=self.weights,
            params=self.params, path=self.path, horizon=self.horizon,
            n_intervals=self.n_intervals, substeps=self.substeps, mode=self.mode,
            thetadot_ref=self.thetadot_ref, speed_band=band, t_start=t_start,
            end_penalty=self.end_penalty if with_penalty else None,
        )


@dataclass
class Scenario:
    name: str = "reference"
    x0: tuple = REFERENCE_X0
    z0: tuple | None = REFERENCE_Z0
    mode: str = "path"
    thetadot_ref: float = 0.0
    t_end: float | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "x0": list(self.x0),
                "z0": None if self.z0 is None else list(self.z0),
                "mode": self.mode, "thetadot_ref": self.thetadot_ref, "t_end": self.t_end}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        x0 = tuple(float(a) for a in d["x0"])
        if len(x0) != 4:
            raise ValueError("x0 needs four entries (q1, q2, qd1, qd2)")
        z0 = d.get("z0")
        if z0 is not None:
            z0 = tuple(float(a) for a in z0)
            if len(z0) != 2:
                raise ValueError("z0 needs two entries (theta, thetadot)")
        t_end = d.get("t_end")
        return cls(name=str(d.get("name", "scenario")), x0=x0, z0=z0,
                   mode=d.get("mode", "path"),
                   thetadot_ref=float(d.get("thetadot_ref", 0.0)),
                   t_end=None if t_end is None else float(t_end))


def init_theta(x0, path: PathSpec = DEFAULT_PATH, n_grid: int = 10_000) -> np.ndarray:
    """``z_bar(t0) = (theta*, 0)`` with ``theta*`` the closest path point to ``q0``.

    Every local minimum of the grid distance is refined; among equally close
    candidates (within 1e-9) the smallest ``theta`` wins.
    """
    q = np.asarray(x0, dtype=float)[0:2]
    th = np.linspace(path.theta0, path.theta1, n_grid)
    d = np.linalg.norm(path.value(th) - q, axis=-1)
    is_min = np.ones(n_grid, dtype=bool)
    is_min[1:] &= d[1:] <= d[:-1]
    is_min[:-1] &= d[:-1] <= d[1:]
    def dist(t):
        return float(np.linalg.norm(path.value(t) - q))

    cands = []
    for i in np.flatnonzero(is_min):
        lo, hi = th[max(i - 1, 0)], th[min(i + 1, n_grid - 1)]
        res = minimize_scalar(dist, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        cands.append((res.fun, res.x) if res.fun <= d[i] else (d[i], th[i]))
    best_d = min(c[0] for c in cands)
    best_th = min(c[1] for c in cands if c[0] <= best_d + 1e-9)
    return np.array([best_th, 0.0])


@dataclass
class StepResult:
    u: np.ndarray
    v: float
    z_next: np.ndarray
    solution: OcpSolution


def step(k: int, x, z_bar, cfg: MpfcConfig, terminal: TerminalSet,
         prev_solution: OcpSolution | None = None) -> StepResult:
    """Solve the OCP at ``t_k = k delta`` and return the first input segment."""
    s0 = np.concatenate([np.asarray(x, dtype=float), np.asarray(z_bar, dtype=float)])
    problem = cfg.problem(s0, terminal, t_start=k * cfg.delta)
    nlp = Transcription(problem, cfg.solver)
    guess = None
    if prev_solution is not None:
        guess = shift_warm_start(prev_solution, cfg.delta, s0)
    sol = solve(nlp, guess, cfg.solver)
    v = float(sol.v_traj[0])
    return StepResult(sol.u_traj[0].copy(), v, advance_timing_law(np.asarray(z_bar), v, cfg.delta), sol)


LOG_FIELDS = ("t", "x", "z", "u", "v", "e_norm", "stage_cost", "ocp_cost", "ocp_cost_penalized",
              "cost_integral", "status", "iterations", "terminal_margin", "solve_time",
              "max_qdot_substep")


@dataclass
class ClosedLoopLog:
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    z: list = field(default_factory=list)
    u: list = field(default_factory=list)
    v: list = field(default_factory=list)
    e_norm: list = field(default_factory=list)
    stage_cost: list = field(default_factory=list)
    ocp_cost: list = field(default_factory=list)
    ocp_cost_penalized: list = field(default_factory=list)
    cost_integral: list = field(default_factory=list)  # int of F over [t_k, t_k + delta)
    status: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    terminal_margin: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    max_qdot_substep: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    final_z: np.ndarray | None = None
    aborted: bool = False
    abort_reason: str = ""

    def arrays(self) -> dict:
        return {name: np.asarray(getattr(self, name)) for name in LOG_FIELDS}

    def __len__(self) -> int:
        return len(self.t)

    def final_error(self, path: PathSpec = DEFAULT_PATH) -> float:
        s = np.concatenate([self.final_x, self.final_z])
        return float(np.linalg.norm(path_error(s, path)))

    def descent_margins(self) -> tuple[np.ndarray, np.ndarray]:
        """``V(t_{k+1}) - V(t_k) + int F`` for the plain and the penalized value."""
        V = np.asarray(self.ocp_cost)
        Vp = np.asarray(self.ocp_cost_penalized)
        I = np.asarray(self.cost_integral)[:-1]
        return V[1:] - V[:-1] + I, Vp[1:] - Vp[:-1] + I


def _plant_step(s, w, cfg: MpfcConfig):
    """Integrate one sampling period; return end state, substep states and int F."""
    h = cfg.delta / cfg.plant_substeps
    ends, samples, stages = rk4_batch(s, w, cfg.params, h, cfg.plant_substeps,
                                      sample_every=1, record_stages=True)
    F = cost_of_state(stages[:, :, 0, :], w, cfg.weights, cfg.path, cfg.mode, cfg.thetadot_ref,
                      cfg.params)
    integral = float(np.sum(h / 6.0 * (F[:, 0] + 2 * F[:, 1] + 2 * F[:, 2] + F[:, 3])))
    return ends[0], samples[0], integral


def run(scenario: Scenario, cfg: MpfcConfig, terminal: TerminalSet,
        raise_on_abort: bool = False, progress=None) -> ClosedLoopLog:
    """Simulate the closed loop until ``cfg.t_end`` (or the scenario's ``t_end``)."""
    if scenario.t_end is not None and scenario.t_end != cfg.t_end:
        cfg = MpfcConfig(**{**cfg.__dict__, "t_end": scenario.t_end})
    x = np.asarray(scenario.x0, dtype=float)
    z = np.asarray(scenario.z0 if scenario.z0 is not None else init_theta(x, cfg.path), dtype=float)
    log = ClosedLoopLog()
    prev = None
    for k in range(cfg.n_steps):
        t = k * cfg.delta
        t_wall = time.perf_counter()
        res = step(k, x, z, cfg, terminal, prev)
        elapsed = time.perf_counter() - t_wall
        sol = res.solution
        s = np.concatenate([x, z])
        w = np.concatenate([res.u, [res.v]])
        s_next, substeps, integral = _plant_step(s, w, cfg)
        log.t.append(t)
        log.x.append(x.copy())
        log.z.append(z.copy())
        log.u.append(res.u)
        log.v.append(res.v)
        log.e_norm.append(float(np.linalg.norm(path_error(s, cfg.path))))
        log.stage_cost.append(float(cost_of_state(s, w, cfg.weights, cfg.path, cfg.mode,
                                                  cfg.thetadot_ref, cfg.params)))
        log.ocp_cost.append(sol.running_cost)
        log.ocp_cost_penalized.append(sol.running_cost + cfg.end_penalty(t + cfg.horizon))
        log.cost_integral.append(integral)
        log.status.append(sol.status)
        log.iterations.append(sol.iterations)
        log.terminal_margin.append(sol.terminal_margin)
        log.solve_time.append(elapsed)
        all_sub = np.vstack([s[None], substeps, s_next[None]])
        log.max_qdot_substep.append(float(np.max(np.abs(all_sub[:, 2:4]))))
        if sol.status == STATUS_INFEASIBLE:
            log.aborted = True
            log.abort_reason = f"OCP infeasible at t={t:.4f} (violation {sol.max_violation:.3e})"
            log.final_x, log.final_z = x, z
            if raise_on_abort:
                raise LoopAborted(log.abort_reason, log)
            return log
        x, z, prev = s_next[0:4], res.z_next, sol
        if progress is not None:
            progress(k, log)
    log.final_x, log.final_z = x, z
    return log


__all__ = ["ClosedLoopLog", "LoopAborted", "MpfcConfig", "Scenario", "StepResult",
           "init_theta", "run", "step"]
