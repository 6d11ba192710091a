"""Command line front end: ``mpfc synthesize | simulate | verify | oracle``.

Exit codes: 0 success, 1 infeasibility or loop abort, 2 verification failure,
3 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checks
from .cost import CostWeights
from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    ConstraintSet,
    PathSpec,
    RobotParams,
    cartesian_output,
    gravity,
    path_error,
)
from .loop import REFERENCE_X0, REFERENCE_Z0, ClosedLoopLog, MpfcConfig, Scenario, run
from .ocp import STATUS_INFEASIBLE, SolverOptions
from .terminal_set import SynthesisError, TerminalSet, solve_care, synthesize, verify_invariance

EXIT_OK, EXIT_ABORT, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2, 3
CONFIG_VERSION = 1

CSV_COLUMNS = ("t", "q1", "q2", "qd1", "qd2", "theta", "thetadot", "u1", "u2", "v",
               "e1", "e2", "cart_x", "cart_y", "stage_cost", "ocp_cost", "solver_status",
               "terminal_margin")

# published holding-torque offset, printed next to the computed one
REFERENCE_OFFSET = (263.0, -262.5)


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    """Everything read from ``--config``; every section is optional."""

    params: RobotParams = DEFAULT_PARAMS
    path: PathSpec = DEFAULT_PATH
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    Q: tuple | None = None
    R: tuple | None = None
    u_tilde: tuple | None = None
    k_eta: tuple = (-0.1, -1.33)
    thetadot_bar: float = 0.4
    Q_xi: list | None = None
    R_xi: list | None = None
    bisection_tol: float = 1e-6
    mpfc: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        known = {"version", "params", "path", "constraints", "weights", "synthesis", "mpfc", "solver"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls()
            if "params" in d:
                cfg.params = RobotParams.from_dict({**DEFAULT_PARAMS.to_dict(), **d["params"]})
            if "path" in d:
                cfg.path = PathSpec.from_dict({**DEFAULT_PATH.to_dict(), **d["path"]})
            if "constraints" in d:
                cfg.constraints = ConstraintSet.from_dict({**ConstraintSet().to_dict(), **d["constraints"]})
            w = d.get("weights", {})
            cfg.Q, cfg.R, cfg.u_tilde = w.get("Q"), w.get("R"), w.get("u_tilde")
            syn = d.get("synthesis", {})
            cfg.k_eta = tuple(syn.get("k_eta", cfg.k_eta))
            cfg.thetadot_bar = float(syn.get("thetadot_bar", cfg.thetadot_bar))
            cfg.Q_xi, cfg.R_xi = syn.get("Q_xi"), syn.get("R_xi")
            cfg.bisection_tol = float(syn.get("bisection_tol", cfg.bisection_tol))
            cfg.mpfc = dict(d.get("mpfc", {}))
            cfg.solver = dict(d.get("solver", {}))
            cfg.weights()
            cfg.mpfc_config()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def weights(self) -> CostWeights:
        w = CostWeights.for_path(self.path, self.params, self.Q, self.R)
        if self.u_tilde is not None:
            w = CostWeights(w.Q, w.R, np.asarray(self.u_tilde, dtype=float))
        return w

    def mpfc_config(self, mode: str = "path", thetadot_ref: float = 0.0,
                    t_end: float | None = None) -> MpfcConfig:
        kw = dict(self.mpfc)
        if t_end is not None:
            kw["t_end"] = t_end
        return MpfcConfig(weights=self.weights(), constraints=self.constraints.with_mode(mode),
                          params=self.params, path=self.path, mode=mode,
                          thetadot_ref=thetadot_ref, solver=SolverOptions(**self.solver), **kw)

    def synthesize(self) -> TerminalSet:
        return synthesize(self.params, self.path, self.constraints.with_mode("path"),
                          self.k_eta, self.thetadot_bar, self.Q_xi, self.R_xi,
                          self.bisection_tol)


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def load_config(path) -> Config:
    return Config() if path is None else Config.from_dict(load_json(path))


def load_scenarios(path) -> list[Scenario]:
    """A scenario file holds one scenario object or ``{"scenarios": [...]}``."""
    if path is None:
        return [Scenario()]
    d = load_json(path)
    items = d["scenarios"] if "scenarios" in d else [d]
    try:
        return [Scenario.from_dict(item) for item in items]
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad scenario in {path}: {exc}") from exc


def load_artifact(path, cfg: Config) -> TerminalSet:
    if path is None:
        return cfg.synthesize()
    try:
        return TerminalSet.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read artifact {path}: {exc.strerror}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad artifact {path}: {exc}") from exc


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MPFC_THREADS", "1")))
    except ValueError:
        raise ConfigError("MPFC_THREADS must be an integer") from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


# --------------------------------------------------------------------------
# synthesize

def cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    ts = cfg.synthesize()
    text = ts.dumps()
    if args.out:
        Path(args.out).write_text(text)
    P = ts.P
    print(f"gamma   = {ts.gamma:.6f}")
    print(f"gamma^2 = {ts.level:.6f}")
    print(f"n1      = ({ts.eta_poly.n1[0]:.6f}, {ts.eta_poly.n1[1]:.6f})")
    # P = [[P1, P2], [P2, P1]]
    print(f"P1      = diag({P[0, 0]:.6f}, {P[1, 1]:.6f})")
    print(f"P2      = diag({P[0, 2]:.6f}, {P[1, 3]:.6f})")
    print(f"K_xi    = {np.array2string(ts.xi_gain.K, precision=6)}")
    if args.out:
        print(f"artifact written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate

def log_rows(log: ClosedLoopLog, cfg: MpfcConfig):
    a = log.arrays()
    if len(log) == 0:
        return
    s = np.hstack([a["x"], a["z"]])
    e = path_error(s, cfg.path)
    cart = cartesian_output(s[:, 0:2], cfg.params)
    for k in range(len(log)):
        yield ([a["t"][k], *s[k], *a["u"][k], a["v"][k], *e[k], *cart[k],
                a["stage_cost"][k], a["ocp_cost"][k], a["status"][k], a["terminal_margin"][k]])


def write_csv(path: Path, log: ClosedLoopLog, cfg: MpfcConfig) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in log_rows(log, cfg):
            writer.writerow([x if isinstance(x, str) else repr(float(x)) for x in row])


def summarize(log: ClosedLoopLog, cfg: MpfcConfig, scenario: Scenario) -> dict:
    a = log.arrays()
    n = len(log)
    u_viol = int(np.sum(np.max(np.abs(a["u"]), axis=1) > cfg.constraints.u_max)) if n else 0
    qd_viol = int(np.sum(a["max_qdot_substep"] > cfg.constraints.qdot_max)) if n else 0
    return {
        "scenario": scenario.name,
        "mode": cfg.mode,
        "steps": n,
        "t_end": n * cfg.delta,
        "final_error_norm": log.final_error(cfg.path),
        "final_theta": float(log.final_z[0]),
        "final_thetadot": float(log.final_z[1]),
        "u_violations": u_viol,
        "qdot_violations": qd_viol,
        "infeasible_steps": int(np.sum(a["status"] == STATUS_INFEASIBLE)) if n else 0,
        "mean_solve_time": float(np.mean(a["solve_time"])) if n else 0.0,
        "aborted": log.aborted,
        "abort_reason": log.abort_reason,
    }


def _simulate_one(scenario: Scenario, cfg: Config, ts: TerminalSet, out: Path | None,
                  mode_override: str | None):
    mode = mode_override or scenario.mode
    mcfg = cfg.mpfc_config(mode, scenario.thetadot_ref, scenario.t_end)
    log = run(scenario, mcfg, ts)
    summary = summarize(log, mcfg, scenario)
    if out is not None:
        write_csv(out / f"{scenario.name}.csv", log, mcfg)
        (out / f"{scenario.name}_summary.json").write_text(
            json.dumps(summary, indent=2, default=float) + "\n")
    return summary


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scenarios = load_scenarios(args.scenario)
    ts = load_artifact(args.artifact, cfg)
    out = None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    try:
        for sc in scenarios:
            cfg.mpfc_config(args.mode or sc.mode, sc.thetadot_ref, sc.t_end)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with ThreadPoolExecutor(max_workers=min(worker_count(), len(scenarios))) as pool:
        summaries = list(pool.map(lambda sc: _simulate_one(sc, cfg, ts, out, args.mode), scenarios))
    _emit(summaries if len(summaries) > 1 else summaries[0])
    return EXIT_ABORT if any(s["aborted"] for s in summaries) else EXIT_OK


# --------------------------------------------------------------------------
# verify

def run_verification(ts: TerminalSet, cfg: Config, n_samples: int = 500, seed: int = 0,
                     horizon: float = 60.0) -> dict:
    report = verify_invariance(ts, cfg.params, cfg.path, cfg.constraints.with_mode("path"),
                               cfg.weights(), n_samples=n_samples, horizon=horizon, seed=seed)
    inv = report.summary()
    results = [checks.CheckResult("terminal-set invariance", report.passed,
                                  report.contained_fraction, 1.0, inv)]
    negative = verify_invariance(ts.with_level(10.0 * ts.level), cfg.params, cfg.path,
                                 cfg.constraints.with_mode("path"), cfg.weights(),
                                 n_samples=n_samples, horizon=horizon, seed=seed)
    results.append(checks.CheckResult(
        "negative control (10x level) loses containment", negative.contained_fraction < 1.0,
        negative.contained_fraction, 1.0))
    if np.isfinite(report.alpha_min) and report.alpha_min > 0:
        mcfg = cfg.mpfc_config()
        problem = mcfg.problem(np.concatenate([REFERENCE_X0, REFERENCE_Z0]), ts)
        results.append(checks.check_end_penalty_equivalence(problem, report.c_max,
                                                            report.alpha_min))
    else:
        results.append(checks.CheckResult("end-penalty equivalence (controls)", False,
                                          np.inf, 1e-6, {"reason": "no positive decay rate"}))
    results += [
        checks.check_bounds(ts, seed=seed, params=cfg.params, path=cfg.path,
                            constraints=cfg.constraints),
        checks.check_care(ts),
        checks.check_phi_roundtrip(seed=seed, path=cfg.path),
        checks.check_vector_field(seed=seed, params=cfg.params, path=cfg.path),
        checks.check_integrator_order(params=cfg.params, seed=seed),
    ]
    return {"passed": all(r.passed for r in results),
            "checks": [r.to_dict() for r in results],
            "lines": [r.line() for r in results]}


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    ts = load_artifact(args.artifact, cfg)
    if args.samples < 1:
        raise ConfigError("--samples must be >= 1")
    rep = run_verification(ts, cfg, args.samples, args.seed)
    for line in rep.pop("lines"):
        print(line)
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=2, default=float) + "\n")
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


# --------------------------------------------------------------------------
# oracle

def oracle_gravity_offset(cfg: Config) -> dict:
    q_end = cfg.path.value(cfg.path.theta1)
    return {"q_end": q_end.tolist(), "g(p(theta1))": gravity(q_end, cfg.params).tolist(),
            "printed_reference": list(REFERENCE_OFFSET)}


def oracle_care(cfg: Config) -> dict:
    # double integrator, Q = I, R = I: P = [[sqrt3 I, I], [I, sqrt3 I]]
    r3 = np.sqrt(3.0)
    analytic = np.block([[r3 * np.eye(2), np.eye(2)], [np.eye(2), r3 * np.eye(2)]])
    numeric = solve_care().P
    return {"analytic_P": analytic.tolist(), "numeric_P": numeric.tolist(),
            "max_difference": float(np.max(np.abs(analytic - numeric))),
            # roots of l^2 + sqrt3 l + 1, as (real, imag)
            "closed_loop_eigenvalues": [[-r3 / 2, 0.5], [-r3 / 2, -0.5]]}


def oracle_eta_gain(cfg: Config) -> dict:
    k1, k2 = cfg.k_eta
    disc = k2**2 + 4 * k1
    lam = sorted([(k2 + np.sqrt(disc)) / 2, (k2 - np.sqrt(disc)) / 2], reverse=True)
    fast = lam[1]
    n = np.array([-fast, 1.0]) / np.hypot(fast, 1.0)
    return {"eigenvalues": lam, "fast_eigenvector": [1.0, fast], "n1": n.tolist()}


def oracle_gain_conditions(cfg: Config) -> dict:
    k1, k2 = cfg.k_eta
    return {"k1 < 0": k1 < 0, "k2 < 0": k2 < 0,
            "k2^2 > -4 k1": bool(k2**2 > -4 * k1), "k2^2 + 4 k1": k2**2 + 4 * k1}


def oracle_bounds(cfg: Config) -> dict:
    ts = cfg.synthesize()
    return {"bounds": ts.bounds.to_dict(),
            "grid_maxima": checks.grid_maxima(ts, cfg.params, cfg.path, cfg.constraints)}


ORACLES = {
    "gravity-offset": oracle_gravity_offset,
    "care": oracle_care,
    "eta-gain": oracle_eta_gain,
    "gain-conditions": oracle_gain_conditions,
    "bounds": oracle_bounds,
}


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    names = list(ORACLES) if args.name == "all" else [args.name]
    _emit({name: ORACLES[name](cfg) for name in names})
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpfc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="compute the terminal-set artifact")
    s.add_argument("--config")
    s.add_argument("--out", help="artifact file to write")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("simulate", help="run closed-loop scenarios")
    s.add_argument("--config")
    s.add_argument("--scenario", help="scenario JSON (single or {'scenarios': [...]})")
    s.add_argument("--artifact", help="terminal-set artifact (synthesized if omitted)")
    s.add_argument("--out", help="output directory for CSV logs and summaries")
    s.add_argument("--mode", choices=("path", "velocity"), help="override the scenario mode")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", help="run the verification suite on an artifact")
    s.add_argument("--config")
    s.add_argument("--artifact")
    s.add_argument("--samples", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="machine-readable JSON report")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("oracle", help="print independent reference values")
    s.add_argument("name", choices=(*ORACLES, "all"))
    s.add_argument("--config")
    s.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (ConfigError, SynthesisError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command in ("simulate", "verify"):
        print(f"elapsed {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
