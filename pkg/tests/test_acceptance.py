"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Closed-loop runs last 15 s by default.  ``MPFC_ACCEPTANCE_T_END`` shortens
them for development; the thresholds stay the same.
"""
import os
import time

import numpy as np
import pytest

from mpfc import checks
from mpfc.loop import REFERENCE_X0, REFERENCE_Z0, MpfcConfig, Scenario, run
from mpfc.ocp import STATUS_INFEASIBLE, OcpProblem
from mpfc.terminal_set import synthesize, verify_invariance

T_END = float(os.environ.get("MPFC_ACCEPTANCE_T_END", "15.0"))
E_TOL = 1e-2
THETA_TOL = 1e-2
DESCENT_SLACK = 1e-3

# the reference start plus four more, spread along the path and off it
INITIAL_CONDITIONS = [
    Scenario("reference", REFERENCE_X0, REFERENCE_Z0),
    Scenario("off-path-early", (-5.0, 2.0, 0.0, 0.0), None),
    Scenario("below-trough", (-4.0, -4.0, 0.0, 0.0), None),
    Scenario("moving", (-2.5, -3.5, 0.5, -0.5), None),
    Scenario("late", (-1.5, -2.0, 0.0, 0.0), None),
]

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(criterion, passed, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")
    return emit


@pytest.fixture(scope="module")
def invariance(terminal):
    return verify_invariance(terminal, n_samples=500, horizon=60.0, seed=0)


@pytest.fixture(scope="module")
def path_runs(terminal, invariance):
    cfg = MpfcConfig(t_end=T_END, penalty=(invariance.c_max, invariance.alpha_min))
    return {sc.name: run(sc, cfg, terminal) for sc in INITIAL_CONDITIONS}


@pytest.fixture(scope="module")
def velocity_run(terminal):
    cfg = MpfcConfig(t_end=T_END, mode="velocity", thetadot_ref=0.2)
    return run(Scenario("velocity", REFERENCE_X0, None, mode="velocity", thetadot_ref=0.2),
               cfg, terminal)


def convergence(log, cfg=MpfcConfig()):
    """Criterion 2 thresholds for one closed-loop log."""
    a = log.arrays()
    theta_final = float(log.final_z[0])
    out = {
        "final_e": log.final_error(),
        "e_below": bool(np.any(a["e_norm"] < E_TOL)) or log.final_error() < E_TOL,
        "final_theta": theta_final,
        "u_violations": int(np.sum(np.abs(a["u"]) > cfg.constraints.u_max)),
        "qdot_violations": int(np.sum(a["max_qdot_substep"] > cfg.constraints.qdot_max)),
        "infeasible": int(np.sum(a["status"][1:] == STATUS_INFEASIBLE)) + int(log.aborted),
    }
    out["passed"] = (out["e_below"] and log.final_error() < E_TOL
                     and abs(theta_final) < THETA_TOL and out["u_violations"] == 0
                     and out["qdot_violations"] == 0 and out["infeasible"] == 0)
    return out


def test_criterion_1_terminal_set_reproduction(report):
    t0 = time.perf_counter()
    ts = synthesize()
    elapsed = time.perf_counter() - t0
    P = ts.P
    n1_err = float(np.max(np.abs(np.subtract(ts.eta_poly.n1, [0.78, 0.63]))))
    P1_err = float(np.max(np.abs(P[0:2, 0:2] - 1.73 * np.eye(2))))
    P2_err = float(np.max(np.abs(P[0:2, 2:4] - np.eye(2))))
    level_rel = abs(ts.level - 3.13) / 3.13
    passed = n1_err < 0.01 and P1_err < 0.01 and P2_err < 0.01 and level_rel < 0.1 and elapsed < 60
    report(1, passed, f"n1 err {n1_err:.4f}, P1 err {P1_err:.4f}, P2 err {P2_err:.2e}, "
                      f"level {ts.level:.4f} ({100 * level_rel:.1f}% off 3.13), {elapsed:.1f} s")
    assert passed


def test_criterion_2_reference_closed_loop(path_runs, report):
    res = convergence(path_runs["reference"])
    report(2, res["passed"], f"final |e| {res['final_e']:.2e}, final theta {res['final_theta']:.4f}, "
                             f"u/qdot violations {res['u_violations']}/{res['qdot_violations']}, "
                             f"infeasible {res['infeasible']}, t_end {T_END} s")
    assert res["passed"]


def test_criterion_3_multi_start(path_runs, report):
    results = {name: convergence(log) for name, log in path_runs.items()}
    passed = len(results) >= 5 and all(r["passed"] for r in results.values())
    detail = "; ".join(f"{name}: |e| {r['final_e']:.1e}, theta {r['final_theta']:.3f}"
                       for name, r in results.items())
    report(3, passed, detail)
    assert passed


def test_criterion_4_invariance_certificate(terminal, invariance, report):
    negative = verify_invariance(terminal.with_level(10.0 * terminal.level),
                                 n_samples=500, horizon=60.0, seed=0)
    passed = (invariance.contained_fraction == 1.0 and invariance.max_box_violation <= 0.0
              and invariance.all_alpha_positive and negative.contained_fraction < 1.0)
    report(4, passed, f"containment {invariance.contained_fraction:.3f}, box violation "
                      f"{invariance.max_box_violation:.2e}, alpha_min {invariance.alpha_min:.4f}, "
                      f"10x level containment {negative.contained_fraction:.3f}")
    assert passed


def test_criterion_5_end_penalty_equivalence(terminal, invariance, report):
    problem = OcpProblem(np.concatenate([REFERENCE_X0, REFERENCE_Z0]), terminal)
    r = checks.check_end_penalty_equivalence(problem, invariance.c_max, invariance.alpha_min)
    report(5, r.passed, f"control difference {r.value:.2e}, cost error {r.details['cost_error']:.2e}")
    assert r.passed


def test_criterion_6_descent(path_runs, report):
    plain, penalized = path_runs["reference"].descent_margins()
    frac = float(np.mean(penalized <= DESCENT_SLACK))
    frac_plain = float(np.mean(plain <= DESCENT_SLACK))
    passed = frac >= 0.99
    report(6, passed, f"penalized value descends on {100 * frac:.2f}% of steps "
                      f"(plain value {100 * frac_plain:.2f}%)")
    assert passed


def test_criterion_7_velocity_assignment(velocity_run, report):
    log = velocity_run
    a = log.arrays()
    after = a["t"] >= min(5.0, T_END / 2)
    speed_err = float(np.max(np.abs(a["z"][after, 1] - 0.2)))
    e_max = float(np.max(a["e_norm"][after]))
    infeasible = int(np.sum(a["status"][1:] == STATUS_INFEASIBLE)) + int(log.aborted)
    forward = float(log.final_z[0] - a["z"][after][0, 0])
    passed = speed_err < 1e-2 and e_max < E_TOL and infeasible == 0 and forward > 0
    report(7, passed, f"after t={a['t'][after][0]:.1f} s: max |thetadot - 0.2| {speed_err:.2e}, "
                      f"max |e| {e_max:.2e}, infeasible {infeasible}, theta advanced {forward:.3f}")
    assert passed


def test_criterion_8_numerical_hygiene(terminal, report):
    results = [checks.check_care(terminal), checks.check_phi_roundtrip(n=1000),
               checks.check_vector_field(n=200), checks.check_integrator_order()]
    passed = all(r.passed for r in results)
    report(8, passed, "; ".join(f"{r.name} {r.value:.3g}" for r in results))
    assert passed
