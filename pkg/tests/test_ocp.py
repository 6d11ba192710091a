import numpy as np
import pytest

from mpfc.dynamics import DEFAULT_PATH, NS
from mpfc.loop import REFERENCE_X0, REFERENCE_Z0
from mpfc.ocp import (
    BLOCK,
    STATUS_ACCEPTABLE,
    STATUS_MAX_ITER,
    Guess,
    OcpProblem,
    SolverOptions,
    Transcription,
    shift_warm_start,
    solve,
    terminal_pair,
)

S0 = np.concatenate([REFERENCE_X0, REFERENCE_Z0])


def path_end_state():
    return np.concatenate([DEFAULT_PATH.value(0.0), [0.0, 0.0, 0.0, 0.0]])


@pytest.fixture(scope="module")
def nlp(terminal):
    return Transcription(OcpProblem(S0, terminal))


@pytest.fixture(scope="module")
def cold(nlp):
    return solve(nlp)


def test_decision_dimension(nlp):
    assert nlp.n == 180 == BLOCK * nlp.N
    guess = nlp.cold_start()
    nodes, controls = nlp.split(nlp.join(guess.nodes, guess.controls))
    np.testing.assert_array_equal(nodes, guess.nodes)
    np.testing.assert_array_equal(controls, guess.controls)


def test_defects_vanish_on_rollout(nlp, rng):
    controls = np.column_stack([rng.uniform(-500, 500, (nlp.N, 2)), rng.uniform(-1, 1, nlp.N)])
    nodes = nlp.rollout(controls)
    ev = nlp.evaluate(nlp.join(nodes, controls))
    assert np.max(np.abs(ev.c_eq)) == 0.0


def _central_fd(fun, y, step):
    cols = []
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = step * (1.0 + abs(y[j]))
        cols.append((fun(y + e) - fun(y - e)) / (2 * e[j]))
    return np.array(cols).T


def test_gradient_and_defect_jacobian_match_finite_differences(nlp):
    guess = nlp.cold_start()
    y = nlp.join(guess.nodes, guess.controls)
    y = y + 1e-3 * np.sin(np.arange(y.size))
    ev = nlp.evaluate(y, derivatives=True)
    g_fd = _central_fd(lambda x: np.array([nlp.evaluate(x).f]), y, 1e-5)[0]
    assert np.max(np.abs(ev.grad - g_fd)) < 1e-4 * (1.0 + np.max(np.abs(g_fd)))
    J_fd = _central_fd(lambda x: nlp.evaluate(x).c_eq, y, 1e-6)
    assert np.max(np.abs(ev.J_eq.toarray() - J_fd)) < 1e-4 * (1.0 + np.max(np.abs(J_fd)))


def test_resting_at_path_end_costs_nothing(terminal):
    nlp = Transcription(OcpProblem(path_end_state(), terminal))
    w = np.concatenate([nlp.p.weights.u_tilde, [0.0]])
    controls = np.tile(w, (nlp.N, 1))
    ev = nlp.evaluate(nlp.join(nlp.rollout(controls), controls))
    assert ev.f < 1e-4
    assert ev.violation == 0.0
    # the terminal controller reproduces the holding torque there
    np.testing.assert_allclose(terminal_pair(path_end_state(), nlp.p), w, atol=1e-9)


def test_cold_solve_from_reference_start(nlp, cold):
    assert cold.converged
    con = nlp.p.constraints
    assert np.max(np.abs(cold.u_traj)) <= con.u_max + 1e-9
    ev = nlp.evaluate(nlp.join(cold.nodes, cold.controls))
    assert np.max(np.abs(ev.c_eq)) < 1e-8
    assert ev.violation < 1e-6
    assert cold.terminal_margin >= -1e-6
    assert cold.kkt_residual < nlp.options.tol


def test_solution_improves_on_initial_guess(nlp, cold):
    guess = nlp.cold_start()
    assert cold.cost <= nlp.evaluate(nlp.join(guess.nodes, guess.controls)).f


def test_warm_start_needs_no_more_iterations(nlp, cold):
    warm = solve(nlp, Guess(cold.nodes, cold.controls))
    assert warm.converged
    assert warm.iterations <= cold.iterations
    assert warm.cost == pytest.approx(cold.cost, rel=1e-6)


def test_solve_is_deterministic(nlp, cold):
    again = solve(nlp)
    np.testing.assert_array_equal(again.controls, cold.controls)
    assert again.cost == cold.cost


def test_unreachable_tolerance_stops_at_noise_floor(nlp, cold):
    # finite-difference noise keeps the residual near 5e-7, far above 1e-9
    sol = solve(nlp, Guess(cold.nodes, cold.controls), SolverOptions(tol=1e-9))
    assert sol.status == STATUS_ACCEPTABLE and sol.converged
    assert sol.cost == pytest.approx(cold.cost, rel=1e-8)
    strict = SolverOptions(tol=1e-9, acceptable_tol=1e-9, max_iter=5)
    sol = solve(nlp, Guess(cold.nodes, cold.controls), strict)
    assert sol.status == STATUS_MAX_ITER and not sol.converged
    assert sol.iterations == 5


def test_wrong_warm_start_dimension_raises(nlp):
    guess = nlp.cold_start()
    with pytest.raises(ValueError):
        solve(nlp, Guess(guess.nodes[:-1], guess.controls))


def test_shifted_equilibrium_stays_put(terminal):
    nlp = Transcription(OcpProblem(path_end_state(), terminal))
    sol = solve(nlp)
    assert sol.converged
    shifted = shift_warm_start(sol, 0.005)
    np.testing.assert_allclose(shifted.nodes, sol.nodes, atol=1e-6)
    np.testing.assert_allclose(shifted.controls, sol.controls, atol=1e-6)


def test_shift_averages_controls_onto_the_grid(cold):
    dt, delta = cold.interval, 0.005
    shifted = shift_warm_start(cold, delta)
    prev = cold.controls
    tail = terminal_pair(cold.nodes[-1], cold.problem)
    a = delta / dt
    np.testing.assert_allclose(shifted.controls[:-1], (1 - a) * prev[:-1] + a * prev[1:])
    np.testing.assert_allclose(shifted.controls[-1], (1 - a) * prev[-1] + a * tail)
    assert shifted.nodes.shape == (cold.problem.n_intervals + 1, NS)


def test_shift_rejects_off_grid_delta(cold):
    with pytest.raises(ValueError):
        shift_warm_start(cold, 0.0012)
    with pytest.raises(ValueError):
        shift_warm_start(cold, cold.interval)


def test_problem_validation(terminal):
    with pytest.raises(ValueError):
        OcpProblem(S0, terminal, mode="bogus")
    with pytest.raises(ValueError):
        OcpProblem(S0, terminal, substeps=16)
    with pytest.raises(ValueError):
        OcpProblem(S0, terminal, n_intervals=1)


def test_velocity_mode_solve(terminal):
    s0 = np.concatenate([DEFAULT_PATH.value(-5.0), [0.0, 0.0, -5.0, 0.0]])
    nlp = Transcription(OcpProblem(s0, terminal, mode="velocity", thetadot_ref=0.2))
    sol = solve(nlp)
    assert sol.converged
    assert sol.terminal_margin >= -1e-6
    # the timing law is pushed forward toward the reference speed
    assert sol.nodes[-1, 5] > 0.1
