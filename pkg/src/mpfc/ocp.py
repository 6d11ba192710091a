"""Direct multiple-shooting transcription of the path-following OCP and an SQP solver.

Decision vector layout, one block of nine per shooting interval::

    y = (w_0, s_1, w_1, s_2, ..., w_{N-1}, s_N)

with ``w_i = (u1, u2, v)`` held constant on interval ``i`` and ``s_i`` the node
state.  ``s_0`` is the fixed initial condition.  Each interval is integrated
with ``substeps`` RK4 steps; the same stages give the cost quadrature, so the
objective is an exact weighted sum of squares and a Gauss-Newton Hessian is
available from first derivatives alone.  Derivatives of the flow are forward
differences computed in one batched RK4 pass.

QP subproblems are solved with Clarabel.  Globalization uses an l1 merit
function with Armijo backtracking and an elastic QP when the linearization is
inconsistent.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import clarabel
import numpy as np
import scipy.sparse as sp

from .batch_rk4 import rk4_batch
from .cost import CostWeights, stage_cost, state_residuals
from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    NS,
    NW,
    ConstraintSet,
    IntegrationError,
    PathSpec,
    RobotParams,
)
from .terminal_set import SpeedBand, TerminalSet, membership
from .transverse import feedforward_torque, terminal_u, terminal_v, to_transverse

BLOCK = NW + NS
STATUS_CONVERGED = "converged"
# KKT residual stuck between tol and acceptable_tol with no merit decrease left
STATUS_ACCEPTABLE = "acceptable"
STATUS_MAX_ITER = "max-iter"
STATUS_INFEASIBLE = "infeasible"
_MERIT_NOISE = 1e3 * np.finfo(float).eps


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6
    acceptable_tol: float = 1e-4
    max_iter: int = 200
    fd_step: float = 1e-6
    # central differences trade twice the integrations for O(step^2) error
    fd_central: bool = False
    infeasible_tol: float = 1e-4
    armijo: float = 1e-4
    min_alpha: float = 2.0**-20
    regularization: float = 1e-9

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class OcpProblem:
    s0: np.ndarray
    terminal: TerminalSet
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    weights: CostWeights | None = None
    params: RobotParams = DEFAULT_PARAMS
    path: PathSpec = DEFAULT_PATH
    horizon: float = 0.75
    n_intervals: int = 20
    substeps: int = 15
    samples_per_interval: int = 2
    mode: str = "path"
    thetadot_ref: float = 0.0
    speed_band: SpeedBand | None = None
    t_start: float = 0.0
    end_penalty: Callable[[float], float] | None = None

    def __post_init__(self):
        self.s0 = np.asarray(self.s0, dtype=float).reshape(NS)
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_intervals < 2:
            raise ValueError("need at least two shooting intervals")
        if self.substeps % (self.samples_per_interval + 1):
            raise ValueError("substeps must split evenly around the interior samples")
        if self.mode not in ("path", "velocity"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.constraints = self.constraints.with_mode(self.mode)
        if self.weights is None:
            self.weights = CostWeights.for_path(self.path, self.params)
        if self.mode == "velocity" and self.speed_band is None:
            self.speed_band = SpeedBand(self.thetadot_ref)

    @property
    def interval(self) -> float:
        return self.horizon / self.n_intervals

    @property
    def h(self) -> float:
        return self.interval / self.substeps

    def penalty_value(self) -> float:
        if self.end_penalty is None:
            return 0.0
        return float(self.end_penalty(self.t_start + self.horizon))


def terminal_pair(s, problem: OcpProblem, v_gain: float | None = None) -> np.ndarray:
    """Terminal controls ``(u_E, v_E)`` clipped to the input boxes."""
    c = to_transverse(s, problem.path)
    eta = c[..., 4:6]
    ts = problem.terminal
    if problem.mode == "velocity":
        k = problem.speed_band.k if v_gain is None else v_gain
        v = -k * (eta[..., 1] - problem.speed_band.thetadot_ref)
    else:
        v = terminal_v(eta, ts.eta_gain)
    con = problem.constraints
    v = np.clip(v, con.v_min, con.v_max)
    u = terminal_u(c, ts.xi_gain, ts.eta_gain, problem.params, problem.path, v=v)
    u = np.clip(u, -con.u_max, con.u_max)
    return np.concatenate([u, np.asarray(v)[..., None]], axis=-1)


@dataclass
class Guess:
    nodes: np.ndarray  # (N+1, 6)
    controls: np.ndarray  # (N, 3)


@dataclass
class Evaluation:
    f: float
    c_eq: np.ndarray
    g_in: np.ndarray  # all inequalities, <= 0 when feasible
    grad: np.ndarray | None = None
    H: np.ndarray | None = None
    J_eq: np.ndarray | None = None
    J_in: np.ndarray | None = None

    @property
    def violation(self) -> float:
        return max(float(np.max(np.abs(self.c_eq), initial=0.0)),
                   float(np.max(self.g_in, initial=0.0)))

    @property
    def violation_l1(self) -> float:
        return float(np.sum(np.abs(self.c_eq)) + np.sum(np.maximum(self.g_in, 0.0)))


class Transcription:
    """The NLP obtained from an :class:`OcpProblem` (layout, constraints, evaluators)."""

    def __init__(self, problem: OcpProblem, options: SolverOptions | None = None):
        self.p = problem
        self.options = options or SolverOptions()
        N = problem.n_intervals
        self.N = N
        self.n = BLOCK * N
        self.M = problem.substeps
        stride = self.M // (problem.samples_per_interval + 1)
        self.sample_steps = [stride * (k + 1) for k in range(problem.samples_per_interval)]
        diag = problem.weights.diag
        stage_w = problem.h / 6.0 * np.array([1.0, 2.0, 2.0, 1.0])
        # the velocity-mode torque residual depends on the state: it joins the
        # stage-point residuals instead of the per-interval control residual
        self.torque_at_stages = problem.mode == "velocity"
        n_res = 7 if self.torque_at_stages else 5
        # sqrt weights for stage-point residuals, shape (M, 4, n_res)
        self.sqrt_state_w = np.sqrt(np.broadcast_to(stage_w[:, None] * diag[:n_res],
                                                    (self.M, 4, n_res)))
        ctrl_w = diag[5:].copy()
        if self.torque_at_stages:
            ctrl_w[0:2] = 0.0
        self.sqrt_ctrl_w = np.sqrt(problem.interval * ctrl_w)
        self.w_ref = np.concatenate([problem.weights.u_tilde, [0.0]])
        self._build_linear_rows()
        self.n_nl_sample = (4 + (3 if problem.constraints.constrain_z else 0))
        self.n_eq = NS * N
        self._build_index_tables()

    # ---------------------------------------------------------------- layout
    def w_slice(self, i: int) -> slice:
        return slice(BLOCK * i, BLOCK * i + NW)

    def s_slice(self, i: int) -> slice:
        """Slice of node ``s_i`` for ``i >= 1``."""
        return slice(BLOCK * (i - 1) + NW, BLOCK * i)

    def split(self, y) -> tuple[np.ndarray, np.ndarray]:
        blocks = np.asarray(y, dtype=float).reshape(self.N, BLOCK)
        nodes = np.vstack([self.p.s0, blocks[:, NW:]])
        return nodes, blocks[:, :NW].copy()

    def join(self, nodes, controls) -> np.ndarray:
        return np.hstack([np.asarray(controls), np.asarray(nodes)[1:]]).ravel()

    # ---------------------------------------------------------- integration
    def propagate(self, starts, controls, with_cost: bool = True):
        """Integrate every row over one shooting interval.

        Returns end states ``(B, 6)``, interior samples ``(B, K, 6)`` and the
        weighted state residuals ``(B, M*4*5)`` (or None).
        """
        p = self.p
        stride = self.sample_steps[0] if self.sample_steps else 0
        ends, samples, stages = rk4_batch(starts, controls, p.params, p.h, self.M,
                                          stride, record_stages=with_cost)
        res = None
        if with_cost:
            r = state_residuals(stages, p.path, p.mode, p.thetadot_ref)
            if self.torque_at_stages:
                v = np.broadcast_to(controls[:, 2], stages.shape[:-1])
                du = controls[:, 0:2] - feedforward_torque(stages, v, p.params, p.path)
                r = np.concatenate([r, du], axis=-1)
            r = r * self.sqrt_state_w[:, :, None, :]
            res = np.moveaxis(r, 2, 0).reshape(ends.shape[0], -1)
        return ends, samples, res

    def flow(self, starts, controls) -> np.ndarray:
        return self.propagate(starts, controls, with_cost=False)[0]

    def rollout(self, controls, s0=None) -> np.ndarray:
        nodes = np.empty((self.N + 1, NS))
        nodes[0] = self.p.s0 if s0 is None else s0
        for i in range(self.N):
            nodes[i + 1] = self.flow(nodes[i:i + 1], controls[i:i + 1])[0]
        return nodes

    # ----------------------------------------------------------- constraints
    def _build_linear_rows(self):
        """Input boxes, node boxes and the terminal polytope as ``A y <= b``."""
        p, con = self.p, self.p.constraints
        rows, rhs = [], []

        def add(idx, coef, bound):
            r = np.zeros(self.n)
            r[idx] = coef
            rows.append(r)
            rhs.append(bound)

        for i in range(self.N):
            w = self.w_slice(i).start
            for j in range(2):
                add(w + j, 1.0, con.u_max)
                add(w + j, -1.0, con.u_max)
            add(w + 2, 1.0, con.v_max)
            add(w + 2, -1.0, -con.v_min)
            s = self.s_slice(i + 1).start
            for j in (2, 3):
                add(s + j, 1.0, con.qdot_max)
                add(s + j, -1.0, con.qdot_max)
            if con.constrain_z:
                add(s + 4, 1.0, p.path.theta1)
                add(s + 4, -1.0, -p.path.theta0)
                add(s + 5, -1.0, 0.0)
        sN = self.s_slice(self.N).start
        if p.mode == "velocity":
            band = p.speed_band
            add(sN + 5, 1.0, band.thetadot_ref + band.half_width)
            add(sN + 5, -1.0, band.half_width - band.thetadot_ref)
        else:
            poly = p.terminal.eta_poly
            add(sN + 4, -1.0, -poly.theta0)
            add(sN + 4, 1.0, 0.0)
            add(sN + 5, -1.0, 0.0)
            add(sN + 5, 1.0, poly.thetadot_bar)
            r = np.zeros(self.n)
            r[sN + 4], r[sN + 5] = poly.n1
            rows.append(r)
            rhs.append(0.0)
        self.A_lin = np.array(rows)
        self.b_lin = np.array(rhs)

    def _sample_constraints(self, samples):
        """Box rows for interior samples, ``(..., 4 or 7)`` values ``<= 0``."""
        con = self.p.constraints
        qd = samples[..., 2:4]
        parts = [qd - con.qdot_max, -qd - con.qdot_max]
        if con.constrain_z:
            th, thd = samples[..., 4:5], samples[..., 5:6]
            parts += [th - self.p.path.theta1, self.p.path.theta0 - th, -thd]
        return np.concatenate(parts, axis=-1)

    def _ellipsoid(self, sN):
        """Terminal ellipsoid value ``xi^T P xi - level`` and its gradient in ``s_N``."""
        path, P = self.p.path, self.p.terminal.P
        xi = to_transverse(sN, path)[0:4]
        th, thd = sN[4], sN[5]
        d1, d2 = path.deriv1(th), path.deriv2(th)
        J = np.zeros((4, NS))
        J[0:2, 0:2] = np.eye(2)
        J[2:4, 2:4] = np.eye(2)
        J[0:2, 4] = -d1
        J[2:4, 4] = -d2 * thd
        J[2:4, 5] = -d1
        Pxi = P @ xi
        return float(xi @ Pxi - self.p.terminal.level), 2.0 * Pxi @ J

    # ------------------------------------------------------------ evaluation
    def _control_residual(self, controls):
        return (controls - self.w_ref) * self.sqrt_ctrl_w

    def evaluate(self, y, derivatives: bool = False) -> Evaluation:
        nodes, controls = self.split(y)
        N, K = self.N, len(self.sample_steps)
        starts = nodes[:-1]
        if not derivatives:
            ends, samples, res = self.propagate(starts, controls)
        else:
            # base row plus one (or two) perturbed rows per (state, control) column
            x0 = np.hstack([starts, controls])  # (N, 9)
            steps = self.options.fd_step * (1.0 + np.abs(x0))
            central = self.options.fd_central
            n_rows = 2 * BLOCK + 1 if central else BLOCK + 1
            batch = np.repeat(x0[:, None, :], n_rows, axis=1)
            idx = np.arange(BLOCK)
            batch[:, idx + 1, idx] += steps
            if central:
                batch[:, idx + 1 + BLOCK, idx] -= steps
            flat = batch.reshape(-1, BLOCK)
            e_all, smp_all, res_all = self.propagate(flat[:, :NS], flat[:, NS:])
            e_all = e_all.reshape(N, n_rows, NS)
            smp_all = smp_all.reshape(N, n_rows, K, NS)
            res_all = res_all.reshape(N, n_rows, -1)
            ends, samples, res = e_all[:, 0], smp_all[:, 0], res_all[:, 0]
            if central:
                inv = 0.5 / steps
                lo_e, lo_s, lo_r = e_all[:, BLOCK + 1:], smp_all[:, BLOCK + 1:], res_all[:, BLOCK + 1:]
            else:
                inv = 1.0 / steps
                lo_e, lo_s, lo_r = ends[:, None], samples[:, None], res[:, None]
            dE = (e_all[:, 1:BLOCK + 1] - lo_e) * inv[:, :, None]  # (N, 9, 6)
            dS = (smp_all[:, 1:BLOCK + 1] - lo_s) * inv[:, :, None, None]  # (N, 9, K, 6)
            dR = (res_all[:, 1:BLOCK + 1] - lo_r) * inv[:, :, None]  # (N, 9, R)

        ctrl_res = self._control_residual(controls)
        f = float(np.sum(res**2) + np.sum(ctrl_res**2)) + self.p.penalty_value()
        c_eq = (ends - nodes[1:]).ravel()
        g_smp = self._sample_constraints(samples).ravel()
        g_ell, ell_grad = self._ellipsoid(nodes[-1])
        y = np.asarray(y, dtype=float)
        g_lin = self.A_lin @ y - self.b_lin
        g_in = np.concatenate([g_lin, g_smp, [g_ell]])
        ev = Evaluation(f, c_eq, g_in)
        if not derivatives:
            return ev

        n, cols = self.n, self._cols
        Hb = 2.0 * np.einsum("nkr,nlr->nkl", dR, dR)
        gb = 2.0 * np.einsum("nkr,nr->nk", dR, res)
        # analytic control residual (linear in w)
        gb[:, NS:] += 2.0 * self.sqrt_ctrl_w * ctrl_res
        Hb[:, NS:, NS:] += np.diag(2.0 * self.sqrt_ctrl_w**2)
        grad = np.bincount(cols.ravel(), weights=gb.ravel(), minlength=n + 1)[:n]
        H = self._assemble(Hb, self._H_rows, self._H_cols, (n, n))
        H = (H + sp.diags(np.full(n, self.options.regularization))).tocsc()
        # defects: d end / d column, minus identity on the next node
        J_eq = self._assemble(
            np.concatenate([np.swapaxes(dE, 1, 2).ravel(), -np.ones(self.n_eq)]),
            self._Jeq_rows, self._Jeq_cols, (self.n_eq, n))
        J_smp = self._assemble(self._sample_jacobian(dS), self._Js_rows, self._Js_cols,
                               (g_smp.size, n))
        J_ell = sp.csr_matrix((ell_grad, (np.zeros(NS, int), np.arange(*self.s_slice(N).indices(n)))),
                              shape=(1, n))
        ev.grad, ev.H = grad, H
        ev.J_eq = J_eq.tocsc()
        ev.J_in = sp.vstack([self._A_lin_sparse, J_smp, J_ell]).tocsc()
        return ev

    def _build_index_tables(self):
        """Sparse coordinates of the per-interval derivative blocks."""
        N, n, K = self.N, self.n, len(self.sample_steps)
        cols = np.stack([self._interval_columns(i) for i in range(N)])
        # s_0 columns go to a dummy slot that _assemble drops
        self._cols = np.where(cols < 0, n, cols)
        self._H_rows = np.broadcast_to(self._cols[:, :, None], (N, BLOCK, BLOCK)).ravel()
        self._H_cols = np.broadcast_to(self._cols[:, None, :], (N, BLOCK, BLOCK)).ravel()
        eq_rows = NS * np.arange(N)[:, None, None] + np.arange(NS)[None, :, None]
        r1 = np.broadcast_to(eq_rows, (N, NS, BLOCK)).ravel()
        c1 = np.broadcast_to(self._cols[:, None, :], (N, NS, BLOCK)).ravel()
        nxt = np.concatenate([np.arange(*self.s_slice(i + 1).indices(n)) for i in range(N)])
        self._Jeq_rows = np.concatenate([r1, np.arange(self.n_eq)])
        self._Jeq_cols = np.concatenate([c1, nxt])
        per = K * self.n_nl_sample
        s_rows = per * np.arange(N)[:, None, None] + np.arange(per)[None, :, None]
        self._Js_rows = np.broadcast_to(s_rows, (N, per, BLOCK)).ravel()
        self._Js_cols = np.broadcast_to(self._cols[:, None, :], (N, per, BLOCK)).ravel()
        self._A_lin_sparse = sp.csr_matrix(self.A_lin)

    def _assemble(self, data, rows, cols, shape):
        data = np.ravel(data)
        keep = (cols < shape[1]) & (rows < shape[0])
        return sp.coo_matrix((data[keep], (rows[keep], cols[keep])), shape=shape)

    def _interval_columns(self, i: int) -> np.ndarray:
        if i == 0:
            s_cols = np.full(NS, -1)
        else:
            sl = self.s_slice(i)
            s_cols = np.arange(sl.start, sl.stop)
        w = self.w_slice(i)
        return np.concatenate([s_cols, np.arange(w.start, w.stop)])

    def _sample_jacobian(self, dS):
        """Chain the (linear) sample box rows through ``d sample / d column``.

        ``dS`` has shape (N, 9, K, 6); the result is (N, K * rows, 9) in the row
        order of ``_sample_constraints(samples).ravel()``.
        """
        qd = dS[..., 2:4]
        parts = [qd, -qd]
        if self.p.constraints.constrain_z:
            parts += [dS[..., 4:5], -dS[..., 4:5], -dS[..., 5:6]]
        g = np.concatenate(parts, axis=-1)  # (N, 9, K, r)
        return np.moveaxis(g, 1, -1).reshape(g.shape[0], -1, g.shape[1])

    # ---------------------------------------------------------------- starts
    def cold_start(self) -> Guess:
        """Zero-order-hold rollout of the clipped terminal controller."""
        p = self.p
        nodes = np.empty((self.N + 1, NS))
        controls = np.empty((self.N, NW))
        nodes[0] = p.s0
        v_gain = None
        if p.mode == "velocity":
            # reach the speed band within the horizon
            v_gain = max(p.speed_band.k, 8.0 / p.horizon)
        for i in range(self.N):
            controls[i] = terminal_pair(nodes[i], p, v_gain)
            nodes[i + 1] = self.flow(nodes[i:i + 1], controls[i:i + 1])[0]
        return Guess(nodes, controls)


@dataclass
class OcpSolution:
    u_traj: np.ndarray
    v_traj: np.ndarray
    nodes: np.ndarray
    cost: float
    status: str
    kkt_residual: float
    iterations: int
    max_violation: float
    terminal_margin: float
    end_penalty: float = 0.0
    cost_history: list = field(default_factory=list)
    restoration: list = field(default_factory=list)
    interval: float = 0.0
    solve_time: float = 0.0
    problem: OcpProblem | None = field(default=None, repr=False)

    @property
    def controls(self) -> np.ndarray:
        return np.column_stack([self.u_traj, self.v_traj])

    @property
    def converged(self) -> bool:
        """True for ``converged`` and for ``acceptable`` (stopped at the noise floor)."""
        return self.status in (STATUS_CONVERGED, STATUS_ACCEPTABLE)

    @property
    def running_cost(self) -> float:
        """Objective without the end penalty."""
        return self.cost - self.end_penalty


def _qp_settings() -> clarabel.DefaultSettings:
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_threads = 1
    # the shooting QPs are well scaled already; equilibration costs iterations
    settings.equilibrate_enable = False
    return settings


def _solve_qp(H, grad, J_eq, c_eq, J_in, g_in):
    n = H.shape[0]
    A = sp.vstack([J_eq, J_in]).tocsc()
    b = np.concatenate([-c_eq, -g_in])
    cones = [clarabel.ZeroConeT(len(c_eq)), clarabel.NonnegativeConeT(len(g_in))]
    sol = clarabel.DefaultSolver(sp.triu(H, format="csc"), grad, A, b, cones,
                                 _qp_settings()).solve()
    ok = str(sol.status) in ("Solved", "AlmostSolved")
    x = np.asarray(sol.x)[:n]
    z = np.asarray(sol.z)
    return ok and np.all(np.isfinite(x)), x, z


def _solve_elastic_qp(H, grad, J_eq, c_eq, J_in, g_in, n_hard, rho):
    """QP with l1-penalized slacks on the nonlinear rows (hard rows stay hard)."""
    n = H.shape[0]
    m_eq = len(c_eq)
    m_soft = len(g_in) - n_hard
    n_slack = 2 * m_eq + m_soft
    Hx = sp.block_diag([H, sp.csc_matrix((n_slack, n_slack))], format="csc")
    q = np.concatenate([grad, rho * np.ones(n_slack)])
    I_eq, I_soft = sp.identity(m_eq), sp.identity(m_soft)
    J_in = sp.csr_matrix(J_in)
    A = sp.bmat([
        [J_eq, -I_eq, I_eq, None],
        [J_in[:n_hard], None, None, None],
        [J_in[n_hard:], None, None, -I_soft],
        [None, -I_eq, None, None],
        [None, None, -I_eq, None],
        [None, None, None, -I_soft],
    ], format="csc")
    b = np.concatenate([-c_eq, -g_in, np.zeros(n_slack)])
    cones = [clarabel.ZeroConeT(m_eq), clarabel.NonnegativeConeT(len(g_in) + n_slack)]
    sol = clarabel.DefaultSolver(sp.triu(Hx, format="csc"), q, A, b, cones,
                                 _qp_settings()).solve()
    ok = str(sol.status) in ("Solved", "AlmostSolved")
    x = np.asarray(sol.x)[:n]
    z = np.asarray(sol.z)[:m_eq + len(g_in)]
    return ok and np.all(np.isfinite(x)), x, z


def kkt_residual(ev: Evaluation, lam: np.ndarray) -> float:
    """Scaled KKT residual of ``ev`` for multipliers ``lam = (lam_eq, lam_in)``.

    Maximum of the Lagrangian gradient and the complementarity products, both
    relative to ``1 + |grad f|_inf``, and the absolute constraint violation.
    """
    m_eq = len(ev.c_eq)
    lam_eq, lam_in = lam[:m_eq], lam[m_eq:]
    scale = 1.0 + float(np.max(np.abs(ev.grad)))
    grad_l = ev.grad + ev.J_eq.T @ lam_eq + ev.J_in.T @ lam_in
    comp = float(np.max(np.abs(lam_in * np.minimum(ev.g_in, 0.0)), initial=0.0))
    dual = float(np.max(-lam_in, initial=0.0))
    return max(float(np.max(np.abs(grad_l))) / scale, comp / scale, dual / scale, ev.violation)


def solve(nlp: Transcription, warm_start: Guess | None = None,
          options: SolverOptions | None = None) -> OcpSolution:
    """SQP with Gauss-Newton Hessian.

    Iterates stop when :func:`kkt_residual` with the latest QP multipliers drops
    below ``tol``.  The test involves derivatives and constraint values only, so
    adding a constant to the cost leaves the iterates unchanged.  When the line
    search finds no decrease beyond rounding at a feasible point whose residual is already below
    ``acceptable_tol``, finite-difference noise has been reached and the solve
    stops with status ``acceptable``.
    """
    opts = options or nlp.options
    t_begin = time.perf_counter()
    guess = warm_start if warm_start is not None else nlp.cold_start()
    if guess.controls.shape != (nlp.N, NW) or guess.nodes.shape != (nlp.N + 1, NS):
        raise ValueError("warm start dimension does not match the problem")
    y = nlp.join(guess.nodes, guess.controls)
    n_hard = len(nlp.b_lin)
    mu = 1.0
    history, restoration = [], []
    status = STATUS_MAX_ITER
    kkt = np.inf
    best = None
    lam = None
    n_qp = 0
    stalled = False
    while True:
        ev = nlp.evaluate(y, derivatives=True)
        viol = ev.violation
        history.append(ev.f)
        if viol <= opts.tol and (best is None or ev.f < best[1]):
            best = (y.copy(), ev.f)
        if lam is not None:
            kkt = kkt_residual(ev, lam)
            if kkt < opts.tol:
                status = STATUS_CONVERGED
                break
            if stalled and viol <= opts.tol and kkt < opts.acceptable_tol:
                status = STATUS_ACCEPTABLE
                break
        if n_qp >= opts.max_iter:
            break
        n_qp += 1
        ok, d, lam = _solve_qp(ev.H, ev.grad, ev.J_eq, ev.c_eq, ev.J_in, ev.g_in)
        elastic = False
        if not ok:
            rho = 10.0 * max(mu, 1.0)
            ok, d, lam = _solve_elastic_qp(ev.H, ev.grad, ev.J_eq, ev.c_eq, ev.J_in,
                                           ev.g_in, n_hard, rho)
            elastic = True
            if not ok:
                lam = None
                break
        restoration.append(elastic or viol > opts.tol)
        mu = max(mu, 1.1 * float(np.max(np.abs(lam), initial=0.0)))
        phi0 = ev.f + mu * ev.violation_l1
        slope = float(ev.grad @ d) - mu * ev.violation_l1
        alpha = 1.0
        while True:
            try:
                trial = nlp.evaluate(y + alpha * d)
                phi = trial.f + mu * trial.violation_l1
            except IntegrationError:
                phi = np.inf
            stalled = phi > phi0 + opts.armijo * alpha * min(slope, 0.0)
            if not stalled or alpha <= opts.min_alpha:
                break
            alpha *= 0.5
        # a decrease at rounding level is no progress either
        stalled = stalled or phi0 - phi <= _MERIT_NOISE * max(1.0, abs(phi0))
        y = y + alpha * d

    nodes, controls = nlp.split(y)
    done = status in (STATUS_CONVERGED, STATUS_ACCEPTABLE)
    if not done and best is not None and best[1] <= nlp.evaluate(y).f:
        nodes, controls = nlp.split(best[0])
    if done:
        # single-shooting polish: remove the residual shooting defects
        nodes = nlp.rollout(controls)
    y = nlp.join(nodes, controls)
    final = nlp.evaluate(y)
    if final.violation > opts.infeasible_tol:
        status = STATUS_INFEASIBLE
    if nlp.p.mode == "velocity":
        xi = to_transverse(nodes[-1], nlp.p.path)[0:4]
        margins = np.concatenate([[nlp.p.terminal.level - xi @ nlp.p.terminal.P @ xi],
                                  nlp.p.speed_band.margins(nodes[-1, 4:6])])
    else:
        _, margins = membership(nodes[-1], nlp.p.terminal, nlp.p.path)
    return OcpSolution(
        u_traj=controls[:, 0:2].copy(),
        v_traj=controls[:, 2].copy(),
        nodes=nodes,
        cost=final.f,
        status=status,
        kkt_residual=float(kkt),
        iterations=n_qp,
        max_violation=final.violation,
        terminal_margin=float(np.min(margins)),
        end_penalty=nlp.p.penalty_value(),
        cost_history=history,
        restoration=restoration,
        interval=nlp.p.interval,
        solve_time=time.perf_counter() - t_begin,
        problem=nlp.p,
    )


def solve_problem(problem: OcpProblem, warm_start: Guess | None = None,
                  options: SolverOptions | None = None) -> OcpSolution:
    return solve(Transcription(problem, options), warm_start, options)


def shift_warm_start(prev: OcpSolution, delta: float, s0=None) -> Guess:
    """Shift ``prev`` by ``delta`` and append the terminal controller.

    Node ``j`` of the new guess is the previous prediction at ``delta + j*dt``,
    re-integrated from the previous nodes (the last one under the terminal
    controls).  Controls are the shifted piecewise-constant inputs averaged
    onto the shooting grid.  ``delta`` must lie on the integrator grid.
    """
    p = prev.problem
    N, dt = p.n_intervals, prev.interval
    n_steps = int(round(delta / p.h))
    if n_steps < 0 or abs(n_steps * p.h - delta) > 1e-9 * max(1.0, delta) or delta >= dt:
        raise ValueError("delta must be a nonnegative multiple of the substep below the interval")
    tail = terminal_pair(prev.nodes[-1], p)
    ext = np.vstack([prev.controls, tail])
    lo = np.append(np.arange(N) * dt, N * dt)
    hi = np.append(np.arange(1, N + 1) * dt, np.inf)
    a = delta + np.arange(N) * dt
    overlap = np.clip(np.minimum(a[:, None] + dt, hi[None]) - np.maximum(a[:, None], lo[None]),
                      0.0, None)
    controls = overlap @ ext / dt
    if n_steps == 0:
        nodes = prev.nodes.copy()
    else:
        nodes = rk4_batch(prev.nodes, ext, p.params, p.h, n_steps)[0]
    if s0 is not None:
        nodes[0] = s0
    return Guess(nodes, controls)


def predict_state(sol: OcpSolution, t: float) -> np.ndarray:
    """Predicted state ``t`` seconds into the horizon (``t`` on the substep grid)."""
    p = sol.problem
    n_steps = int(round(t / p.h))
    if abs(n_steps * p.h - t) > 1e-9 * max(1.0, t):
        raise ValueError("prediction time must lie on the integrator grid")
    i, rem = divmod(n_steps, p.substeps)
    if i >= p.n_intervals:
        i, rem = p.n_intervals - 1, n_steps - (p.n_intervals - 1) * p.substeps
    if rem == 0:
        return sol.nodes[i].copy()
    return rk4_batch(sol.nodes[i], sol.controls[i], p.params, p.h, rem)[0][0]


__all__ = [
    "CostWeights", "Guess", "OcpProblem", "OcpSolution", "SolverOptions", "Transcription",
    "predict_state", "shift_warm_start", "solve", "solve_problem", "stage_cost", "terminal_pair",
]
