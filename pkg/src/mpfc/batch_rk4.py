"""Compiled RK4 for many augmented-state trajectories under constant inputs.

Evaluates the same vector field as :func:`mpfc.dynamics.augmented_rhs`; the
shooting transcription and the plant simulation call this in their inner loops,
where per-call numpy overhead would otherwise dominate.
"""
from __future__ import annotations

import math

import numba
import numpy as np

from .dynamics import DET_TOL, NS, IntegrationError, RobotParams


def param_vector(params: RobotParams) -> np.ndarray:
    return np.array([params.b1, params.b2, params.b3, params.b4, params.b5,
                     params.c1, params.g1, params.g2])


@numba.njit(cache=True)
def _rhs_into(x, w, c, out):
    q1, q2, d1, d2 = x[0], x[1], x[2], x[3]
    c2 = math.cos(q2)
    b11 = c[0] + c[1] * c2
    b12 = c[2] + c[3] * c2
    b22 = c[4]
    k = -c[5] * math.sin(q2)
    c12 = math.cos(q1 + q2)
    r1 = w[0] - k * (d1 * d1 + (d1 + d2) * d2) - (c[6] * math.cos(q1) + c[7] * c12)
    r2 = w[1] + k * d1 * d1 - c[7] * c12
    det = b11 * b22 - b12 * b12
    if det <= DET_TOL:
        det = math.nan
    out[0] = d1
    out[1] = d2
    out[2] = (b22 * r1 - b12 * r2) / det
    out[3] = (b11 * r2 - b12 * r1) / det
    out[4] = x[5]
    out[5] = w[2]


@numba.njit(cache=True)
def _rk4_kernel(s0, w, c, h, n_steps, sample_every, record, stages, samples, ends):
    n_rows = s0.shape[0]
    x = np.empty(6)
    xt = np.empty(6)
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    for b in range(n_rows):
        for i in range(6):
            x[i] = s0[b, i]
        wb = w[b]
        n_smp = 0
        for m in range(n_steps):
            _rhs_into(x, wb, c, k1)
            if record:
                for i in range(6):
                    stages[m, 0, b, i] = x[i]
            for i in range(6):
                xt[i] = x[i] + 0.5 * h * k1[i]
            if record:
                for i in range(6):
                    stages[m, 1, b, i] = xt[i]
            _rhs_into(xt, wb, c, k2)
            for i in range(6):
                xt[i] = x[i] + 0.5 * h * k2[i]
            if record:
                for i in range(6):
                    stages[m, 2, b, i] = xt[i]
            _rhs_into(xt, wb, c, k3)
            for i in range(6):
                xt[i] = x[i] + h * k3[i]
            if record:
                for i in range(6):
                    stages[m, 3, b, i] = xt[i]
            _rhs_into(xt, wb, c, k4)
            for i in range(6):
                x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if sample_every > 0 and (m + 1) % sample_every == 0 and m + 1 < n_steps:
                for i in range(6):
                    samples[b, n_smp, i] = x[i]
                n_smp += 1
        for i in range(6):
            ends[b, i] = x[i]


def rk4_batch(s0, w, params: RobotParams, h: float, n_steps: int,
              sample_every: int = 0, record_stages: bool = False):
    """Integrate rows of ``s0`` (B, 6) under constant inputs ``w`` (B, 3).

    Returns ``(ends, samples, stages)``.  ``samples`` holds the states after
    every ``sample_every`` steps (excluding the end); ``stages`` (when
    requested) holds the four RK4 stage states of every step, shape
    ``(n_steps, 4, B, 6)``.
    """
    s0 = np.ascontiguousarray(s0, dtype=float).reshape(-1, NS)
    w = np.ascontiguousarray(np.broadcast_to(w, (s0.shape[0], 3)), dtype=float)
    B = s0.shape[0]
    n_smp = (n_steps - 1) // sample_every if sample_every > 0 else 0
    samples = np.empty((B, n_smp, NS))
    stages = np.empty((n_steps, 4, B, NS) if record_stages else (0, 4, 0, NS))
    ends = np.empty((B, NS))
    _rk4_kernel(s0, w, param_vector(params), float(h), int(n_steps), int(sample_every),
                bool(record_stages), stages, samples, ends)
    if not np.all(np.isfinite(ends)):
        raise IntegrationError(float("nan"), "non-finite state in batched RK4")
    return ends, samples, (stages if record_stages else None)
