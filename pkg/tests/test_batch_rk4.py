import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpfc.batch_rk4 import rk4_batch
from mpfc.dynamics import DEFAULT_PARAMS, IntegrationError, RobotParams, augmented_rhs, rk4_step


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_batch_matches_reference_rk4(seed, n_steps):
    rng = np.random.default_rng(seed)
    s0 = np.hstack([rng.uniform(-3, 3, (4, 2)), rng.uniform(-4, 4, (4, 2)),
                    rng.uniform(-5, 0, (4, 1)), rng.uniform(0, 1, (4, 1))])
    w = np.hstack([rng.uniform(-2000, 2000, (4, 2)), rng.uniform(-5, 5, (4, 1))])
    h = 0.0025
    ends, samples, stages = rk4_batch(s0, w, DEFAULT_PARAMS, h, n_steps,
                                      sample_every=1, record_stages=True)
    s = s0.copy()
    for m in range(n_steps):
        assert stages[m, 0] == pytest.approx(s, rel=1e-12, abs=1e-12)
        s = rk4_step(augmented_rhs, s, w, h)
        if m + 1 < n_steps:
            assert samples[:, m] == pytest.approx(s, rel=1e-12, abs=1e-12)
    assert ends == pytest.approx(s, rel=1e-12, abs=1e-12)


def test_sample_stride_excludes_end():
    s0 = np.zeros((1, 6))
    ends, samples, stages = rk4_batch(s0, np.zeros(3), DEFAULT_PARAMS, 0.01, 15, sample_every=5)
    assert samples.shape == (1, 2, 6) and stages is None


def test_singular_model_raises():
    p = RobotParams(b1=1.0, b2=0.1, b3=1.0, b4=0.1, b5=1.0)
    with pytest.raises(IntegrationError):
        rk4_batch(np.zeros((1, 6)), np.zeros(3), p, 0.01, 2)
