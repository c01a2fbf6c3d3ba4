import os
import subprocess
import sys

import numpy as np
import pytest

from casa import _accel, kernels
from casa.mdp import sample_trajectories

from _helpers import problem


@pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba not installed")
@pytest.mark.parametrize("seed", range(3))
def test_rollout_backends_agree(seed):
    mdp, _, mu, rng = problem(seed)
    start = rng.integers(0, mdp.n_states, 50)
    uniforms = rng.random((50, 20, 2))
    a = kernels.rollout(start, mu.probs, mdp.transition, mdp.reward, mdp.terminal_mask, uniforms, use_numba=True)
    b = kernels.rollout(start, mu.probs, mdp.transition, mdp.reward, mdp.terminal_mask, uniforms, use_numba=False)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba not installed")
def test_trace_backends_agree():
    rng = np.random.default_rng(0)
    n, h = 40, 12
    lengths = rng.integers(1, h + 1, n)
    dones = np.zeros((n, h), dtype=bool)
    dones[np.arange(n), lengths - 1] = rng.random(n) < 0.5
    args = (rng.normal(size=(n, h)), rng.random((n, h)), rng.random((n, h)), dones, lengths, 0.95)
    a = kernels.discounted_trace(*args, use_numba=True)
    b = kernels.discounted_trace(*args, use_numba=False)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_trace_matches_direct_sum():
    delta = np.array([[1.0, -2.0, 0.5]])
    w = np.array([[0.5, 1.0, 2.0]])
    c = np.array([[0.9, 0.8, 0.7]])
    out = kernels.discounted_trace(delta, w, c, np.array([[False, False, True]]), np.array([3]), 0.9)
    g2 = 2.0 * 0.5
    g1 = -2.0 + 0.9 * 0.8 * g2
    g0 = 0.5 + 0.9 * 0.9 * g1
    np.testing.assert_allclose(out[0], [g0, g1, g2, 0.0], atol=1e-15)


def test_sampling_is_backend_independent(numpy_backend):
    mdp, _, mu, _ = problem(1)
    a = sample_trajectories(mdp, mu, 30, 10, seed=5)
    _accel.USE_NUMBA = _accel.NUMBA_AVAILABLE
    b = sample_trajectories(mdp, mu, 30, 10, seed=5)
    assert a.to_jsonl() == b.to_jsonl()


def test_env_flag_selects_numpy():
    env = {**os.environ, "CASA_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", "from casa import _accel; print(_accel.backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_inverse_cdf_rows_end_at_one():
    table = kernels.inverse_cdf_table(np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]))
    assert (table[:, -1] >= 1.0).all()
