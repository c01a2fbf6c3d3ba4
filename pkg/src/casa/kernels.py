"""Hot loops: tabular rollouts and the backward discounted-trace recursion.

Each kernel exists twice: an ``@njit`` scalar loop and a vectorised numpy
version that steps all trajectories at once.  Both consume the same
pre-drawn uniforms, so they return identical batches.  The public wrappers
pick one according to ``casa._accel.USE_NUMBA``.

Padded layout used throughout: ``N`` trajectories by ``H`` steps, with
``lengths[i] <= H`` valid steps in row ``i``.  Entries past the length are
zero (``states`` past the end repeat the final state).
"""
import numpy as np

from . import _accel
from ._accel import njit


def inverse_cdf_table(probs):
    """Cumulative table for inverse-CDF draws along the last axis.

    Entries from the last positive-probability outcome onward are set to 2.0
    so a uniform in [0, 1) can never land on a zero-probability outcome.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cum = np.cumsum(probs, axis=-1)
    positive = probs > 0
    n = probs.shape[-1]
    last = n - 1 - np.argmax(positive[..., ::-1], axis=-1)
    idx = np.arange(n)
    cum = np.where(idx >= last[..., None], 2.0, cum)
    return np.ascontiguousarray(cum)


# --------------------------------------------------------------------------
# rollouts

@njit
def _rollout_loop(start, cum_mu, cum_p, mu, reward, terminal, uniforms):
    n, horizon = uniforms.shape[0], uniforms.shape[1]
    n_actions = cum_mu.shape[1]
    n_states = cum_p.shape[2]
    states = np.zeros((n, horizon + 1), dtype=np.int64)
    actions = np.zeros((n, horizon), dtype=np.int64)
    rewards = np.zeros((n, horizon))
    probs = np.zeros((n, horizon))
    dones = np.zeros((n, horizon), dtype=np.bool_)
    lengths = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s = start[i]
        states[i, 0] = s
        t = 0
        while t < horizon:
            u = uniforms[i, t, 0]
            a = 0
            for k in range(n_actions):
                if cum_mu[s, k] <= u:
                    a += 1
            if a > n_actions - 1:
                a = n_actions - 1
            v = uniforms[i, t, 1]
            s2 = 0
            for k in range(n_states):
                if cum_p[s, a, k] <= v:
                    s2 += 1
            if s2 > n_states - 1:
                s2 = n_states - 1
            actions[i, t] = a
            rewards[i, t] = reward[s, a]
            probs[i, t] = mu[s, a]
            states[i, t + 1] = s2
            t += 1
            if terminal[s2]:
                dones[i, t - 1] = True
                break
            s = s2
        lengths[i] = t
        for j in range(t + 1, horizon + 1):
            states[i, j] = states[i, t]
    return states, actions, rewards, probs, dones, lengths


def _rollout_numpy(start, cum_mu, cum_p, mu, reward, terminal, uniforms):
    n, horizon = uniforms.shape[0], uniforms.shape[1]
    n_actions = cum_mu.shape[1]
    n_states = cum_p.shape[2]
    states = np.zeros((n, horizon + 1), dtype=np.int64)
    actions = np.zeros((n, horizon), dtype=np.int64)
    rewards = np.zeros((n, horizon))
    probs = np.zeros((n, horizon))
    dones = np.zeros((n, horizon), dtype=np.bool_)
    lengths = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=np.bool_)
    s = np.asarray(start, dtype=np.int64).copy()
    states[:, 0] = s
    for t in range(horizon):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        sr = s[rows]
        a = np.minimum((cum_mu[sr] <= uniforms[rows, t, 0][:, None]).sum(axis=1), n_actions - 1)
        s2 = np.minimum((cum_p[sr, a] <= uniforms[rows, t, 1][:, None]).sum(axis=1), n_states - 1)
        actions[rows, t] = a
        rewards[rows, t] = reward[sr, a]
        probs[rows, t] = mu[sr, a]
        states[rows, t + 1] = s2
        lengths[rows] = t + 1
        ended = terminal[s2]
        dones[rows[ended], t] = True
        alive[rows[ended]] = False
        s[rows] = s2
    for i in range(n):
        states[i, lengths[i] + 1:] = states[i, lengths[i]]
    return states, actions, rewards, probs, dones, lengths


def rollout(start, mu, transition, reward, terminal, uniforms, use_numba=None):
    """Roll out ``len(start)`` trajectories under the behaviour table ``mu``.

    ``uniforms`` has shape ``(N, H, 2)``: column 0 draws the action, column 1
    the next state.  Returns ``(states, actions, rewards, behavior_probs,
    dones, lengths)`` in the padded layout.
    """
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    args = (
        np.ascontiguousarray(start, dtype=np.int64),
        inverse_cdf_table(mu),
        inverse_cdf_table(transition),
        np.ascontiguousarray(mu, dtype=np.float64),
        np.ascontiguousarray(reward, dtype=np.float64),
        np.ascontiguousarray(terminal, dtype=np.bool_),
        np.ascontiguousarray(uniforms, dtype=np.float64),
    )
    if use_numba:
        return _rollout_loop(*args)
    return _rollout_numpy(*args)


# --------------------------------------------------------------------------
# discounted trace recursion
#
#   G[t] = weight[t] * delta[t] + gamma * (1 - done[t]) * carry[t] * G[t+1]
#   G[length] = 0

@njit
def _trace_loop(delta, weight, carry, dones, lengths, gamma):
    n, horizon = delta.shape
    out = np.zeros((n, horizon + 1))
    for i in range(n):
        acc = 0.0
        for t in range(lengths[i] - 1, -1, -1):
            cont = 0.0 if dones[i, t] else gamma * carry[i, t]
            acc = weight[i, t] * delta[i, t] + cont * acc
            out[i, t] = acc
    return out


def _trace_numpy(delta, weight, carry, dones, lengths, gamma):
    n, horizon = delta.shape
    out = np.zeros((n, horizon + 1))
    acc = np.zeros(n)
    for t in range(horizon - 1, -1, -1):
        valid = t < lengths
        cont = np.where(dones[:, t], 0.0, gamma * carry[:, t])
        acc = np.where(valid, weight[:, t] * delta[:, t] + cont * acc, 0.0)
        out[:, t] = acc
    return out


def discounted_trace(delta, weight, carry, dones, lengths, gamma, use_numba=None):
    """Backward recursion shared by every return estimator.

    Returns an ``(N, H + 1)`` array whose column ``t`` is ``G[t]``; the
    column at each row's length (and beyond) is zero, which makes the
    shifted read ``G[t + 1]`` safe for every valid ``t``.
    """
    use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
    args = (
        np.ascontiguousarray(delta, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.float64),
        np.ascontiguousarray(carry, dtype=np.float64),
        np.ascontiguousarray(dones, dtype=np.bool_),
        np.ascontiguousarray(lengths, dtype=np.int64),
        float(gamma),
    )
    if use_numba:
        return _trace_loop(*args)
    return _trace_numpy(*args)
