"""Shared builders for the test suite."""
import numpy as np

from casa.autodiff import ParamVector
from casa.head import CasaHead, HeadVariant
from casa.mdp import TabularMdp, make_rng, random_mdp, random_policy

ACCEPTANCE_LINES: list[str] = []


def small_head(seed=0, variant=HeadVariant.CASA, tau=None, n_inputs=5, n_actions=3, hidden=(6, 6)):
    if tau is None:
        tau = float(make_rng(50_000 + seed).uniform(0.2, 2.0))
    return CasaHead.init(n_inputs, n_actions, hidden, tau, variant, seed=seed)


def linear_head(a, v, tau=1.0, variant=HeadVariant.CASA, q=None):
    """Head with no hidden layer whose outputs at input [1.0] are exactly ``a`` and ``v``."""
    a = np.asarray(a, dtype=np.float64)
    segs = [("v_head.w", [[float(v)]]), ("v_head.b", [0.0]), ("a_head.w", [a]), ("a_head.b", np.zeros(a.size))]
    if HeadVariant(variant).has_q_head:
        q = np.zeros(a.size) if q is None else np.asarray(q, dtype=np.float64)
        segs += [("q_head.w", [q]), ("q_head.b", np.zeros(a.size))]
    return CasaHead(ParamVector(segs), 1, a.size, hidden=(), tau=tau, variant=variant)


def problem(seed, n_states=5, n_actions=3, gamma=0.9, floor=0.0):
    rng = make_rng(seed)
    mdp = random_mdp(n_states, n_actions, gamma, rng)
    pi = random_policy(n_states, n_actions, rng, floor=floor)
    mu = random_policy(n_states, n_actions, rng, floor=max(floor, 0.01))
    return mdp, pi, mu, rng


def line_mdp(n=4, gamma=0.9, reward_at_end=1.0):
    """Deterministic line: action 0 stays, action 1 moves right; entering the last state ends the episode."""
    t = np.zeros((n, 2, n))
    r = np.zeros((n, 2))
    for s in range(n - 1):
        t[s, 0, s] = 1.0
        t[s, 1, s + 1] = 1.0
        r[s, 1] = 0.5 * s
    r[n - 2, 1] = reward_at_end
    t[n - 1, :, n - 1] = 1.0
    term = np.zeros(n, dtype=bool)
    term[n - 1] = True
    return TabularMdp(t, r, gamma, term)
