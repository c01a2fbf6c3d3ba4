"""Finite MDPs, exact policy evaluation and seeded off-policy rollouts."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

MAX_STATES = 1000
ROW_TOL = 1e-12


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def split_seed(seed, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    gamma: float
    terminal_mask: np.ndarray = None  # (S,)

    def __post_init__(self):
        p = np.array(self.transition, dtype=np.float64)
        r = np.array(self.reward, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        n_states, n_actions = p.shape[:2]
        if n_states > MAX_STATES:
            raise ValueError(f"at most {MAX_STATES} states supported, got {n_states}")
        if r.shape != (n_states, n_actions):
            raise ValueError(f"reward must have shape {(n_states, n_actions)}, got {r.shape}")
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValueError("transition probabilities must be finite and non-negative")
        if np.abs(p.sum(axis=2) - 1.0).max() > ROW_TOL:
            raise ValueError("every transition row p(.|s,a) must sum to 1")
        if not np.isfinite(r).all():
            raise ValueError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        term = np.zeros(n_states, dtype=bool) if self.terminal_mask is None else np.array(self.terminal_mask, dtype=bool)
        if term.shape != (n_states,):
            raise ValueError(f"terminal_mask must have shape ({n_states},)")
        for s in np.flatnonzero(term):
            if not (np.all(p[s, :, s] == 1.0) and np.all(r[s] == 0.0)):
                raise ValueError(f"terminal state {s} must be absorbing with zero reward")
        for name, arr in (("transition", p), ("reward", r), ("terminal_mask", term)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def nonterminal(self) -> np.ndarray:
        return np.flatnonzero(~self.terminal_mask)

    def killed_transition(self) -> np.ndarray:
        """p(s'|s,a) with mass into terminal states removed (value 0 past termination)."""
        p = self.transition.copy()
        p[:, :, self.terminal_mask] = 0.0
        return p

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "terminal_mask": [bool(x) for x in self.terminal_mask],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        missing = {"n_states", "n_actions", "gamma", "transition", "reward", "terminal_mask"} - set(doc)
        if missing:
            raise ValueError(f"MDP document missing fields: {sorted(missing)}")
        mdp = cls(np.array(doc["transition"]), np.array(doc["reward"]), float(doc["gamma"]), np.array(doc["terminal_mask"]))
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValueError("n_states / n_actions disagree with the array shapes")
        return mdp

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {p.shape}")
        if (p < 0).any() or not np.isfinite(p).all():
            raise ValueError("policy probabilities must be finite and non-negative")
        if np.abs(p.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise ValueError("every policy row must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def greedy(cls, q: np.ndarray) -> "TabularPolicy":
        q = np.asarray(q)
        probs = np.zeros_like(q, dtype=np.float64)
        probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
        return cls(probs)

    def __getitem__(self, idx):
        return self.probs[idx]


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> TabularMdp:
    p = rng.random((n_states, n_actions, n_states)) + 1e-3
    p /= p.sum(axis=2, keepdims=True)
    return TabularMdp(p, rng.standard_normal((n_states, n_actions)), gamma)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator, floor: float = 0.0) -> TabularPolicy:
    probs = rng.dirichlet(np.ones(n_actions), size=n_states) + floor
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------
# exact evaluation

def _check(mdp: TabularMdp, policy: TabularPolicy):
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.probs.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")


def exact_v(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Solve (I - γ P_π) V = r_π by LU factorisation."""
    _check(mdp, policy)
    pi = policy.probs
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = (pi * mdp.reward).sum(axis=1)
    try:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
    except np.linalg.LinAlgError as exc:
        raise ValueError("policy evaluation system is singular") from exc


def exact_q(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    v = exact_v(mdp, policy)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def bellman_residual(mdp: TabularMdp, policy: TabularPolicy, v: np.ndarray) -> np.ndarray:
    pi = policy.probs
    backup = (pi * (mdp.reward + mdp.gamma * mdp.transition @ v)).sum(axis=1)
    return np.abs(backup - v)


def value_iteration_v(mdp: TabularMdp, policy: TabularPolicy, sweeps: int = 10_000, tol: float = 0.0) -> np.ndarray:
    """Iterative policy evaluation; the slow oracle for ``exact_v``."""
    pi = policy.probs
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = (pi * mdp.reward).sum(axis=1)
    v = np.zeros(mdp.n_states)
    for _ in range(sweeps):
        nxt = r_pi + mdp.gamma * p_pi @ v
        if np.abs(nxt - v).max() <= tol:
            return nxt
        v = nxt
    return v


def optimal_q(mdp: TabularMdp, sweeps: int = 100_000, tol: float = 1e-13) -> np.ndarray:
    """Optimal action values by value iteration."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(sweeps):
        nxt = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        if np.abs(nxt - q).max() <= tol:
            return nxt
        q = nxt
    return q


def clipped_target_policy(pi: TabularPolicy, mu: TabularPolicy, rho_bar: float) -> TabularPolicy:
    """min(ρ̄ μ, π) renormalised per state."""
    if not rho_bar > 0:
        raise ValueError(f"rho_bar must be positive, got {rho_bar}")
    if pi.probs.shape != mu.probs.shape:
        raise ValueError("pi and mu shapes differ")
    if ((mu.probs == 0) & (pi.probs > 0)).any():
        raise ValueError("mu must be positive wherever pi is positive")
    clipped = np.minimum(rho_bar * mu.probs, pi.probs)
    norm = clipped.sum(axis=1, keepdims=True)
    if (norm == 0).any():
        raise ValueError(f"zero normaliser in states {np.flatnonzero(norm[:, 0] == 0).tolist()}")
    return TabularPolicy(clipped / norm)


# --------------------------------------------------------------------------
# behaviour

def epsilon_greedy_probs(q_values, epsilon: float) -> np.ndarray:
    """Action distribution of ε-greedy over ``q_values`` (ties to the lowest index)."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size == 0:
        raise ValueError("empty action set")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    probs = np.full(q.shape, epsilon / q.shape[-1])
    best = np.argmax(q, axis=-1)
    np.put_along_axis(probs, np.expand_dims(best, -1), np.take_along_axis(probs, np.expand_dims(best, -1), -1) + 1.0 - epsilon, -1)
    return probs


def epsilon_greedy(q_values, epsilon: float, seed) -> tuple[int, float]:
    """Draw one ε-greedy action; returns ``(action, behavior_prob)``."""
    probs = epsilon_greedy_probs(q_values, epsilon)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    action = int(rng.choice(probs.size, p=probs))
    return action, float(probs[action])


# --------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    behavior_prob: float
    done: bool

    def __post_init__(self):
        if not 0.0 < self.behavior_prob <= 1.0:
            raise ValueError(f"behavior_prob must lie in (0, 1], got {self.behavior_prob}")


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1,)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray
    behavior_probs: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.behavior_probs = np.asarray(self.behavior_probs, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        t = self.actions.shape[0]
        if self.states.shape != (t + 1,):
            raise ValueError(f"states must hold T + 1 = {t + 1} entries, got {self.states.shape[0]}")
        for name in ("rewards", "behavior_probs", "dones"):
            if getattr(self, name).shape != (t,):
                raise ValueError(f"{name} must hold T = {t} entries")
        if t and ((self.behavior_probs <= 0) | (self.behavior_probs > 1)).any():
            raise ValueError("behavior probabilities must lie in (0, 1]")
        if t > 1 and self.dones[:-1].any():
            raise ValueError("done may only be set on the final step")

    def __len__(self):
        return self.actions.shape[0]

    @classmethod
    def from_transitions(cls, steps: list[Transition]) -> "Trajectory":
        for a, b in zip(steps, steps[1:]):
            if a.next_state != b.state:
                raise ValueError("next_state of step t must equal state of step t + 1")
        return cls(
            [s.state for s in steps] + [steps[-1].next_state],
            [s.action for s in steps],
            [s.reward for s in steps],
            [s.behavior_prob for s in steps],
            [s.done for s in steps],
        )

    def transitions(self) -> list[Transition]:
        return [
            Transition(int(self.states[t]), int(self.actions[t]), float(self.rewards[t]),
                       int(self.states[t + 1]), float(self.behavior_probs[t]), bool(self.dones[t]))
            for t in range(len(self))
        ]


@dataclass
class Padded:
    """Fixed-width view of a batch for the vectorised estimators."""

    states: np.ndarray  # (N, H + 1)
    actions: np.ndarray  # (N, H)
    rewards: np.ndarray
    behavior_probs: np.ndarray
    dones: np.ndarray
    lengths: np.ndarray  # (N,)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.actions.shape[1])[None, :] < self.lengths[:, None]


class TrajectoryBatch:
    """Trajectories plus the seed that produced them.

    Holds either a list of ``Trajectory`` objects or the padded arrays
    straight from a rollout kernel; each view is built from the other on
    first use.
    """

    def __init__(self, trajectories: list[Trajectory] | None = None, seed=None, padded: Padded | None = None):
        if trajectories is None and padded is None:
            trajectories = []
        self._trajectories = trajectories
        self._padded = padded
        self.seed = seed

    def __len__(self):
        if self._trajectories is not None:
            return len(self._trajectories)
        return self._padded.lengths.shape[0]

    @classmethod
    def from_padded(cls, padded: Padded, seed=None) -> "TrajectoryBatch":
        return cls(None, seed, padded)

    @property
    def trajectories(self) -> list[Trajectory]:
        if self._trajectories is None:
            p = self._padded
            self._trajectories = [
                Trajectory(p.states[i, : n + 1], p.actions[i, :n], p.rewards[i, :n], p.behavior_probs[i, :n], p.dones[i, :n])
                for i, n in enumerate(p.lengths)
            ]
        return self._trajectories

    def padded(self) -> Padded:
        if self._padded is None:
            n = len(self._trajectories)
            h = max((len(t) for t in self._trajectories), default=0)
            states = np.zeros((n, h + 1), dtype=np.int64)
            actions = np.zeros((n, h), dtype=np.int64)
            rewards = np.zeros((n, h))
            probs = np.zeros((n, h))
            dones = np.zeros((n, h), dtype=bool)
            lengths = np.zeros(n, dtype=np.int64)
            for i, tr in enumerate(self._trajectories):
                t = len(tr)
                states[i, : t + 1] = tr.states
                states[i, t + 1:] = tr.states[-1]
                actions[i, :t] = tr.actions
                rewards[i, :t] = tr.rewards
                probs[i, :t] = tr.behavior_probs
                dones[i, :t] = tr.dones
                lengths[i] = t
            self._padded = Padded(states, actions, rewards, probs, dones, lengths)
        return self._padded

    # newline-delimited JSON, one trajectory per line
    def to_jsonl(self) -> str:
        lines = []
        for tr in self.trajectories:
            lines.append(json.dumps({
                "states": tr.states.tolist(),
                "actions": tr.actions.tolist(),
                "rewards": [float(x) for x in tr.rewards],
                "behavior_probs": [float(x) for x in tr.behavior_probs],
                "dones": [bool(x) for x in tr.dones],
                "seed": self.seed,
            }))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "TrajectoryBatch":
        trajs, seeds = [], set()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            doc = json.loads(line)
            expected = {"states", "actions", "rewards", "behavior_probs", "dones", "seed"}
            if set(doc) != expected:
                raise ValueError(f"line {lineno}: fields must be exactly {sorted(expected)}")
            try:
                trajs.append(Trajectory(doc["states"], doc["actions"], doc["rewards"], doc["behavior_probs"], doc["dones"]))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            seeds.add(doc["seed"])
        if len(seeds) > 1:
            raise ValueError(f"mixed seeds in one batch file: {sorted(map(str, seeds))}")
        return cls(trajs, seeds.pop() if seeds else None)

    def save(self, path):
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "TrajectoryBatch":
        return cls.from_jsonl(Path(path).read_text())


_SAMPLE_CHUNK = 1 << 21  # uniforms per draw, in (trajectory, step) pairs


def sample_trajectories(mdp: TabularMdp, mu: TabularPolicy, n_traj: int, horizon: int, seed: int,
                        start_states=None, start_dist=None) -> TrajectoryBatch:
    """Seeded rollouts under ``mu``; each step records μ(a|s) at sampling time.

    Start states default to uniform over the non-terminal states.
    """
    _check(mdp, mu)
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if n_traj < 0:
        raise ValueError("n_traj must be non-negative")
    start_rng, step_rng = (make_rng(s) for s in split_seed(seed, 2))
    if start_states is None:
        if start_dist is None:
            start_dist = np.zeros(mdp.n_states)
            start_dist[mdp.nonterminal] = 1.0
        start_dist = np.asarray(start_dist, dtype=np.float64)
        start_dist = start_dist / start_dist.sum()
        start_states = start_rng.choice(mdp.n_states, size=n_traj, p=start_dist)
    start_states = np.broadcast_to(np.asarray(start_states, dtype=np.int64), (n_traj,))
    # uniforms are drawn chunk by chunk from one stream, so chunking does not change the batch
    parts = []
    chunk = max(1, _SAMPLE_CHUNK // horizon)
    for lo in range(0, n_traj, chunk):
        hi = min(n_traj, lo + chunk)
        uniforms = step_rng.random((hi - lo, horizon, 2))
        parts.append(kernels.rollout(start_states[lo:hi], mu.probs, mdp.transition, mdp.reward,
                                     mdp.terminal_mask, uniforms))
    if not parts:
        parts.append(kernels.rollout(start_states, mu.probs, mdp.transition, mdp.reward, mdp.terminal_mask,
                                     np.zeros((0, horizon, 2))))
    out = [np.concatenate(cols) for cols in zip(*parts)]
    return TrajectoryBatch.from_padded(Padded(*out), seed=seed)
