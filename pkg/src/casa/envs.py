"""Small episodic tabular environments for the training harness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMdp, TabularPolicy, exact_v, optimal_q

# grid moves: up, down, left, right
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


class UnknownEnvError(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class Env:
    name: str
    mdp: TabularMdp
    start_state: int
    max_steps: int
    shape: tuple | None = None
    hazards: frozenset = frozenset()

    def optimal_policy(self) -> TabularPolicy:
        return TabularPolicy.greedy(optimal_q(self.mdp))

    def optimal_return(self) -> float:
        """Discounted return from the start state under the greedy optimal policy."""
        return float(exact_v(self.mdp, self.optimal_policy())[self.start_state])

    def greedy_path(self, policy: TabularPolicy | None = None) -> list[int]:
        """States visited by a deterministic policy from the start (most likely successor each step)."""
        policy = self.optimal_policy() if policy is None else policy
        s, path = self.start_state, [self.start_state]
        for _ in range(self.max_steps):
            if self.mdp.terminal_mask[s]:
                break
            a = int(np.argmax(policy.probs[s]))
            s = int(np.argmax(self.mdp.transition[s, a]))
            path.append(s)
        return path


def _finish(transition, reward, gamma, terminal):
    for s in np.flatnonzero(terminal):
        transition[s] = 0.0
        transition[s, :, s] = 1.0
        reward[s] = 0.0
    return TabularMdp(transition, reward, gamma, terminal)


def chain(n: int = 10, gamma: float = 0.9, max_steps: int = 100) -> Env:
    """States 0..n-1 on a line; action 1 moves right, 0 moves left.

    Entering state n-1 pays 1 and ends the episode.
    """
    if n < 2:
        raise ValueError("chain needs at least 2 states")
    t = np.zeros((n, 2, n))
    r = np.zeros((n, 2))
    for s in range(n - 1):
        t[s, 0, max(s - 1, 0)] = 1.0
        t[s, 1, s + 1] = 1.0
    r[n - 2, 1] = 1.0
    term = np.zeros(n, dtype=bool)
    term[n - 1] = True
    return Env("chain", _finish(t, r, gamma, term), 0, max_steps)


def _grid(rows, cols):
    def idx(i, j):
        return i * cols + j

    def step(i, j, a):
        di, dj = _MOVES[a]
        ni, nj = i + di, j + dj
        if 0 <= ni < rows and 0 <= nj < cols:
            return ni, nj
        return i, j

    return idx, step


def gridworld(size: int = 5, gamma: float = 0.9, max_steps: int = 100) -> Env:
    """Open ``size``×``size`` grid from the top-left corner to a paying goal at the bottom-right."""
    idx, step = _grid(size, size)
    n = size * size
    goal = idx(size - 1, size - 1)
    t = np.zeros((n, 4, n))
    r = np.zeros((n, 4))
    for i in range(size):
        for j in range(size):
            for a in range(4):
                s2 = idx(*step(i, j, a))
                t[idx(i, j), a, s2] = 1.0
                if s2 == goal:
                    r[idx(i, j), a] = 1.0
    term = np.zeros(n, dtype=bool)
    term[goal] = True
    return Env("gridworld", _finish(t, r, gamma, term), idx(0, 0), max_steps, (size, size))


def cliff(rows: int = 4, cols: int = 12, gamma: float = 0.9, max_steps: int = 200) -> Env:
    """Cliff walk: -1 per step, stepping onto the bottom edge between start and goal costs 100 and resets to start."""
    idx, step = _grid(rows, cols)
    n = rows * cols
    start, goal = idx(rows - 1, 0), idx(rows - 1, cols - 1)
    cliff_cells = {idx(rows - 1, j) for j in range(1, cols - 1)}
    t = np.zeros((n, 4, n))
    r = np.zeros((n, 4))
    for i in range(rows):
        for j in range(cols):
            for a in range(4):
                s2 = idx(*step(i, j, a))
                if s2 in cliff_cells:
                    t[idx(i, j), a, start] = 1.0
                    r[idx(i, j), a] = -100.0
                else:
                    t[idx(i, j), a, s2] = 1.0
                    r[idx(i, j), a] = -1.0
    term = np.zeros(n, dtype=bool)
    term[goal] = True
    return Env("cliff", _finish(t, r, gamma, term), start, max_steps, (rows, cols), frozenset(cliff_cells))


ENVIRONMENTS = {"chain": chain, "gridworld": gridworld, "cliff": cliff}


def make_env(name: str, **kwargs) -> Env:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise UnknownEnvError(f"unknown environment {name!r}; valid names: {', '.join(sorted(ENVIRONMENTS))}") from None
    return factory(**kwargs)
