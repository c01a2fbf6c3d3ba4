"""Off-policy return estimators and their exact tabular operators.

Sample estimators work on the padded layout of a ``TrajectoryBatch`` and
share one backward recursion (``kernels.discounted_trace``):

    DR-Trace   δ_t = r_t + γ V(s_{t+1}) - Q(s_t, a_t)
               v_t = V_t + Σ_k γ^k c_{t..t+k-1} ρ_{t+k} δ_{t+k}
               q_t = Q_t + δ_t + Σ_{k≥1} γ^k c_{t+1..t+k-1} ρ_{t+k} δ_{t+k}
    V-Trace    δ_t = r_t + γ V(s_{t+1}) - V(s_t), same weights as v_t above
    ReTrace    δ_t = r_t + γ Q(s_{t+1}, a_{t+1}) - Q(s_t, a_t)
               q_t = Q_t + Σ_k γ^k c_{t+1..t+k} δ_{t+k}

with ρ = min(π/μ, ρ̄), c = min(π/μ, c̄) and μ the stored behaviour
probability.  Past a terminal step every bootstrap value is zero; at a
non-terminal cut the caller's bootstrap column is used.

The exact operators evaluate the same expectations on a ``TabularMdp``,
each by a truncated power series and by a linear solve; the two routes must
agree before a result is returned.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mdp import Padded, TabularMdp, TabularPolicy, TrajectoryBatch, clipped_target_policy, exact_q, exact_v

TAIL_BOUND = 1e-12
ROUTE_TOL = 1e-9
STRUCTURE_TOL = 1e-9
RESCALE_EPS = 1e-3


class Family(str, enum.Enum):
    DRTRACE = "DRTrace"
    VTRACE = "VTrace"
    RETRACE = "ReTrace"


class TraceError(ValueError):
    pass


class StructureError(TraceError):
    pass


class RouteMismatchError(ArithmeticError):
    pass


def tail_horizon(gamma: float, bound: float = TAIL_BOUND) -> int:
    """Smallest K with γ^K < bound."""
    if gamma == 0.0:
        return 1
    return int(math.floor(math.log(bound) / math.log(gamma))) + 1


@dataclass(frozen=True)
class TraceSpec:
    family: Family = Family.DRTRACE
    rho_bar: float = 1.05
    c_bar: float = 1.05
    gamma: float = 0.99
    truncation_k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not (self.rho_bar > 0 and self.c_bar > 0):
            raise TraceError("rho_bar and c_bar must both be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise TraceError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.truncation_k is None:
            object.__setattr__(self, "truncation_k", tail_horizon(self.gamma))

    def check_tail(self):
        if self.gamma ** self.truncation_k >= TAIL_BOUND:
            raise TraceError(
                f"truncation_k={self.truncation_k} leaves a tail γ^K = {self.gamma ** self.truncation_k:.3g} >= {TAIL_BOUND}"
            )

    def to_dict(self) -> dict:
        return {"family": self.family.value, "rho_bar": self.rho_bar, "c_bar": self.c_bar,
                "gamma": self.gamma, "truncation_k": self.truncation_k}


@dataclass
class ValuePair:
    v: np.ndarray  # (S,)
    q: np.ndarray  # (S, A)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim != 2 or self.v.shape != (self.q.shape[0],):
            raise TraceError(f"value shapes disagree: v {self.v.shape}, q {self.q.shape}")

    @classmethod
    def from_advantage(cls, adv, v, pi: TabularPolicy) -> "ValuePair":
        """Q = A - E_π[A] + V, the centred structure."""
        adv = np.asarray(adv, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return cls(v, adv - (pi.probs * adv).sum(axis=1, keepdims=True) + v[:, None])

    def structure_gap(self, pi: TabularPolicy) -> float:
        return float(np.abs((pi.probs * self.q).sum(axis=1) - self.v).max())

    def distance(self, other: "ValuePair") -> float:
        return float(max(np.abs(self.v - other.v).max(), np.abs(self.q - other.q).max()))


@dataclass
class StepValues:
    """Approximator outputs aligned with a padded batch.

    ``v[:, t]`` is V(s_t) for t ≤ length (the column at the length is the
    bootstrap value); ``q[:, t]`` is Q(s_t, a_t) for t < length, and
    ``q[:, length]`` the bootstrap for estimators that read Q(s_{t+1}, a_{t+1}).
    """

    v: np.ndarray  # (N, H + 1)
    q: np.ndarray  # (N, H + 1)


@dataclass
class TraceTargets:
    v_targets: np.ndarray  # (N, H)
    q_targets: np.ndarray  # (N, H)
    rho_clipped: np.ndarray
    c_clipped: np.ndarray
    mask: np.ndarray = field(repr=False)


def _padded(batch) -> Padded:
    return batch.padded() if isinstance(batch, TrajectoryBatch) else batch


def step_values_from_tables(batch, v_table, q_table, pi_table, boot_q: str = "pi"):
    """Look up tabular values along every trajectory.

    Returns ``(StepValues, pi_taken)`` with ``pi_taken[:, t] = π(a_t|s_t)``.
    The Q bootstrap at a non-terminal cut is E_π[Q(s_H, ·)] (``boot_q="pi"``)
    or V(s_H) (``boot_q="v"``).
    """
    p = _padded(batch)
    v_table = np.asarray(v_table, dtype=np.float64)
    q_table = np.asarray(q_table, dtype=np.float64)
    pi_table = np.asarray(pi_table, dtype=np.float64)
    n, h = p.actions.shape
    mask = p.mask
    v = v_table[p.states]
    q = np.zeros((n, h + 1))
    q[:, :h] = np.where(mask, q_table[p.states[:, :h], p.actions], 0.0)
    rows = np.arange(n)
    last = p.states[rows, p.lengths]
    if boot_q == "pi":
        q[rows, p.lengths] = (pi_table[last] * q_table[last]).sum(axis=1)
    else:
        q[rows, p.lengths] = v_table[last]
    v = np.where(np.arange(h + 1)[None, :] <= p.lengths[:, None], v, 0.0)
    pi_taken = np.where(mask, pi_table[p.states[:, :h], p.actions], 0.0)
    return StepValues(v, q), pi_taken


def clipped_ratios(pi_taken, behavior_probs, mask, rho_bar, c_bar):
    pi_taken = np.asarray(pi_taken, dtype=np.float64)
    mu = np.asarray(behavior_probs, dtype=np.float64)
    if (mask & (mu <= 0)).any():
        raise TraceError("behavior probability is zero on a sampled step")
    ratio = np.where(mask, pi_taken / np.where(mask, mu, 1.0), 0.0)
    return np.minimum(ratio, rho_bar), np.minimum(ratio, c_bar)


def _not_done(p: Padded) -> np.ndarray:
    return np.where(p.dones, 0.0, 1.0)


# --------------------------------------------------------------------------
# sample estimators

def dr_delta(r, v_next, q, gamma, done=False):
    """r + γ V(s') - Q(s, a), with V(s') read as 0 after a terminal step."""
    v_next = np.where(done, 0.0, v_next)
    return r + gamma * v_next - q


def dr_trace_targets(batch, values: StepValues, pi_taken, spec: TraceSpec) -> TraceTargets:
    p = _padded(batch)
    mask = p.mask
    h = p.actions.shape[1]
    rho, c = clipped_ratios(pi_taken, p.behavior_probs, mask, spec.rho_bar, spec.c_bar)
    v, q = values.v, values.q[:, :h]
    delta = np.where(mask, dr_delta(p.rewards, v[:, 1:], q, spec.gamma, p.dones), 0.0)
    g = kernels.discounted_trace(delta, rho, c, p.dones, p.lengths, spec.gamma)
    v_targets = np.where(mask, v[:, :h] + g[:, :h], 0.0)
    # own step enters with weight 1; later steps carry the same ρ·c products as the V target
    q_targets = np.where(mask, q + delta + spec.gamma * _not_done(p) * g[:, 1:], 0.0)
    return TraceTargets(v_targets, q_targets, rho, c, mask)


def v_trace_targets(batch, v_values, pi_taken, spec: TraceSpec) -> np.ndarray:
    p = _padded(batch)
    mask = p.mask
    h = p.actions.shape[1]
    v = np.asarray(v_values, dtype=np.float64)
    rho, c = clipped_ratios(pi_taken, p.behavior_probs, mask, spec.rho_bar, spec.c_bar)
    delta = np.where(mask, dr_delta(p.rewards, v[:, 1:], v[:, :h], spec.gamma, p.dones), 0.0)
    g = kernels.discounted_trace(delta, rho, c, p.dones, p.lengths, spec.gamma)
    return np.where(mask, v[:, :h] + g[:, :h], 0.0)


def v_trace_targets_direct(batch, v_values, pi_taken, spec: TraceSpec) -> np.ndarray:
    """Same targets as ``v_trace_targets`` by explicit double sums (reference path)."""
    p = _padded(batch)
    v = np.asarray(v_values, dtype=np.float64)
    out = np.zeros(p.actions.shape)
    for i, n in enumerate(p.lengths):
        rho = [min(pi_taken[i, t] / p.behavior_probs[i, t], spec.rho_bar) for t in range(n)]
        c = [min(pi_taken[i, t] / p.behavior_probs[i, t], spec.c_bar) for t in range(n)]
        delta = []
        for t in range(n):
            nxt = 0.0 if p.dones[i, t] else v[i, t + 1]
            delta.append(p.rewards[i, t] + spec.gamma * nxt - v[i, t])
        for t in range(n):
            total = v[i, t]
            for k in range(n - t):
                prod = 1.0
                for j in range(t, t + k):
                    prod *= c[j]
                total += spec.gamma ** k * prod * rho[t + k] * delta[t + k]
            out[i, t] = total
    return out


def retrace_targets(batch, q_values, pi_taken, spec: TraceSpec) -> np.ndarray:
    """ReTrace with a sampled next action in δ and trace c_{t+1..t+k}.

    ``q_values[:, t]`` is Q(s_t, a_t); column ``length`` is the bootstrap.
    """
    p = _padded(batch)
    mask = p.mask
    h = p.actions.shape[1]
    q = np.asarray(q_values, dtype=np.float64)
    _, c = clipped_ratios(pi_taken, p.behavior_probs, mask, spec.rho_bar, spec.c_bar)
    delta = np.where(mask, dr_delta(p.rewards, q[:, 1:], q[:, :h], spec.gamma, p.dones), 0.0)
    carry = np.zeros_like(c)
    carry[:, :-1] = c[:, 1:]
    g = kernels.discounted_trace(delta, np.ones_like(delta), carry, p.dones, p.lengths, spec.gamma)
    return np.where(mask, q[:, :h] + g[:, :h], 0.0)


def gae(batch, v_values, gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates Σ_k (γλ)^k δ_{t+k}; zero bootstrap after a terminal step."""
    if not 0.0 <= lam <= 1.0:
        raise TraceError(f"lambda must lie in [0, 1], got {lam}")
    p = _padded(batch)
    mask = p.mask
    h = p.actions.shape[1]
    v = np.asarray(v_values, dtype=np.float64)
    delta = np.where(mask, dr_delta(p.rewards, v[:, 1:], v[:, :h], gamma, p.dones), 0.0)
    carry = np.full(delta.shape, float(lam))
    g = kernels.discounted_trace(delta, np.ones_like(delta), carry, p.dones, p.lengths, gamma)
    return np.where(mask, g[:, :h], 0.0)


def value_rescale(x, eps: float = RESCALE_EPS):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + eps * x


def value_rescale_inv(y, eps: float = RESCALE_EPS):
    """Closed-form inverse of ``value_rescale``, polished by one Newton step."""
    y = np.asarray(y, dtype=np.float64)
    root = (np.sqrt(1.0 + 4.0 * eps * (np.abs(y) + 1.0 + eps)) - 1.0) / (2.0 * eps)
    x = np.sign(y) * (root * root - 1.0)
    slope = 0.5 / np.sqrt(np.abs(x) + 1.0) + eps
    return x - (value_rescale(x, eps) - y) / slope


def nstep_double_q(batch, q_online, q_target, gamma: float, n: int = 5, rescale: bool = True) -> np.ndarray:
    """h(Σ_{i<n} γ^i r_{t+i} + γ^n h⁻¹(Q_target(s_{t+n}, argmax_a Q_online(s_{t+n}, a)))).

    ``q_online`` and ``q_target`` have shape (N, H + 1, A) over the padded
    states.  Windows that hit a terminal step get no bootstrap; windows cut
    by the trajectory end bootstrap from the last stored state.
    """
    p = _padded(batch)
    q_online = np.asarray(q_online, dtype=np.float64)
    q_target = np.asarray(q_target, dtype=np.float64)
    n_traj, h = p.actions.shape
    out = np.zeros((n_traj, h))
    for i in range(n_traj):
        length = p.lengths[i]
        for t in range(length):
            total, disc, end = 0.0, 1.0, min(t + n, length)
            terminated = False
            for j in range(t, end):
                total += disc * p.rewards[i, j]
                disc *= gamma
                if p.dones[i, j]:
                    terminated = True
                    break
            if not terminated:
                a_star = int(np.argmax(q_online[i, end]))
                boot = q_target[i, end, a_star]
                total += disc * (value_rescale_inv(boot) if rescale else boot)
            out[i, t] = value_rescale(total) if rescale else total
    return out


# --------------------------------------------------------------------------
# exact operators

def _table_ratios(pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec):
    if ((mu.probs <= 0) & (pi.probs > 0)).any():
        raise TraceError("behaviour policy must be positive wherever the target policy is")
    ratio = np.divide(pi.probs, mu.probs, out=np.zeros_like(pi.probs), where=mu.probs > 0)
    return np.minimum(ratio, spec.rho_bar), np.minimum(ratio, spec.c_bar)


def _series_and_solve(op, x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Σ_{j<k} op^j x by repeated products, and (I - op)^{-1} x by LU."""
    acc = x.copy()
    term = x
    for _ in range(k - 1):
        term = op @ term
        acc = acc + term
    solved = np.linalg.solve(np.eye(op.shape[0]) - op, x)
    return acc, solved


def _agree(a, b, what):
    # absolute below magnitude 1, relative above it
    gap = float(np.abs(a - b).max(initial=0.0))
    if gap > ROUTE_TOL * max(1.0, float(np.abs(b).max(initial=0.0))):
        raise RouteMismatchError(f"{what}: series and linear-solve routes differ by {gap:.3g}")


def _corrections(values: ValuePair, mdp: TabularMdp, pi, mu, spec, kind: str):
    """Expected correction Σ_k γ^k E_μ[c_{t..t+k-1} ρ_{t+k} δ_{t+k}] per state, both routes."""
    spec.check_tail()
    p = mdp.killed_transition()
    rho, c = _table_ratios(pi, mu, spec)
    backup = mdp.reward + spec.gamma * p @ values.v
    if kind == "dr":
        delta = backup - values.q
    else:
        delta = backup - values.v[:, None]
    x = (mu.probs * rho * delta).sum(axis=1)
    x[mdp.terminal_mask] = 0.0
    m_c = spec.gamma * np.einsum("sa,sa,sat->st", mu.probs, c, p)
    m_c[mdp.terminal_mask] = 0.0
    series, solved = _series_and_solve(m_c, x, spec.truncation_k)
    _agree(series, solved, "correction series")
    return delta, series, solved


def exact_operator_S(values: ValuePair, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec) -> np.ndarray:
    """E_μ[V(s_t) + Σ_k γ^k c_{t..t+k-1} ρ_{t+k} δ^DR_{t+k}] for every start state."""
    _, _, solved = _corrections(values, mdp, pi, mu, spec, "dr")
    out = values.v + solved
    out[mdp.terminal_mask] = 0.0
    return out


def exact_operator_T(values: ValuePair, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec) -> np.ndarray:
    """E_μ[Q(s_t,a_t) + Σ_k γ^k c_{t+1..t+k-1} ρ̃_{t,k} δ^DR_{t+k}] for every (s, a).

    Sum route: own-step δ plus the propagated ρ·c series from s_{t+1}.
    Bellman route: r + γ Σ_{s'} p(s'|s,a) S(V)(s').
    """
    delta, series, solved = _corrections(values, mdp, pi, mu, spec, "dr")
    p = mdp.killed_transition()
    by_sum = values.q + delta + spec.gamma * p @ series
    by_bellman = mdp.reward + spec.gamma * p @ (values.v + solved)
    by_bellman[mdp.terminal_mask] = 0.0
    by_sum[mdp.terminal_mask] = 0.0
    _agree(by_sum, by_bellman, "T operator")
    return by_bellman


def exact_vtrace_operator(v: np.ndarray, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec) -> np.ndarray:
    values = ValuePair(v, np.zeros((mdp.n_states, mdp.n_actions)))
    _, _, solved = _corrections(values, mdp, pi, mu, spec, "v")
    out = np.asarray(v, dtype=np.float64) + solved
    out[mdp.terminal_mask] = 0.0
    return out


def exact_retrace_operator(q: np.ndarray, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec) -> np.ndarray:
    """E_μ[Q_t + Σ_k γ^k c_{t+1..t+k} δ^Q_{t+k}] with the sampled-next-action δ^Q."""
    spec.check_tail()
    q = np.asarray(q, dtype=np.float64)
    s_n, a_n = q.shape
    p = mdp.killed_transition()
    _, c = _table_ratios(pi, mu, spec)
    e = mdp.reward + spec.gamma * p @ (mu.probs * q).sum(axis=1) - q
    e[mdp.terminal_mask] = 0.0
    n_c = spec.gamma * np.einsum("sat,tb,tb->satb", p, mu.probs, c).reshape(s_n * a_n, s_n * a_n)
    n_c[np.repeat(mdp.terminal_mask, a_n)] = 0.0
    series, solved = _series_and_solve(n_c, e.ravel(), spec.truncation_k)
    _agree(series, solved, "ReTrace series")
    out = q + solved.reshape(s_n, a_n)
    out[mdp.terminal_mask] = 0.0
    return out


def clipped_oracle(mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec) -> ValuePair:
    """(Q, V) of the clipped target policy min(ρ̄μ, π)/Σ."""
    target = clipped_target_policy(pi, mu, spec.rho_bar)
    return ValuePair(exact_v(mdp, target), exact_q(mdp, target))


def apply_U(values: ValuePair, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec,
            recentre: bool = True) -> ValuePair:
    """One application of (Q, V) ↦ (T(Q) - E_π[Q] + S(V), S(V)).

    With ``recentre`` the new Q is re-expressed in the centred form
    Q = Ā + V (Ā ← Ā - E_π[Ā]), which is what refitting the advantage layer
    of a centred head does.  Without it the map is applied verbatim.
    """
    s_new = exact_operator_S(values, mdp, pi, mu, spec)
    t_new = exact_operator_T(values, mdp, pi, mu, spec)
    q_new = t_new - (pi.probs * values.q).sum(axis=1, keepdims=True) + s_new[:, None]
    if recentre:
        q_new = q_new - (pi.probs * q_new).sum(axis=1, keepdims=True) + s_new[:, None]
    q_new[mdp.terminal_mask] = 0.0
    return ValuePair(s_new, q_new)


def iterate_U(values: ValuePair, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec,
              n: int, reference: ValuePair | None = None):
    """Apply ``apply_U`` ``n`` times from a centred start.

    Returns the final pair and the sup-norm distance of every iterate to
    ``reference`` (default: the clipped-target-policy oracle).
    """
    gap = values.structure_gap(pi)
    if gap > STRUCTURE_TOL:
        raise StructureError(f"input violates E_π[Q] = V by {gap:.3g}")
    if reference is None:
        reference = clipped_oracle(mdp, pi, mu, spec)
    errors = np.empty(n)
    for i in range(n):
        values = apply_U(values, mdp, pi, mu, spec)
        errors[i] = values.distance(reference)
    return values, errors


def iterate_vtrace(v: np.ndarray, mdp: TabularMdp, pi: TabularPolicy, mu: TabularPolicy, spec: TraceSpec, n: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    for _ in range(n):
        v = exact_vtrace_operator(v, mdp, pi, mu, spec)
    return v
