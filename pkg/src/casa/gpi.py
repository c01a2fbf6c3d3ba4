"""Policy-evaluation and policy-improvement gradients and their combination.

All three directions are ascent directions under the sign convention

    ∇L_V = mean_i (v̂_i - V(s_i)) ∇V(s_i)
    ∇L_Q = mean_i (q̂_i - Q(s_i,a_i)) ∇Q(s_i,a_i)
    ∇J   = mean_i τ ρ_i (q̂_i - V(s_i)) ∇log π(a_i|s_i)

so stepping along ``+η·combined_update`` shrinks both squared errors and
raises the policy objective.  Targets are constants.  Each direction is the
gradient of one surrogate scalar whose coefficients are frozen numbers, so a
batch costs one backward pass.

The ``exact_*`` functions replace the action sample by the full sum over
actions weighted by π; the identity checks are run in that mode, where they
hold to rounding error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .head import CasaHead, HeadVariant, PolicyUnderflowError


class GpiError(ValueError):
    pass


@dataclass(frozen=True)
class GpiWeights:
    alpha1: float = 1.0
    alpha2: float = 10.0
    alpha3: float = 10.0

    def __post_init__(self):
        w = (self.alpha1, self.alpha2, self.alpha3)
        if any(not np.isfinite(x) or x < 0 for x in w):
            raise GpiError(f"weights must be finite and non-negative, got {w}")
        if not any(w):
            raise GpiError("at least one weight must be positive")

    @classmethod
    def balanced(cls) -> "GpiWeights":
        return cls(0.5, 1.0, 1.0)

    def scaled(self, k: float) -> "GpiWeights":
        return GpiWeights(k * self.alpha1, k * self.alpha2, k * self.alpha3)

    def to_dict(self) -> dict:
        return {"alpha1": self.alpha1, "alpha2": self.alpha2, "alpha3": self.alpha3}


@dataclass
class LossBatch:
    states: np.ndarray
    actions: np.ndarray
    v_targets: np.ndarray
    q_targets: np.ndarray
    rho: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.v_targets = np.asarray(self.v_targets, dtype=np.float64)
        self.q_targets = np.asarray(self.q_targets, dtype=np.float64)
        n = self.actions.shape[0]
        self.rho = np.ones(n) if self.rho is None else np.asarray(self.rho, dtype=np.float64)
        for name in ("v_targets", "q_targets", "rho"):
            if getattr(self, name).shape != (n,):
                raise GpiError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if len(self.states) != n:
            raise GpiError(f"{len(self.states)} states for {n} actions")

    def __len__(self):
        return self.actions.shape[0]


def effective_tau(head: CasaHead) -> float:
    """Temperature of the head's softmax (plain logits use 1)."""
    return 1.0 if head.variant is HeadVariant.PLAIN_LOGIT else head.tau


def _onehot(actions, n_actions, coef):
    out = np.zeros((len(actions), n_actions))
    out[np.arange(len(actions)), actions] = coef
    return out


def _grad_of(root: ad.Node, head: CasaHead) -> np.ndarray:
    ad.forward(root)
    return ad.backward(root, head.params)


def _check_positive(pi: np.ndarray, actions=None):
    probs = pi if actions is None else pi[np.arange(len(actions)), actions]
    if (probs < ad.LOG_FLOOR).any():
        raise PolicyUnderflowError("zero policy probability where log π is differentiated")


def loss_gradients(head: CasaHead, batch: LossBatch, tau: float | None = None, use_is: bool = True) -> dict[str, np.ndarray]:
    """``{"Lv", "Lq", "J"}`` ascent directions from one graph over the batch."""
    if len(batch) == 0:
        raise GpiError("empty batch")
    tau = effective_tau(head) if tau is None else float(tau)
    g = head.evaluate(batch.states)
    n, n_actions = len(batch), head.n_actions
    v = g.v.value[:, 0]
    q = g.q.value[np.arange(n), batch.actions]
    _check_positive(g.pi.value, batch.actions)
    rho = batch.rho if use_is else np.ones(n)
    out = {
        "Lv": _grad_of(ad.mean(ad.mul((batch.v_targets - v)[:, None], g.v)), head),
        "Lq": _grad_of(ad.mean(ad.wsum(_onehot(batch.actions, n_actions, batch.q_targets - q), g.q)), head),
        "J": _grad_of(ad.mean(ad.wsum(_onehot(batch.actions, n_actions, tau * rho * (batch.q_targets - v)), g.log_pi)), head),
    }
    for name, vec in out.items():
        if not np.isfinite(vec).all():
            raise FloatingPointError(f"non-finite gradient in ∇{name}")
    return out


def grad_Lv(head: CasaHead, batch: LossBatch) -> np.ndarray:
    return loss_gradients(head, batch)["Lv"]


def grad_Lq(head: CasaHead, batch: LossBatch) -> np.ndarray:
    return loss_gradients(head, batch)["Lq"]


def grad_J(head: CasaHead, batch: LossBatch, tau: float | None = None, use_is: bool = True) -> np.ndarray:
    return loss_gradients(head, batch, tau, use_is)["J"]


def combine(grads: dict[str, np.ndarray], weights: GpiWeights) -> np.ndarray:
    return weights.alpha1 * grads["Lv"] + weights.alpha2 * grads["Lq"] + weights.alpha3 * grads["J"]


def combined_update(head: CasaHead, batch: LossBatch, weights: GpiWeights, tau: float | None = None,
                    use_is: bool = True) -> np.ndarray:
    return combine(loss_gradients(head, batch, tau, use_is), weights)


def entropy(pi) -> np.ndarray:
    """-Σ π log π along the last axis, with 0·log 0 = 0."""
    pi = np.asarray(pi, dtype=np.float64)
    safe = np.where(pi > 0, pi, 1.0)
    return -(pi * np.log(safe)).sum(axis=-1)


def grad_entropy(head: CasaHead, states) -> np.ndarray:
    """State-mean of ∇H[π(·|s)] = -Σ_a π(a|s) log π(a|s) ∇log π(a|s)."""
    g = head.evaluate([states] if np.ndim(states) == 0 else states)
    pi = g.pi.value
    _check_positive(pi)
    return _grad_of(ad.mean(ad.wsum(-pi * np.log(pi), g.log_pi)), head)


# --------------------------------------------------------------------------
# exact action expectations


def exact_gradients(head: CasaHead, states, q_targets) -> dict[str, np.ndarray]:
    """Directions with Σ_a π(a|s)(·) in place of the sampled action, averaged over ``states``.

    ``q_targets`` has shape (len(states), n_actions).  Returns ``Lq``, ``J``
    (ρ ≡ 1), ``shared`` = E_π[(Q - V) g] with g = τ∇log π, ``score`` =
    E_π[(Q - V)∇log π] and ``H`` = ∇H[π].
    """
    tau = effective_tau(head)
    g = head.evaluate(states)
    pi, q, v = g.pi.value, g.q.value, g.v.value
    _check_positive(pi)
    q_targets = np.asarray(q_targets, dtype=np.float64)
    if q_targets.shape != q.shape:
        raise GpiError(f"q_targets shape {q_targets.shape} does not match {q.shape}")
    lq = _grad_of(ad.mean(ad.wsum(pi * (q_targets - q), g.q)), head)
    j = _grad_of(ad.mean(ad.wsum(tau * pi * (q_targets - v), g.log_pi)), head)
    score = _grad_of(ad.mean(ad.wsum(pi * (q - v), g.log_pi)), head)
    h = _grad_of(ad.mean(ad.wsum(-pi * np.log(pi), g.log_pi)), head)
    return {"Lq": lq, "J": j, "shared": tau * score, "score": score, "H": h}


def _sampled_gradients(head: CasaHead, states, q_targets, n_samples: int, seed: int) -> dict[str, np.ndarray]:
    """Batch means over (s, a) draws: s uniform over ``states``, a ~ π(·|s).

    The identity's left-hand sides (∇J, ∇L_Q) are sample averages; the
    structural terms stay exact per drawn state, so the residual measures the
    action-sampling error alone.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    states = np.asarray(states)
    q_targets = np.asarray(q_targets, dtype=np.float64)
    idx = rng.integers(0, len(states), size=n_samples)
    drawn = states[idx]
    tau = effective_tau(head)
    g = head.evaluate(drawn)
    pi, q, v = g.pi.value, g.q.value, g.v.value
    _check_positive(pi)
    cum = np.cumsum(pi, axis=1)
    actions = np.minimum((cum < rng.random(n_samples)[:, None]).sum(axis=1), head.n_actions - 1)
    rows = np.arange(n_samples)
    qt = q_targets[idx, actions]
    lq = _grad_of(ad.mean(ad.wsum(_onehot(actions, head.n_actions, qt - q[rows, actions]), g.q)), head)
    j = _grad_of(ad.mean(ad.wsum(_onehot(actions, head.n_actions, tau * (qt - v[:, 0])), g.log_pi)), head)
    score = _grad_of(ad.mean(ad.wsum(pi * (q - v), g.log_pi)), head)
    h = _grad_of(ad.mean(ad.wsum(-pi * np.log(pi), g.log_pi)), head)
    score_sampled = _grad_of(ad.mean(ad.wsum(_onehot(actions, head.n_actions, q[rows, actions] - v[:, 0]), g.log_pi)), head)
    return {"Lq": lq, "J": j, "shared": tau * score, "score": score_sampled, "H": h}


def _grads(head, states, q_targets, n_samples, seed):
    if n_samples is None:
        return exact_gradients(head, states, q_targets)
    return _sampled_gradients(head, states, q_targets, n_samples, seed)


def verify_identity_11(head: CasaHead, states, q_targets, n_samples: int | None = None, seed: int = 0) -> float:
    """max |∇J - ∇L_Q - E_π[(Q - V) g]|."""
    d = _grads(head, states, q_targets, n_samples, seed)
    return float(np.abs(d["J"] - d["Lq"] - d["shared"]).max())


def verify_identity_12(head: CasaHead, states, q_targets, n_samples: int | None = None, seed: int = 0) -> float:
    """max |∇L_Q - ∇J - τ²∇H[π]|."""
    tau = effective_tau(head)
    d = _grads(head, states, q_targets, n_samples, seed)
    return float(np.abs(d["Lq"] - d["J"] - tau * tau * d["H"]).max())


def verify_score_entropy(head: CasaHead, states, n_samples: int | None = None, seed: int = 0) -> float:
    """max |E_π[(Q - V)∇log π] + τ∇H[π]|; sampled mode averages the first term over drawn actions."""
    tau = effective_tau(head)
    d = _grads(head, states, np.zeros((len(states), head.n_actions)), n_samples, seed)
    return float(np.abs(d["score"] + tau * d["H"]).max())


# --------------------------------------------------------------------------
# optimiser


class GradientAscent:
    """θ ← θ + lr·clip(d), with d rescaled to norm ``clip_norm`` when longer."""

    def __init__(self, lr: float = 1e-3, clip_norm: float | None = 50.0):
        if not lr > 0:
            raise GpiError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.clip_norm = clip_norm

    def step(self, head: CasaHead, direction: np.ndarray) -> CasaHead:
        direction = np.asarray(direction, dtype=np.float64)
        if not np.isfinite(direction).all():
            raise FloatingPointError("non-finite update direction")
        norm = float(np.linalg.norm(direction))
        if self.clip_norm is not None and norm > self.clip_norm:
            direction = direction * (self.clip_norm / norm)
        return head.with_params(head.params.with_flat(head.params.flat() + self.lr * direction))


def sampled_residual_curve(head: CasaHead, states, q_targets, sizes=(100, 1000, 10_000), seeds=range(8),
                           identity: str = "11") -> np.ndarray:
    """Root-mean-square sampled residual per batch size over a fixed set of seeds."""
    check = {"11": verify_identity_11, "12": verify_identity_12,
             "score": lambda h, st, qt, **kw: verify_score_entropy(h, st, **kw)}[identity]
    return np.array([
        float(np.sqrt(np.mean([check(head, states, q_targets, n_samples=n, seed=s) ** 2 for s in seeds])))
        for n in sizes
    ])
