"""Shared-backbone value/advantage heads: the CASA parameterisation and its ablations.

For the CASA variant

    π(·|s) = softmax(A(s,·) / τ)
    Ā(s,a) = A(s,a) - Σ_b sg(π(b|s)) A(s,b)
    Q(s,a) = Ā(s,a) + sg(V(s))

so that ∇Q(s,a) = τ ∇log π(a|s) holds exactly.  The other variants move or
drop the two stop-gradients, or give Q its own output layer.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector

DEFAULT_HIDDEN = (32, 32)


class HeadVariant(str, enum.Enum):
    CASA = "CASA"
    TYPE1 = "Type1"  # A - π·A + sg(V)
    TYPE2 = "Type2"  # A - sg(π)·A + V
    TYPE3 = "Type3"  # A + sg(V)
    TYPE4 = "Type4"  # A + V, plain dueling
    TYPE5 = "Type5"  # separate Q output layer
    PLAIN_LOGIT = "PlainLogit"  # π = softmax(logit), separate V and Q layers

    @property
    def has_q_head(self) -> bool:
        return self in (HeadVariant.TYPE5, HeadVariant.PLAIN_LOGIT)

    @property
    def centred(self) -> bool:
        """Whether E_π[Q] = V holds by construction."""
        return self in (HeadVariant.CASA, HeadVariant.TYPE1, HeadVariant.TYPE2)


class HeadError(ValueError):
    pass


class PolicyUnderflowError(HeadError):
    pass


@dataclass
class HeadOutput:
    v: float
    a: np.ndarray
    a_bar: np.ndarray
    pi: np.ndarray
    q: np.ndarray


@dataclass
class HeadGraph:
    """Graph nodes for a batch of states; every node has a leading batch axis."""

    v: ad.Node  # (B, 1)
    a: ad.Node  # (B, nA)
    a_bar: ad.Node
    pi: ad.Node
    log_pi: ad.Node
    q: ad.Node


class CasaHead:
    """MLP backbone (tanh) feeding linear V, A and (optionally) Q output layers.

    ``tau`` is fixed for the lifetime of the head and is not a parameter.
    Integer states are one-hot encoded over ``n_inputs``; float vectors are
    used as-is.
    """

    def __init__(self, params: ParamVector, n_inputs: int, n_actions: int, hidden=DEFAULT_HIDDEN,
                 tau: float = 1.0, variant=HeadVariant.CASA):
        if not tau > 0:
            raise HeadError(f"temperature must be positive, got {tau}")
        self.params = params
        self.n_inputs = int(n_inputs)
        self.n_actions = int(n_actions)
        self.hidden = tuple(int(h) for h in hidden)
        self.tau = float(tau)
        self.variant = HeadVariant(variant)
        self.clamp_events = 0
        expected = self.layer_shapes()
        got = {name: shape for name, shape, _ in params.segments}
        if list(got) != list(expected) or any(tuple(got[n]) != tuple(s) for n, s in expected.items()):
            raise HeadError(f"parameter layout {got} does not match architecture {expected}")

    # -- construction ------------------------------------------------------

    @staticmethod
    def _shapes(n_inputs, n_actions, hidden, variant):
        shapes = {}
        width = n_inputs
        for i, h in enumerate(hidden):
            shapes[f"backbone.{i}.w"] = (width, h)
            shapes[f"backbone.{i}.b"] = (h,)
            width = h
        shapes["v_head.w"] = (width, 1)
        shapes["v_head.b"] = (1,)
        shapes["a_head.w"] = (width, n_actions)
        shapes["a_head.b"] = (n_actions,)
        if HeadVariant(variant).has_q_head:
            shapes["q_head.w"] = (width, n_actions)
            shapes["q_head.b"] = (n_actions,)
        return shapes

    def layer_shapes(self) -> dict[str, tuple]:
        return self._shapes(self.n_inputs, self.n_actions, self.hidden, self.variant)

    @classmethod
    def init(cls, n_inputs: int, n_actions: int, hidden=DEFAULT_HIDDEN, tau: float = 1.0,
             variant=HeadVariant.CASA, seed: int = 0) -> "CasaHead":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, seeded."""
        rng = np.random.Generator(np.random.Philox(seed))
        segments = []
        for name, shape in cls._shapes(n_inputs, n_actions, tuple(hidden), variant).items():
            fan_in = shape[0] if name.endswith(".w") else _fan_in_of_bias(name, n_inputs, hidden)
            bound = 1.0 / math.sqrt(fan_in)
            segments.append((name, rng.uniform(-bound, bound, size=shape)))
        return cls(ParamVector(segments), n_inputs, n_actions, hidden, tau, variant)

    def with_params(self, params: ParamVector) -> "CasaHead":
        return CasaHead(params, self.n_inputs, self.n_actions, self.hidden, self.tau, self.variant)

    def snapshot(self) -> "CasaHead":
        return self.with_params(self.params.copy())

    # -- graph -------------------------------------------------------------

    def encode(self, states) -> np.ndarray:
        arr = np.asarray(states)
        if arr.dtype.kind in "iu" or (arr.dtype.kind == "b"):
            idx = np.atleast_1d(arr).astype(np.int64)
            if idx.ndim != 1 or (idx < 0).any() or (idx >= self.n_inputs).any():
                raise HeadError(f"state index outside [0, {self.n_inputs})")
            feats = np.zeros((idx.size, self.n_inputs))
            feats[np.arange(idx.size), idx] = 1.0
            return feats
        feats = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        if feats.shape[-1] != self.n_inputs:
            raise HeadError(f"feature width {feats.shape[-1]} does not match n_inputs={self.n_inputs}")
        return feats

    def _count_clamp(self, n):
        self.clamp_events += n

    def _trunk(self, feats: ad.Node, params: ParamVector):
        x = feats
        for i in range(len(self.hidden)):
            x = ad.tanh(x @ params.leaf(f"backbone.{i}.w") + params.leaf(f"backbone.{i}.b"))
        v = x @ params.leaf("v_head.w") + params.leaf("v_head.b")
        a = x @ params.leaf("a_head.w") + params.leaf("a_head.b")
        tau = 1.0 if self.variant is HeadVariant.PLAIN_LOGIT else self.tau
        return x, v, a, ad.softmax(a, tau)

    def build(self, states, params: ParamVector | None = None, frozen: ParamVector | None = None) -> HeadGraph:
        """Record the head's graph for a batch of states (not yet evaluated).

        ``frozen`` supplies the parameters seen through every stop-gradient;
        by default they are ``params`` themselves.  Evaluating at perturbed
        ``params`` with ``frozen`` held fixed is how the finite-difference
        oracle reproduces stop-gradient semantics.
        """
        params = self.params if params is None else params
        feats = ad.const(self.encode(states), name="input")
        x, v, a, pi = self._trunk(feats, params)
        if frozen is None or frozen is params:
            v_sg, pi_sg = ad.sg(v), ad.sg(pi)
        else:
            _, fv, _, fpi = self._trunk(feats, frozen)
            v_sg, pi_sg = ad.sg(fv), ad.sg(fpi)
        log_pi = ad.log(pi, on_clamp=self._count_clamp)

        var = self.variant
        if var in (HeadVariant.CASA, HeadVariant.TYPE2):
            a_bar = a - ad.wsum(pi_sg, a)
        elif var is HeadVariant.TYPE1:
            a_bar = a - ad.wsum(pi, a)
        else:
            a_bar = a

        if var in (HeadVariant.CASA, HeadVariant.TYPE1, HeadVariant.TYPE3):
            q = a_bar + v_sg
        elif var in (HeadVariant.TYPE2, HeadVariant.TYPE4):
            q = a_bar + v
        else:
            q = x @ params.leaf("q_head.w") + params.leaf("q_head.b")
            a_bar = q - v
        return HeadGraph(v=v, a=a, a_bar=a_bar, pi=pi, log_pi=log_pi, q=q)

    def evaluate(self, states, params: ParamVector | None = None, frozen: ParamVector | None = None) -> HeadGraph:
        g = self.build(states, params, frozen)
        for name in ("v", "a", "a_bar", "pi", "log_pi", "q"):
            node = getattr(g, name)
            ad.forward(node)
            if not np.isfinite(node.value).all():
                raise HeadError(f"non-finite values in layer '{name}'")
        return g

    # -- numpy views -------------------------------------------------------

    def forward_batch(self, states, params: ParamVector | None = None, frozen: ParamVector | None = None) -> dict[str, np.ndarray]:
        g = self.evaluate(states, params, frozen)
        return {"v": g.v.value[:, 0], "a": g.a.value, "a_bar": g.a_bar.value, "pi": g.pi.value, "q": g.q.value}

    def policy_table(self, states) -> np.ndarray:
        return self.forward_batch(states)["pi"]

    def __repr__(self):
        return (f"CasaHead(variant={self.variant.value}, tau={self.tau}, inputs={self.n_inputs}, "
                f"actions={self.n_actions}, hidden={self.hidden}, params={self.params.total_len})")

    # -- checkpoints -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "tau": self.tau,
            "n_inputs": self.n_inputs,
            "n_actions": self.n_actions,
            "hidden": list(self.hidden),
            "layer_shapes": {k: list(v) for k, v in self.layer_shapes().items()},
            "params": [float(x) for x in self.params.flat()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CasaHead":
        shapes = cls._shapes(doc["n_inputs"], doc["n_actions"], tuple(doc["hidden"]), doc["variant"])
        if {k: list(v) for k, v in shapes.items()} != doc["layer_shapes"]:
            raise HeadError("checkpoint layer shapes do not match its architecture fields")
        flat = np.array(doc["params"], dtype=np.float64)
        need = sum(int(np.prod(shape)) for shape in shapes.values())
        if flat.shape != (need,):
            raise HeadError(f"checkpoint holds {flat.size} parameters, architecture needs {need}")
        segments, offset = [], 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            segments.append((name, flat[offset: offset + n].reshape(shape)))
            offset += n
        return cls(ParamVector(segments), doc["n_inputs"], doc["n_actions"], tuple(doc["hidden"]), doc["tau"], doc["variant"])

    def to_json(self) -> str:
        # json emits floats via repr, the shortest string that round-trips
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CasaHead":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fan_in_of_bias(name: str, n_inputs: int, hidden) -> int:
    if name.startswith("backbone."):
        i = int(name.split(".")[1])
        return n_inputs if i == 0 else hidden[i - 1]
    return hidden[-1] if hidden else n_inputs


# --------------------------------------------------------------------------
# single-state operations

def head_forward(head: CasaHead, state) -> HeadOutput:
    out = head.forward_batch([state] if np.ndim(state) == 0 else np.atleast_2d(state))
    return HeadOutput(v=float(out["v"][0]), a=out["a"][0], a_bar=out["a_bar"][0], pi=out["pi"][0], q=out["q"][0])


def _pick(node: ad.Node, action: int, n_actions: int) -> ad.Node:
    onehot = np.zeros((1, n_actions))
    onehot[0, action] = 1.0
    return ad.mean(ad.wsum(onehot, node))


def _check_action(head: CasaHead, action: int):
    if not 0 <= action < head.n_actions:
        raise HeadError(f"action {action} outside [0, {head.n_actions})")


def grad_q(head: CasaHead, state, action: int) -> np.ndarray:
    """∇θ Q(s, a) over the full parameter vector."""
    _check_action(head, action)
    g = head.evaluate([state] if np.ndim(state) == 0 else np.atleast_2d(state))
    root = _pick(g.q, action, head.n_actions)
    ad.forward(root)
    return ad.backward(root, head.params)


def grad_log_pi(head: CasaHead, state, action: int) -> np.ndarray:
    """∇θ log π(a|s) over the full parameter vector."""
    _check_action(head, action)
    g = head.evaluate([state] if np.ndim(state) == 0 else np.atleast_2d(state))
    if g.pi.value[0, action] < ad.LOG_FLOOR:
        raise PolicyUnderflowError(f"π({action}|s) underflowed to {g.pi.value[0, action]!r}")
    root = _pick(g.log_pi, action, head.n_actions)
    ad.forward(root)
    return ad.backward(root, head.params)


def state_gradients(head: CasaHead, state, nodes=("q", "log_pi"), params: ParamVector | None = None) -> dict[str, np.ndarray]:
    """Per-action gradients of the named head outputs at one state.

    Returns ``{name: array (n_actions, total_len)}`` plus ``"values"`` with
    the forward values; one graph, one backward per (output, action).
    """
    params = head.params if params is None else params
    g = head.evaluate([state] if np.ndim(state) == 0 else np.atleast_2d(state), params)
    if "log_pi" in nodes and (g.pi.value[0] < ad.LOG_FLOOR).any():
        raise PolicyUnderflowError("policy probability underflow at this state")
    out = {}
    for name in nodes:
        node = getattr(g, name)
        rows = []
        for a in range(head.n_actions):
            root = _pick(node, a, head.n_actions)
            ad.forward(root)
            rows.append(ad.backward(root, params))
        out[name] = np.array(rows)
    out["values"] = {"v": float(g.v.value[0, 0]), "pi": g.pi.value[0].copy(), "q": g.q.value[0].copy(),
                     "a": g.a.value[0].copy()}
    return out


def grad_v(head: CasaHead, state) -> np.ndarray:
    g = head.evaluate([state] if np.ndim(state) == 0 else np.atleast_2d(state))
    root = ad.mean(g.v)
    ad.forward(root)
    return ad.backward(root, head.params)


def surrogate_policy(q_or_a, tau: float) -> np.ndarray:
    """softmax(x / τ) along the last axis; tends to argmax as τ → 0."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(q_or_a, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
