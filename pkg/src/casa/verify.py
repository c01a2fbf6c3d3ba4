"""Property suites behind ``casa verify``.

Each check returns ``(name, passed, detail)``; a suite passes when every
check does.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import gpi, traces
from .head import CasaHead, HeadVariant, state_gradients
from .mdp import exact_q, exact_v, make_rng, random_mdp, random_policy

Check = tuple[str, bool, str]


def _heads(n: int, variant=HeadVariant.CASA, n_inputs=5, n_actions=3, hidden=(8, 8)) -> Iterator[CasaHead]:
    for seed in range(n):
        tau = float(make_rng(10_000 + seed).uniform(0.2, 2.0))
        yield CasaHead.init(n_inputs, n_actions, hidden, tau, variant, seed=seed)


def gradient_checks(n_heads: int = 20) -> list[Check]:
    out = []
    worst = 0.0
    for head in _heads(n_heads):
        for s in range(head.n_inputs):
            d = state_gradients(head, s)
            gap = np.abs(d["q"] - head.tau * d["log_pi"]).max()
            worst = max(worst, gap / (1.0 + np.abs(d["q"]).max()))
    out.append(("grad Q = tau grad log pi", worst <= 1e-10, f"max scaled gap {worst:.3g}"))

    worst = 0.0
    for variant in HeadVariant:
        head = next(_heads(1, variant))
        base = head.params
        rng = make_rng(7)
        states = rng.integers(0, head.n_inputs, 6)
        actions = rng.integers(0, head.n_actions, 6)
        batch = gpi.LossBatch(states, actions, rng.normal(size=6), rng.normal(size=6), rng.uniform(0, 1, 6))
        grads = gpi.loss_gradients(head, batch)
        out0 = head.forward_batch(states)
        rows = np.arange(6)

        def f_lq(p):
            o = head.forward_batch(states, p, frozen=base)
            return -0.5 * np.mean((batch.q_targets - o["q"][rows, actions]) ** 2)

        def f_j(p):
            o = head.forward_batch(states, p, frozen=base)
            return np.mean(gpi.effective_tau(head) * batch.rho * (batch.q_targets - out0["v"]) * np.log(o["pi"][rows, actions]))

        for name, f in (("Lq", f_lq), ("J", f_j)):
            worst = max(worst, ad.relative_error(grads[name], ad.finite_diff_grad(f, base)))
    out.append(("loss gradients vs central differences", worst <= 1e-4, f"max relative error {worst:.3g}"))
    return out


def _problem(seed: int, gamma: float = 0.9, n_states: int = 5, n_actions: int = 3):
    rng = make_rng(seed)
    mdp = random_mdp(n_states, n_actions, gamma, rng)
    pi = random_policy(n_states, n_actions, rng, floor=0.02)
    mu = random_policy(n_states, n_actions, rng, floor=0.02)
    return mdp, pi, mu, rng


def operator_checks(n_mdps: int = 10) -> list[Check]:
    out = []
    fp_gap = vt_gap = pi_gap = 0.0
    ok_routes = True
    for seed in range(n_mdps):
        mdp, pi, mu, rng = _problem(seed)
        spec = traces.TraceSpec(gamma=mdp.gamma)
        oracle = traces.clipped_oracle(mdp, pi, mu, spec)
        try:
            s = traces.exact_operator_S(oracle, mdp, pi, mu, spec)
            t = traces.exact_operator_T(oracle, mdp, pi, mu, spec)
            vt = traces.exact_vtrace_operator(oracle.v, mdp, pi, mu, spec)
            start = traces.ValuePair.from_advantage(rng.normal(size=(5, 3)), rng.normal(size=5), pi)
            traces.exact_operator_T(start, mdp, pi, mu, spec)
        except traces.RouteMismatchError:
            ok_routes = False
            continue
        fp_gap = max(fp_gap, np.abs(s - oracle.v).max(), np.abs(t - oracle.q).max())
        vt_gap = max(vt_gap, np.abs(vt - oracle.v).max())
        final, _ = traces.iterate_U(start, mdp, pi, mu, spec, 300,
                                    reference=traces.ValuePair(exact_v(mdp, pi), exact_q(mdp, pi)))
        pi_gap = max(pi_gap, final.distance(traces.ValuePair(exact_v(mdp, pi), exact_q(mdp, pi))))
    out.append(("series and linear-solve routes agree", ok_routes, "tolerance 1e-9"))
    out.append(("S and T fix the clipped-policy values", fp_gap < 1e-9, f"max gap {fp_gap:.3g}"))
    out.append(("V-trace operator fixes the clipped-policy value", vt_gap < 1e-9, f"max gap {vt_gap:.3g}"))
    out.append(("centred U iteration reaches (Q^pi, V^pi)", pi_gap < 1e-8, f"max gap {pi_gap:.3g}"))

    x = np.linspace(-1e6, 1e6, 10_001)
    rt = float(np.abs(traces.value_rescale_inv(traces.value_rescale(x)) - x).max())
    out.append(("value rescale round trip", rt <= 1e-9, f"max error {rt:.3g}"))
    return out


def identity_checks(n_heads: int = 20) -> list[Check]:
    worst = {"11": 0.0, "12": 0.0, "score": 0.0}
    for head in _heads(n_heads):
        rng = make_rng(head.params.flat().size + int(1e3 * head.tau))
        states = np.arange(head.n_inputs)
        qt = rng.normal(size=(head.n_inputs, head.n_actions))
        worst["11"] = max(worst["11"], gpi.verify_identity_11(head, states, qt))
        worst["12"] = max(worst["12"], gpi.verify_identity_12(head, states, qt))
        worst["score"] = max(worst["score"], gpi.verify_score_entropy(head, states))
    out = [(f"identity {k}", v < 1e-9, f"max residual {v:.3g}") for k, v in worst.items()]
    struct = 0.0
    for variant in (HeadVariant.CASA, HeadVariant.TYPE1, HeadVariant.TYPE2):
        for head in _heads(n_heads, variant):
            o = head.forward_batch(np.arange(head.n_inputs))
            struct = max(struct, np.abs((o["pi"] * o["q"]).sum(axis=1) - o["v"]).max())
    out.append(("E_pi[Q] = V for centred heads", struct <= 1e-10, f"max gap {struct:.3g}"))
    return out


SUITES: dict[str, Callable[[], list[Check]]] = {
    "gradients": gradient_checks,
    "operators": operator_checks,
    "identities": identity_checks,
}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        return [c for suite in SUITES.values() for c in suite()]
    return SUITES[name]()
