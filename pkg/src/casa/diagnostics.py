"""Gradient-consistency diagnostics: χ, cos β and the pairwise batch angles.

Two averaging orders are used and they are not interchangeable:

* χ averages per-sample cosines between ∇Q(s,a) and ∇log π(a|s);
* cos β and the other panel angles take the cosine of batch-mean gradients.

Every cosine is x·y / (max(‖x‖, 1e-8)·max(‖y‖, 1e-8)).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gpi
from .head import CasaHead, grad_log_pi, grad_q, state_gradients

NORM_GUARD = 1e-8
CSV_HEADER = ("step", "return", "chi", "cos_beta", "cos_Lv_J", "cos_Lv_Lq", "entropy_pi", "guard_hits")


class DiagnosticsError(ValueError):
    pass


class GuardCounter:
    """Counts cosine evaluations in which at least one norm hit the guard."""

    def __init__(self):
        self.hits = 0


def guarded_cosine(x, y, counter: GuardCounter | None = None) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DiagnosticsError(f"length mismatch: {x.size} vs {y.size}")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if counter is not None and (nx < NORM_GUARD or ny < NORM_GUARD):
        counter.hits += 1
    return float(x @ y) / (max(nx, NORM_GUARD) * max(ny, NORM_GUARD))


def chi_from_vectors(grad_q_rows, grad_log_pi_rows, counter: GuardCounter | None = None) -> float:
    """Mean of per-row guarded cosines (cosine first, then average)."""
    gq = np.asarray(grad_q_rows, dtype=np.float64)
    gl = np.asarray(grad_log_pi_rows, dtype=np.float64)
    if gq.shape != gl.shape or gq.ndim != 2 or gq.shape[0] == 0:
        raise DiagnosticsError(f"expected two equal non-empty (n, d) arrays, got {gq.shape} and {gl.shape}")
    nq = np.linalg.norm(gq, axis=1)
    nl = np.linalg.norm(gl, axis=1)
    if counter is not None:
        counter.hits += int(((nq < NORM_GUARD) | (nl < NORM_GUARD)).sum())
    cos = np.einsum("ij,ij->i", gq, gl) / (np.maximum(nq, NORM_GUARD) * np.maximum(nl, NORM_GUARD))
    return float(cos.mean())


def cosine_of_means(x_rows, y_rows, counter: GuardCounter | None = None) -> float:
    return guarded_cosine(np.mean(x_rows, axis=0), np.mean(y_rows, axis=0), counter)


def per_sample_gradients(head: CasaHead, states, actions) -> tuple[np.ndarray, np.ndarray]:
    """Rows ∇Q(s_i, a_i) and ∇log π(a_i|s_i); one graph per distinct state."""
    states = np.asarray(states)
    actions = np.asarray(actions, dtype=np.int64)
    keys = [s.tobytes() if np.ndim(s) else int(s) for s in states]
    cache: dict = {}
    gq = np.empty((len(actions), head.params.total_len))
    gl = np.empty_like(gq)
    for i, (key, s, a) in enumerate(zip(keys, states, actions)):
        if key not in cache:
            cache[key] = state_gradients(head, s, ("q", "log_pi"))
        gq[i] = cache[key]["q"][a]
        gl[i] = cache[key]["log_pi"][a]
    return gq, gl


def compute_chi(head: CasaHead, batch, counter: GuardCounter | None = None) -> float:
    gq, gl = per_sample_gradients(head, batch.states, batch.actions)
    return chi_from_vectors(gq, gl, counter)


def _loop_cosine(x, y) -> float:
    dot = math.fsum(a * b for a, b in zip(x, y))
    nx = math.sqrt(math.fsum(a * a for a in x))
    ny = math.sqrt(math.fsum(b * b for b in y))
    return dot / (max(nx, NORM_GUARD) * max(ny, NORM_GUARD))


def compute_chi_reference(head: CasaHead, batch) -> float:
    """Duplicate of ``compute_chi``: one graph per sample and scalar loops."""
    total = []
    for s, a in zip(batch.states, batch.actions):
        total.append(_loop_cosine(grad_q(head, s, int(a)), grad_log_pi(head, s, int(a))))
    return math.fsum(total) / len(total)


def compute_cos_beta(head: CasaHead, batch: gpi.LossBatch, counter: GuardCounter | None = None,
                     tau: float | None = None, use_is: bool = True) -> float:
    """Cosine between the batch-mean ∇L_Q and ∇J directions."""
    grads = gpi.loss_gradients(head, batch, tau, use_is)
    return guarded_cosine(grads["Lq"], grads["J"], counter)


def compute_cos_beta_reference(head: CasaHead, batch: gpi.LossBatch, tau: float | None = None,
                               use_is: bool = True) -> float:
    """Duplicate of ``compute_cos_beta`` from per-sample gradients and scalar loops."""
    tau = gpi.effective_tau(head) if tau is None else tau
    out = head.forward_batch(batch.states)
    n, d = len(batch), head.params.total_len
    lq = [0.0] * d
    j = [0.0] * d
    for i in range(n):
        a = int(batch.actions[i])
        wq = (batch.q_targets[i] - out["q"][i, a]) / n
        wj = tau * (batch.rho[i] if use_is else 1.0) * (batch.q_targets[i] - out["v"][i]) / n
        gq = grad_q(head, batch.states[i], a)
        gl = grad_log_pi(head, batch.states[i], a)
        for k in range(d):
            lq[k] += wq * gq[k]
            j[k] += wj * gl[k]
    return _loop_cosine(lq, j)


@dataclass
class AngleReport:
    chi: float
    cos_beta: float
    cos_Lv_J: float
    cos_Lv_Lq: float
    batch_size: int
    guard_hits: int


def panel_from_gradients(grad_q_rows, grad_log_pi_rows, lv, lq, j) -> AngleReport:
    """Assemble a report from per-sample rows and the three batch-mean directions."""
    counter = GuardCounter()
    chi = chi_from_vectors(grad_q_rows, grad_log_pi_rows, counter)
    return AngleReport(
        chi=chi,
        cos_beta=guarded_cosine(lq, j, counter),
        cos_Lv_J=guarded_cosine(lv, j, counter),
        cos_Lv_Lq=guarded_cosine(lv, lq, counter),
        batch_size=len(grad_q_rows),
        guard_hits=counter.hits,
    )


def angle_panel(head: CasaHead, batch: gpi.LossBatch, tau: float | None = None, use_is: bool = True) -> AngleReport:
    """All four cosines on one parameter snapshot; the head is not modified."""
    head = head.snapshot()
    gq, gl = per_sample_gradients(head, batch.states, batch.actions)
    grads = gpi.loss_gradients(head, batch, tau, use_is)
    return panel_from_gradients(gq, gl, grads["Lv"], grads["Lq"], grads["J"])


# --------------------------------------------------------------------------
# CSV metrics


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class MetricsWriter:
    """Append-only CSV with the fixed metrics header; floats written with round-trip precision."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self._fh.flush()

    def write(self, step: int, episode_return: float, report: AngleReport, entropy_pi: float):
        self._writer.writerow([
            _fmt(int(step)), _fmt(episode_return), _fmt(report.chi), _fmt(report.cos_beta),
            _fmt(report.cos_Lv_J), _fmt(report.cos_Lv_Lq), _fmt(entropy_pi), _fmt(int(report.guard_hits)),
        ])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise DiagnosticsError(f"unexpected header {header}")
        rows = []
        for row in reader:
            rec = dict(zip(header, row))
            rows.append({k: (int(v) if k in ("step", "guard_hits") else float(v)) for k, v in rec.items()})
    return rows
