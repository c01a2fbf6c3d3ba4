"""Seeded single-process training loop: collect, estimate targets, combine gradients, step.

Every update draws its randomness from one Philox stream keyed by the run
seed, so a config plus a seed fixes the CSV byte for byte.  Environments are
tabular, so the head is evaluated once per update on every state and the
estimators read values from those tables; gradients still flow through the
head graph built over the batch's states.
"""
from __future__ import annotations

import collections
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gpi, traces
from .diagnostics import AngleReport, MetricsWriter, angle_panel
from .envs import Env, make_env
from .head import CasaHead, HeadVariant
from .mdp import TabularPolicy, Trajectory, TrajectoryBatch, epsilon_greedy_probs, make_rng, sample_trajectories

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class AlgoRule:
    variant: HeadVariant
    weights: gpi.GpiWeights
    estimator: str  # "gae", "drtrace" or "nstep"
    behaviour: str  # "pi" or "egreedy"
    use_replay: bool
    require_zero: tuple = ()
    require_positive: tuple = ("alpha3",)
    tau: float = 0.1


_BALANCED = gpi.GpiWeights.balanced()
ALGOS = {
    "ppo_casa": AlgoRule(HeadVariant.CASA, _BALANCED, "gae", "pi", False, (), ("alpha2", "alpha3")),
    "ppo_plain": AlgoRule(HeadVariant.PLAIN_LOGIT, gpi.GpiWeights(0.5, 0.0, 1.0), "gae", "pi", False, ("alpha2",)),
    "r2d2_casa": AlgoRule(HeadVariant.CASA, _BALANCED, "drtrace", "egreedy", True, (), ("alpha2", "alpha3")),
    "r2d2_plain": AlgoRule(HeadVariant.TYPE4, gpi.GpiWeights(0.0, 1.0, 0.0), "nstep", "egreedy", True,
                           ("alpha1", "alpha3"), ("alpha2",)),
    "casa_drtrace": AlgoRule(HeadVariant.CASA, gpi.GpiWeights(), "drtrace", "pi", True, (), ("alpha2", "alpha3"), 1.0),
}
for _k, _v in enumerate((HeadVariant.TYPE1, HeadVariant.TYPE2, HeadVariant.TYPE3, HeadVariant.TYPE4, HeadVariant.TYPE5), 1):
    ALGOS[f"ablation_type{_k}"] = AlgoRule(_v, _BALANCED, "gae", "pi", False, (), ("alpha2", "alpha3"))

REWARD_SHAPES = ("none", "clip01", "log_shape")


def reward_shape(r, mode: str = "none"):
    r = np.asarray(r, dtype=np.float64)
    if mode == "none":
        return r
    if mode == "clip01":
        return np.clip(r, 0.0, 1.0)
    if mode == "log_shape":
        return np.log(np.abs(r) + 1.0) * (2.0 * (r >= 0) - 1.0 * (r < 0))
    raise ConfigError(f"unknown reward shape {mode!r}; valid: {', '.join(REWARD_SHAPES)}")


@dataclass
class RunConfig:
    algo: str = "casa_drtrace"
    env: str = "chain"
    head_variant: str | None = None
    trace: dict = field(default_factory=dict)
    weights: dict | None = None
    tau: float | None = None
    gamma: float = 0.9
    epsilon: float = 0.1
    batch_size: int = 8
    total_updates: int = 2000
    log_period: int = 100
    seed: int = 0
    reward_shape: str = "none"
    lr: float = 1e-3
    clip_norm: float | None = 50.0
    hidden: list = field(default_factory=lambda: [32, 32])
    episodes_per_collect: int = 4
    replay_capacity: int = 256
    sample_reuse: int = 2
    gae_lambda: float = 0.8
    n_step: int = 5
    target_period: int = 100
    env_kwargs: dict = field(default_factory=dict)
    panel_samples: int = 32

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; valid: {', '.join(ALGOS)}")
        rule = ALGOS[self.algo]
        variant = HeadVariant(self.head_variant) if self.head_variant is not None else rule.variant
        if variant is not rule.variant:
            raise ConfigError(f"algo {self.algo} requires head_variant {rule.variant.value}, got {variant.value}")
        self.head_variant = variant.value
        w = gpi.GpiWeights(**self.weights) if self.weights is not None else rule.weights
        for name in rule.require_zero:
            if getattr(w, name) != 0:
                raise ConfigError(f"algo {self.algo} requires {name} = 0")
        for name in rule.require_positive:
            if not getattr(w, name) > 0:
                raise ConfigError(f"algo {self.algo} requires {name} > 0")
        self.weights = w.to_dict()
        trace = dict(self.trace)
        if "gamma" in trace and trace["gamma"] != self.gamma:
            raise ConfigError(f"trace gamma {trace['gamma']} contradicts run gamma {self.gamma}")
        trace["gamma"] = self.gamma
        self.trace = traces.TraceSpec(**trace).to_dict()
        if self.reward_shape not in REWARD_SHAPES:
            raise ConfigError(f"unknown reward shape {self.reward_shape!r}; valid: {', '.join(REWARD_SHAPES)}")
        for name in ("batch_size", "log_period", "episodes_per_collect", "replay_capacity", "sample_reuse",
                     "n_step", "target_period", "panel_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.total_updates < 0:
            raise ConfigError("total_updates must be non-negative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.tau is None:
            self.tau = rule.tau
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    @property
    def rule(self) -> AlgoRule:
        return ALGOS[self.algo]

    def trace_spec(self) -> traces.TraceSpec:
        return traces.TraceSpec(**self.trace)

    def gpi_weights(self) -> gpi.GpiWeights:
        return gpi.GpiWeights(**self.weights)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(extra))}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ReplayBuffer:
    """FIFO store of whole trajectories; sampling is uniform with replacement."""

    def __init__(self, capacity: int, sample_reuse: int = 1):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.sample_reuse = sample_reuse
        self._items: collections.deque[Trajectory] = collections.deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def add(self, trajectories):
        for tr in trajectories:
            # private copies: later policy changes must not touch stored μ(a|s)
            self._items.append(Trajectory(tr.states.copy(), tr.actions.copy(), tr.rewards.copy(),
                                          tr.behavior_probs.copy(), tr.dones.copy()))

    def sample(self, n: int, rng: np.random.Generator) -> list[Trajectory]:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def entries(self) -> list[Trajectory]:
        return list(self._items)


@dataclass
class RunResult:
    metrics_path: Path
    init_checkpoint: Path
    final_checkpoint: Path
    head: CasaHead
    episode_returns: list
    optimal_return: float
    rows: list = field(default_factory=list)

    def final_mean_return(self, n: int = 100) -> float:
        tail = self.episode_returns[-n:]
        return float(np.mean(tail)) if tail else float("nan")


def _discounted_returns(batch: TrajectoryBatch, gamma: float) -> list[float]:
    p = batch.padded()
    disc = gamma ** np.arange(p.rewards.shape[1])
    return [float(x) for x in (p.rewards * p.mask * disc).sum(axis=1)]


def _shaped(batch: TrajectoryBatch, mode: str) -> list[Trajectory]:
    out = []
    for tr in batch.trajectories:
        out.append(Trajectory(tr.states, tr.actions, reward_shape(tr.rewards, mode), tr.behavior_probs, tr.dones))
    return out


class Trainer:
    def __init__(self, config: RunConfig, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.env: Env = make_env(config.env, gamma=config.gamma, **config.env_kwargs)
        self.mdp = self.env.mdp
        self.rng = make_rng(config.seed)
        n_states, n_actions = self.mdp.n_states, self.mdp.n_actions
        self.head = CasaHead.init(n_states, n_actions, tuple(config.hidden), config.tau,
                                  HeadVariant(config.head_variant), seed=int(self.rng.integers(2**63)))
        self.target_params = self.head.params.copy()
        self.opt = gpi.GradientAscent(config.lr, config.clip_norm)
        self.spec = config.trace_spec()
        self.weights = config.gpi_weights()
        self.replay = ReplayBuffer(config.replay_capacity, config.sample_reuse)
        self.all_states = np.arange(n_states)
        self.returns: list[float] = []
        self.fresh: list[Trajectory] = []

    # -- acting --------------------------------------------------------------

    def tables(self, params=None) -> dict[str, np.ndarray]:
        return self.head.forward_batch(self.all_states, params)

    def behaviour(self, tables) -> np.ndarray:
        if self.config.rule.behaviour == "egreedy":
            return epsilon_greedy_probs(tables["q"], self.config.epsilon)
        return tables["pi"]

    def collect(self, tables):
        mu = TabularPolicy(self.behaviour(tables))
        batch = sample_trajectories(self.mdp, mu, self.config.episodes_per_collect, self.env.max_steps,
                                    seed=int(self.rng.integers(2**63)), start_states=self.env.start_state)
        self.returns.extend(_discounted_returns(batch, self.config.gamma))
        self.fresh = _shaped(batch, self.config.reward_shape)
        if self.config.rule.use_replay:
            self.replay.add(self.fresh)

    # -- learning ------------------------------------------------------------

    def training_batch(self) -> TrajectoryBatch:
        if self.config.rule.use_replay:
            return TrajectoryBatch(self.replay.sample(self.config.batch_size, self.rng))
        return TrajectoryBatch(self.fresh)

    def loss_batch(self, batch: TrajectoryBatch, tables) -> gpi.LossBatch:
        rule, cfg = self.config.rule, self.config
        p = batch.padded()
        mask = p.mask
        values, pi_taken = traces.step_values_from_tables(batch, tables["v"], tables["q"], tables["pi"])
        rho = np.ones_like(pi_taken)
        if rule.estimator == "drtrace":
            tt = traces.dr_trace_targets(batch, values, pi_taken, self.spec)
            v_t, q_t, rho = tt.v_targets, tt.q_targets, tt.rho_clipped
        elif rule.estimator == "gae":
            adv = traces.gae(batch, values.v, cfg.gamma, cfg.gae_lambda)
            v_t = values.v[:, :-1] + adv
            q_t = v_t
        else:
            target = self.tables(self.target_params)["q"]
            q_t = traces.nstep_double_q(batch, tables["q"][p.states], target[p.states], cfg.gamma, cfg.n_step)
            v_t = q_t
        return gpi.LossBatch(p.states[:, :-1][mask], p.actions[mask], v_t[mask], q_t[mask], rho[mask])

    def update(self, step: int, lb: gpi.LossBatch):
        try:
            grads = gpi.loss_gradients(self.head, lb, use_is=self.config.rule.estimator == "drtrace")
        except FloatingPointError as exc:
            self.abort(step, "gpi", str(exc))
        direction = gpi.combine(grads, self.weights)
        if not np.isfinite(direction).all():
            self.abort(step, "gpi", "non-finite combined update")
        self.head = self.opt.step(self.head, direction)
        if not np.isfinite(self.head.params.flat()).all():
            self.abort(step, "optimizer", "non-finite parameters after step")

    def abort(self, step: int, module: str, reason: str):
        dump = {"step": step, "module": module, "reason": reason, "config": self.config.to_dict(),
                "head": self.head.to_dict()}
        path = self.out / "abort_dump.json"
        path.write_text(json.dumps(dump))
        raise TrainingAborted(f"step {step}: {module}: {reason} (dump at {path})")

    def panel(self, lb: gpi.LossBatch) -> tuple[AngleReport, float]:
        k = min(len(lb), self.config.panel_samples)
        sub = gpi.LossBatch(lb.states[:k], lb.actions[:k], lb.v_targets[:k], lb.q_targets[:k], lb.rho[:k])
        report = angle_panel(self.head, sub, use_is=self.config.rule.estimator == "drtrace")
        pi = self.head.forward_batch(lb.states)["pi"]
        return report, float(gpi.entropy(pi).mean())

    def run(self) -> RunResult:
        cfg = self.config
        init_path, final_path = self.out / "init_checkpoint.json", self.out / "final_checkpoint.json"
        metrics_path = self.out / "metrics.csv"
        self.head.save(init_path)
        rows = []
        with MetricsWriter(metrics_path) as writer:
            for step in range(cfg.total_updates):
                tables = self.tables()
                if step % cfg.sample_reuse == 0:
                    self.collect(tables)
                if cfg.rule.estimator == "nstep" and step % cfg.target_period == 0:
                    self.target_params = self.head.params.copy()
                lb = self.loss_batch(self.training_batch(), tables)
                if (step + 1) % cfg.log_period == 0:
                    report, ent = self.panel(lb)
                    ret = float(np.mean(self.returns[-100:])) if self.returns else float("nan")
                    writer.write(step + 1, ret, report, ent)
                    rows.append((step + 1, ret, report, ent))
                    log.info("step %d return %.4f chi %.6f cos_beta %.4f", step + 1, ret, report.chi, report.cos_beta)
                self.update(step, lb)
        self.head.save(final_path)
        return RunResult(metrics_path, init_path, final_path, self.head, self.returns, self.env.optimal_return(), rows)


def run_training(config: RunConfig, out_dir) -> RunResult:
    return Trainer(config, out_dir).run()
