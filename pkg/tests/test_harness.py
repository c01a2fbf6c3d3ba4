import json

import numpy as np
import pytest

from casa import gpi, harness
from casa.diagnostics import CSV_HEADER, read_metrics
from casa.envs import UnknownEnvError, make_env
from casa.harness import ALGOS, ConfigError, ReplayBuffer, RunConfig, reward_shape, run_training
from casa.mdp import Trajectory, make_rng


def tiny(**kw):
    base = dict(total_updates=20, log_period=10, hidden=[8], batch_size=4, episodes_per_collect=2)
    base.update(kw)
    return RunConfig(**base)


def test_reward_shapes():
    np.testing.assert_array_equal(reward_shape([-0.5, 2.0, 0.3], "clip01"), [0.0, 1.0, 0.3])
    assert reward_shape(0.0, "log_shape") == 0.0
    assert reward_shape(-3.0, "log_shape") == pytest.approx(-np.log(4.0), abs=1e-15)
    assert reward_shape(3.0, "log_shape") == pytest.approx(2 * np.log(4.0))
    assert reward_shape(-7.0, "none") == -7.0
    with pytest.raises(ConfigError):
        reward_shape(1.0, "tanh")


def test_environments():
    chain = make_env("chain")
    assert chain.mdp.n_states == 10
    assert chain.optimal_return() == pytest.approx(0.9 ** 8, abs=1e-12)
    assert chain.greedy_path() == list(range(10))
    grid = make_env("gridworld")
    assert len(grid.greedy_path()) - 1 == 8
    assert grid.optimal_return() == pytest.approx(0.9 ** 7, abs=1e-12)
    cliff = make_env("cliff")
    path = cliff.greedy_path()
    assert not set(path) & cliff.hazards
    assert path[-1] == 47
    assert cliff.optimal_return() == pytest.approx(-(1 - 0.9 ** 13) / 0.1, abs=1e-9)
    with pytest.raises(UnknownEnvError, match="chain, cliff, gridworld"):
        make_env("atari")
    with pytest.raises(ValueError):
        make_env("chain", n=1)


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.tau == 1.0 and cfg.lr == 1e-3 and cfg.head_variant == "CASA"
    assert cfg.weights == {"alpha1": 1.0, "alpha2": 10.0, "alpha3": 10.0}
    assert RunConfig(algo="ppo_casa").tau == 0.1
    assert RunConfig(algo="ppo_casa").weights == {"alpha1": 0.5, "alpha2": 1.0, "alpha3": 1.0}
    with pytest.raises(ConfigError, match="valid"):
        RunConfig(algo="dqn")
    with pytest.raises(ConfigError, match="head_variant"):
        RunConfig(algo="casa_drtrace", head_variant="Type4")
    with pytest.raises(ConfigError, match="alpha2"):
        RunConfig(algo="ppo_plain", weights={"alpha1": 0.5, "alpha2": 1.0, "alpha3": 1.0})
    with pytest.raises(ConfigError, match="alpha3"):
        RunConfig(algo="casa_drtrace", weights={"alpha1": 1.0, "alpha2": 1.0, "alpha3": 0.0})
    with pytest.raises(ConfigError, match="gamma"):
        RunConfig(trace={"gamma": 0.5})
    with pytest.raises(ConfigError):
        RunConfig(batch_size=0)
    with pytest.raises(ConfigError, match="unknown config fields"):
        RunConfig.from_dict({"algo": "casa_drtrace", "learning_rate": 0.1})


def test_config_round_trip(tmp_path):
    cfg = RunConfig(algo="r2d2_casa", seed=3, trace={"family": "DRTrace", "rho_bar": 1.05, "c_bar": 1.05})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(path) == cfg


def test_replay_buffer_is_fifo_and_keeps_private_copies():
    buf = ReplayBuffer(capacity=3)
    trajs = [Trajectory([i, i + 1], [0], [float(i)], [0.5], [False]) for i in range(5)]
    buf.add(trajs)
    assert len(buf) == 3
    assert [int(t.states[0]) for t in buf.entries()] == [2, 3, 4]
    trajs[4].behavior_probs[0] = 0.9
    assert buf.entries()[-1].behavior_probs[0] == 0.5
    drawn = buf.sample(50, make_rng(0))
    assert {int(t.states[0]) for t in drawn} == {2, 3, 4}
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(1, make_rng(0))


def test_zero_updates_writes_header_and_keeps_init(tmp_path):
    res = run_training(tiny(total_updates=0), tmp_path)
    assert res.metrics_path.read_text() == ",".join(CSV_HEADER) + "\n"
    assert res.init_checkpoint.read_bytes() == res.final_checkpoint.read_bytes()


def test_same_seed_same_csv(tmp_path):
    a = run_training(tiny(seed=4), tmp_path / "a")
    b = run_training(tiny(seed=4), tmp_path / "b")
    c = run_training(tiny(seed=5), tmp_path / "c")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    assert a.metrics_path.read_bytes() != c.metrics_path.read_bytes()


def test_casa_run_logs_chi_one(tmp_path):
    rows = read_metrics(run_training(tiny(), tmp_path).metrics_path)
    assert [r["step"] for r in rows] == [10, 20]
    for r in rows:
        assert r["chi"] == pytest.approx(1.0, abs=1e-9)
        assert -1 <= r["cos_beta"] <= 1 and r["entropy_pi"] >= 0


def test_nan_gradient_aborts_with_dump(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise FloatingPointError("non-finite gradient in ∇Lq")

    monkeypatch.setattr(gpi, "loss_gradients", broken)
    with pytest.raises(harness.TrainingAborted, match="gpi"):
        run_training(tiny(), tmp_path)
    dump = json.loads((tmp_path / "abort_dump.json").read_text())
    assert dump["step"] == 0 and dump["module"] == "gpi"
    assert "∇Lq" in dump["reason"]


@pytest.mark.parametrize("algo", sorted(ALGOS))
def test_every_algo_runs(tmp_path, algo):
    res = run_training(tiny(algo=algo), tmp_path)
    rows = read_metrics(res.metrics_path)
    assert len(rows) == 2
    assert all(np.isfinite(list(r.values())).all() for r in rows)


@pytest.mark.parametrize("env", ["gridworld", "cliff"])
def test_other_environments_run(tmp_path, env):
    res = run_training(tiny(env=env, reward_shape="clip01" if env == "cliff" else "none"), tmp_path)
    assert len(res.episode_returns) > 0
