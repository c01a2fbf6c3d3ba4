import json

import numpy as np
import pytest

from casa.mdp import (
    TabularMdp, TabularPolicy, Trajectory, TrajectoryBatch, Transition, bellman_residual,
    clipped_target_policy, epsilon_greedy, epsilon_greedy_probs, exact_q, exact_v, make_rng,
    random_mdp, random_policy, sample_trajectories, value_iteration_v,
)

from _helpers import line_mdp, problem


def one_state(r=1.0, gamma=0.5):
    return TabularMdp(np.ones((1, 1, 1)), [[r]], gamma)


def sweep_oracle(mdp, pi, sweeps=10_000):
    """Plain loop value iteration, independent of the vectorised code."""
    v = [0.0] * mdp.n_states
    for _ in range(sweeps):
        v = [
            sum(pi.probs[s, a] * (mdp.reward[s, a] + mdp.gamma * sum(mdp.transition[s, a, t] * v[t]
                                                                       for t in range(mdp.n_states)))
                for a in range(mdp.n_actions))
            for s in range(mdp.n_states)
        ]
    return np.array(v)


def test_single_state_values():
    mdp = one_state()
    pi = TabularPolicy([[1.0]])
    assert exact_v(mdp, pi)[0] == pytest.approx(2.0, abs=1e-14)
    assert exact_q(mdp, pi)[0, 0] == pytest.approx(2.0, abs=1e-14)
    assert not exact_v(one_state(r=0.0), pi).any()


def test_random_mdp_matches_value_iteration():
    mdp, pi, _, _ = problem(3)
    v = exact_v(mdp, pi)
    oracle = sweep_oracle(mdp, pi, sweeps=400)
    assert np.abs(v - oracle).max() < 1e-8
    assert np.abs(v - value_iteration_v(mdp, pi)).max() < 1e-8
    q_oracle = mdp.reward + mdp.gamma * mdp.transition @ oracle
    assert np.abs(exact_q(mdp, pi) - q_oracle).max() < 1e-8


@pytest.mark.parametrize("seed", range(10))
def test_bellman_residual_and_expectation_identity(seed):
    mdp, pi, _, _ = problem(seed, gamma=0.99)
    v = exact_v(mdp, pi)
    assert bellman_residual(mdp, pi, v).max() < 1e-10
    assert np.abs((pi.probs * exact_q(mdp, pi)).sum(axis=1) - v).max() < 1e-10


def test_clipped_target_policy_examples():
    pi = TabularPolicy([[0.9, 0.1]])
    mu = TabularPolicy([[0.5, 0.5]])
    np.testing.assert_allclose(clipped_target_policy(pi, mu, 1.05).probs, [[0.84, 0.16]], atol=1e-15)
    np.testing.assert_allclose(clipped_target_policy(pi, pi, 1.0).probs, pi.probs, atol=1e-15)
    _, p, m, _ = problem(1, floor=0.01)
    np.testing.assert_allclose(clipped_target_policy(p, m, 1e6).probs, p.probs, atol=1e-9)


def test_clipped_target_policy_rows_and_errors():
    for seed in range(5):
        _, p, m, _ = problem(seed, floor=0.01)
        out = clipped_target_policy(p, m, 1.05).probs
        assert np.abs(out.sum(axis=1) - 1).max() <= 1e-12
    pi = TabularPolicy([[0.5, 0.5]])
    with pytest.raises(ValueError):
        clipped_target_policy(pi, TabularPolicy([[1.0, 0.0]]), 1.05)
    with pytest.raises(ValueError):
        clipped_target_policy(pi, pi, 0.0)


def test_epsilon_greedy_examples():
    assert epsilon_greedy([1.0, 3.0, 2.0], 0.0, seed=0) == (1, 1.0)
    np.testing.assert_array_equal(epsilon_greedy_probs([1.0, 2.0, 3.0, 4.0], 1.0), [0.25] * 4)
    assert epsilon_greedy_probs([1.0, 2.0], 0.2)[1] == pytest.approx(0.9)
    # ties go to the lowest index
    np.testing.assert_array_equal(epsilon_greedy_probs([5.0, 5.0], 0.0), [1.0, 0.0])
    with pytest.raises(ValueError):
        epsilon_greedy([], 0.1, seed=0)
    with pytest.raises(ValueError):
        epsilon_greedy([1.0], 1.5, seed=0)


def test_epsilon_greedy_records_its_probability():
    counts = np.zeros(3)
    rng = make_rng(4)
    for _ in range(4000):
        a, p = epsilon_greedy([0.0, 1.0, 0.5], 0.3, rng)
        counts[a] += 1
        assert p == pytest.approx(epsilon_greedy_probs([0.0, 1.0, 0.5], 0.3)[a])
    assert abs(counts[1] / 4000 - 0.8) < 0.03


def test_deterministic_sampling_gives_the_unique_trajectory():
    mdp = line_mdp(4)
    mu = TabularPolicy([[0.0, 1.0]] * 4)
    batch = sample_trajectories(mdp, mu, 3, 10, seed=0, start_states=0)
    for tr in batch.trajectories:
        np.testing.assert_array_equal(tr.states, [0, 1, 2, 3])
        np.testing.assert_array_equal(tr.behavior_probs, 1.0)
        np.testing.assert_array_equal(tr.dones, [False, False, True])


def test_same_seed_same_batch():
    mdp, _, mu, _ = problem(2)
    a = sample_trajectories(mdp, mu, 20, 15, seed=9)
    b = sample_trajectories(mdp, mu, 20, 15, seed=9)
    c = sample_trajectories(mdp, mu, 20, 15, seed=10)
    assert a.to_jsonl() == b.to_jsonl() != c.to_jsonl()


def test_action_frequencies_match_behaviour():
    mdp, _, mu, _ = problem(5)
    batch = sample_trajectories(mdp, mu, 2500, 30, seed=1)
    p = batch.padded()
    sel = p.mask & (p.states[:, :-1] == 0)
    n = int(sel.sum())
    assert n >= 10_000
    freq = np.bincount(p.actions[sel], minlength=3) / n
    sigma = np.sqrt(mu.probs[0] * (1 - mu.probs[0]) / n)
    assert (np.abs(freq - mu.probs[0]) <= 3 * sigma).all()
    np.testing.assert_allclose(p.behavior_probs[sel], mu.probs[0, p.actions[sel]])


def test_next_state_continuity_and_validation():
    steps = [Transition(0, 1, 0.0, 1, 0.5, False), Transition(1, 0, 1.0, 2, 0.5, True)]
    tr = Trajectory.from_transitions(steps)
    assert tr.transitions() == steps
    with pytest.raises(ValueError):
        Trajectory.from_transitions([Transition(0, 1, 0.0, 1, 0.5, False), Transition(2, 0, 1.0, 2, 0.5, True)])
    with pytest.raises(ValueError):
        Transition(0, 0, 0.0, 0, 0.0, False)
    with pytest.raises(ValueError):
        Trajectory([0, 1, 2], [0, 0], [0, 0], [0.5, 0.5], [True, False])


def test_mdp_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        TabularMdp(np.full((2, 1, 2), 0.6), np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError, match="gamma"):
        one_state(gamma=1.0)
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), [[1.0]], 0.9, [True])
    with pytest.raises(ValueError):
        TabularPolicy([[0.7, 0.2]])


def test_mdp_json_round_trip(tmp_path):
    mdp = random_mdp(4, 2, 0.95, make_rng(0))
    path = tmp_path / "mdp.json"
    mdp.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"n_states", "n_actions", "gamma", "transition", "reward", "terminal_mask"}
    back = TabularMdp.load(path)
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma
    doc["n_states"] = 5
    with pytest.raises(ValueError):
        TabularMdp.from_dict(doc)
    del doc["reward"]
    with pytest.raises(ValueError):
        TabularMdp.from_dict(doc)


def test_trajectory_ndjson_round_trip(tmp_path):
    mdp, _, mu, _ = problem(0)
    batch = sample_trajectories(mdp, mu, 5, 6, seed=3)
    path = tmp_path / "batch.ndjson"
    batch.save(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    for line in lines:
        assert list(json.loads(line)) == ["states", "actions", "rewards", "behavior_probs", "dones", "seed"]
    back = TrajectoryBatch.load(path)
    assert back.seed == 3 and back.to_jsonl() == batch.to_jsonl()


def test_ndjson_loader_rejects_bad_lines():
    good = {"states": [0, 1], "actions": [0], "rewards": [1.0], "behavior_probs": [0.5], "dones": [True], "seed": 1}
    with pytest.raises(ValueError, match="fields"):
        TrajectoryBatch.from_jsonl(json.dumps({**good, "extra": 1}))
    with pytest.raises(ValueError, match="line 1"):
        TrajectoryBatch.from_jsonl(json.dumps({**good, "behavior_probs": [0.0]}))
    with pytest.raises(ValueError, match="mixed seeds"):
        TrajectoryBatch.from_jsonl(json.dumps(good) + "\n" + json.dumps({**good, "seed": 2}))


def test_random_policy_floor():
    pi = random_policy(3, 4, make_rng(0), floor=0.1)
    assert (pi.probs > 0.01).all()
