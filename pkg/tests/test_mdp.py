from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acbench.envs import EnvConfig, make_chain, make_random_tabular
from acbench.mdp import (
    TERMINAL,
    LinearMdp,
    MdpError,
    TabularMdp,
    Trajectory,
    Transition,
    dp_policy_eval,
    dp_solve_optimal,
    evaluate_probs,
    load_mdp,
    mdp_from_dict,
    mdp_to_dict,
    occupancy_measures,
    sample_batch,
    sample_episode,
)
from acbench.policy import SoftmaxPolicy, greedy_policy, greedy_probs


def random_mdp(seed, S=3, A=2, H=3):
    return make_random_tabular(EnvConfig(kind="random-tabular", seed=seed, n_states=S, n_actions=A, horizon=H))


def test_rejects_rows_that_do_not_sum_to_one():
    P = np.full((1, 2, 2, 2), 0.5)
    P[0, 0, 0] = [0.5, 0.6]
    with pytest.raises(MdpError):
        TabularMdp(P, np.zeros((1, 2, 2)))


def test_rejects_rewards_outside_unit_interval():
    P = np.full((1, 2, 2, 2), 0.5)
    with pytest.raises(MdpError):
        TabularMdp(P, np.full((1, 2, 2), 1.5))


def test_rejects_out_of_range_initial_state():
    P = np.full((1, 2, 2, 2), 0.5)
    with pytest.raises(MdpError):
        TabularMdp(P, np.zeros((1, 2, 2)), initial_state=2)


def test_linear_mdp_rejects_long_features():
    m = random_mdp(0)
    phi = np.ones((3, 3, 2, 2))
    with pytest.raises(MdpError):
        LinearMdp(m, phi)


def test_horizon_one_q_star_equals_reward():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=4, n_states=3, n_actions=2, horizon=1))
    assert np.array_equal(dp_solve_optimal(m).q[0], m.rewards[0])


def test_zero_reward_values_vanish():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=1, sparsity=1.0))
    sol = dp_solve_optimal(m)
    assert not sol.q.any() and not sol.v.any()


def test_three_state_chain_with_terminal_reward():
    # Deterministic chain 0 -> 1 -> 2 under action 1; reward only at the last step in state 2.
    H, S, A = 3, 3, 2
    P = np.zeros((H, S, A, S))
    for s in range(S):
        P[:, s, 0, max(s - 1, 0)] = 1.0
        P[:, s, 1, min(s + 1, S - 1)] = 1.0
    r = np.zeros((H, S, A))
    r[2, 2, :] = 1.0
    assert dp_solve_optimal(TabularMdp(P, r)).v[0, 0] == pytest.approx(1.0)


def test_chain5_optimal_value():
    assert dp_solve_optimal(make_chain(5, 8)).v[0, 0] == pytest.approx(5.0, abs=1e-12)


def test_greedy_policy_attains_optimal_value():
    m = random_mdp(3)
    sol = dp_solve_optimal(m)
    assert np.allclose(dp_policy_eval(m, greedy_policy(sol.q)).v, sol.v, atol=1e-10)


def test_uniform_policy_optimal_when_actions_identical():
    P = np.zeros((2, 2, 2, 2))
    P[..., 0] = 0.3
    P[..., 1] = 0.7
    r = np.broadcast_to(np.array([[0.2], [0.9]]), (2, 2, 2)).copy()
    m = TabularMdp(P, r)
    uniform = dp_policy_eval(m, SoftmaxPolicy.uniform(2, 2, 2)).v
    assert np.allclose(uniform, dp_solve_optimal(m).v, atol=1e-12)


def test_uniform_value_matches_action_sequence_enumeration():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=11, n_states=2, n_actions=2, horizon=2))
    # Enumerate (a1, s2, a2) explicitly.
    total = 0.0
    s1 = m.initial_state
    for a1, a2 in itertools.product(range(2), repeat=2):
        for s2 in range(2):
            prob = 0.25 * m.transitions[0, s1, a1, s2]
            total += prob * (m.rewards[0, s1, a1] + m.rewards[1, s2, a2])
    value = dp_policy_eval(m, SoftmaxPolicy.uniform(2, 2, 2)).v[0, s1]
    assert value == pytest.approx(total, abs=1e-12)


def test_occupancy_first_step_is_initial_policy():
    m = random_mdp(5)
    pol = SoftmaxPolicy(np.random.default_rng(0).normal(size=(3, 3, 2)))
    d = occupancy_measures(m, pol)
    expected = np.zeros((3, 2))
    expected[m.initial_state] = pol.probs()[0, m.initial_state]
    assert np.allclose(d[0], expected)


def test_occupancy_point_mass_for_deterministic_pair():
    m = make_chain(5, 8)
    d = occupancy_measures(m, SoftmaxPolicy.from_probs(np.eye(2)[np.ones((8, 5), int)]))
    for h in range(8):
        assert d[h].max() == pytest.approx(1.0)
        assert np.argmax(d[h].sum(axis=1)) == min(h, 4)


def test_occupancy_matches_monte_carlo():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=2, n_states=2, n_actions=2, horizon=2))
    probs = np.full((2, 2, 2), 0.5)
    d = occupancy_measures(m, SoftmaxPolicy.uniform(2, 2, 2))
    states, actions, _ = sample_batch(m, probs, 1_000_000, np.random.default_rng(0))
    emp = np.zeros((2, 2))
    np.add.at(emp, (states[:, 1], actions[:, 1]), 1.0)
    assert np.abs(emp / 1_000_000 - d[1]).max() < 3e-3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(1, 4), A=st.integers(1, 3), H=st.integers(1, 4))
def test_occupancy_normalized_and_value_identity(seed, S, A, H):
    m = random_mdp(seed, S, A, H)
    pol = SoftmaxPolicy(np.random.default_rng(seed).normal(size=(H, S, A)))
    d = occupancy_measures(m, pol)
    assert np.allclose(d.sum(axis=(1, 2)), 1.0, atol=1e-9)
    value = dp_policy_eval(m, pol).v[0, m.initial_state]
    assert float(np.sum(d * m.rewards)) == pytest.approx(value, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(1, 4), A=st.integers(1, 3), H=st.integers(1, 4))
def test_optimal_values_bounded_and_greedy_consistent(seed, S, A, H):
    m = random_mdp(seed, S, A, H)
    sol = dp_solve_optimal(m)
    caps = (H - np.arange(H))[:, None, None]
    assert np.all(sol.q >= 0) and np.all(sol.q <= caps + 1e-12)
    assert np.allclose(sol.v, sol.q.max(axis=-1))
    assert np.allclose(evaluate_probs(m, greedy_probs(sol.q)).v, sol.v, atol=1e-10)


def test_deterministic_episode_independent_of_seed():
    m = make_chain(5, 8)
    pol = SoftmaxPolicy.from_probs(np.eye(2)[np.ones((8, 5), int)])
    a = sample_episode(m, pol, np.random.default_rng(1))
    b = sample_episode(m, pol, np.random.default_rng(99))
    assert a == b
    assert a.total_reward == pytest.approx(5.0)
    assert a.transitions[-1].next_state == TERMINAL


def test_same_seed_same_trajectory():
    m = random_mdp(8)
    pol = SoftmaxPolicy.uniform(3, 3, 2)
    assert sample_episode(m, pol, np.random.default_rng(5)) == sample_episode(m, pol, np.random.default_rng(5))


def test_uniform_first_action_frequency():
    m = random_mdp(9)
    states, actions, _ = sample_batch(m, np.full((3, 3, 2), 0.5), 100_000, np.random.default_rng(3))
    assert abs(actions[:, 0].mean() - 0.5) < 0.01


def test_trajectory_rejects_broken_chain():
    with pytest.raises(MdpError):
        Trajectory((Transition(1, 0, 0, 0.0, 1), Transition(2, 0, 0, 0.0, TERMINAL)), 1)


def test_json_round_trip(tmp_path):
    m = random_mdp(12)
    path = tmp_path / "mdp.json"
    path.write_text(json.dumps(mdp_to_dict(m)))
    back = load_mdp(path)
    assert np.array_equal(back.transitions, m.transitions) and np.array_equal(back.rewards, m.rewards)


def test_json_with_features_builds_linear_mdp():
    m = random_mdp(13, S=2, A=2, H=2)
    doc = mdp_to_dict(m)
    doc["features"] = np.broadcast_to(np.eye(4).reshape(2, 2, 4), (2, 2, 2, 4)).reshape(-1, 4).tolist()
    lin = mdp_from_dict(doc)
    assert isinstance(lin, LinearMdp) and lin.dim == 4
