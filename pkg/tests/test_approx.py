from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acbench.approx import (
    MAX_BACKUP,
    BonusState,
    Critic,
    StepDataset,
    TdTargetMode,
    default_beta,
    default_linear_bonus,
    det_doubling_fired,
    empty_buffers,
    fit_step,
    fqe,
    fqi,
    optimistic_eval,
    ridge_fit,
    ridge_fit_dataset,
    switch_should_fire,
    td_gaps,
    td_loss,
)
from acbench.envs import EnvConfig, make_chain, make_env, make_random_tabular
from acbench.mdp import TERMINAL, Transition, dp_solve_optimal, evaluate_probs
from acbench.policy import softmax


def exhaustive_buffers(mdp, repeats, rng):
    """Every (h, s, a) sampled ``repeats`` times with next states drawn from P."""
    m = mdp.tabular
    H, S, A = m.rewards.shape
    bufs = empty_buffers(H, S, A)
    for h in range(H):
        for s in range(S):
            for a in range(A):
                nxt = rng.choice(S, size=repeats, p=m.transitions[h, s, a])
                for k in nxt:
                    bufs[h].append(s, a, float(m.rewards[h, s, a]), int(k) if h + 1 < H else TERMINAL)
    return bufs


def expected_buffers(mdp):
    """Every (h, s, a, s') with weight proportional to P, realised as exact statistics."""
    m = mdp.tabular
    H, S, A = m.rewards.shape
    bufs = empty_buffers(H, S, A)
    for h in range(H):
        data = bufs[h]
        if h + 1 < H:
            data.counts[:, :, :S] = m.transitions[h]
            data.reward_sums[:, :, :S] = m.transitions[h] * m.rewards[h][:, :, None]
        else:
            data.counts[:, :, S] = 1.0
            data.reward_sums[:, :, S] = m.rewards[h]
        data.reward_sq = float(np.sum(m.rewards[h] ** 2))
        data._visits = data.counts.sum(axis=-1)
        data._reward_totals = data.reward_sums.sum(axis=-1)
        for s in range(S):
            for a in range(A):
                data._s.append(s)
                data._a.append(a)
                data._r.append(float(m.rewards[h, s, a]))
                data._n.append(TERMINAL)
    return bufs


def test_td_loss_zero_for_exact_fit():
    data = StepDataset(1, 2, 2)
    data.append(0, 1, 0.3, 1)
    data.append(1, 0, 0.7, 0)
    f_next = np.array([[0.2, 0.5], [1.0, 0.1]])
    f_h = np.zeros((2, 2))
    f_h[0, 1] = 0.3 + 1.0
    f_h[1, 0] = 0.7 + 0.5
    assert td_loss(f_h, f_next, data) == pytest.approx(0.0, abs=1e-12)


def test_td_loss_empty_is_zero():
    assert td_loss(np.ones((2, 2)), None, StepDataset(1, 2, 2)) == 0.0


def test_td_loss_hand_example():
    data = StepDataset(1, 2, 1)
    data.append(0, 0, 0.5, 1)
    data.append(1, 0, 1.0, 0)
    assert td_loss(np.zeros((2, 1)), np.zeros((2, 1)), data) == pytest.approx(1.25)


def test_td_loss_shape_mismatch():
    with pytest.raises(ValueError):
        td_loss(np.zeros((3, 2)), None, StepDataset(1, 2, 2))


def test_td_loss_policy_mode_uses_expectation():
    data = StepDataset(1, 1, 2)
    data.append(0, 0, 0.0, 0)
    probs = np.zeros((2, 1, 2))
    probs[1, 0] = [0.25, 0.75]
    f_next = np.array([[4.0, 0.0]])
    # target = 0.25 * 4 = 1, prediction 0 -> loss 1
    assert td_loss(np.zeros((1, 2)), f_next, data, TdTargetMode("policy", probs)) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30))
def test_td_loss_order_invariant(seed, n):
    rng = np.random.default_rng(seed)
    rows = [(int(rng.integers(3)), int(rng.integers(2)), float(rng.random()), int(rng.integers(3))) for _ in range(n)]
    a, b = StepDataset(1, 3, 2), StepDataset(1, 3, 2)
    for r in rows:
        a.append(*r)
    for r in reversed(rows):
        b.append(*r)
    f_h, f_next = rng.random((3, 2)), rng.random((3, 2))
    direct = sum((f_h[s, k] - r - f_next[s2].max()) ** 2 for s, k, r, s2 in rows)
    assert td_loss(f_h, f_next, a) == pytest.approx(td_loss(f_h, f_next, b), abs=1e-9)
    assert td_loss(f_h, f_next, a) == pytest.approx(direct, abs=1e-9)


def test_step_dataset_rejects_wrong_step():
    with pytest.raises(ValueError):
        StepDataset(2, 2, 2).add(Transition(1, 0, 0, 0.0, 1))


def test_ridge_zero_targets():
    phi = np.random.default_rng(0).random((10, 3))
    assert np.array_equal(ridge_fit(phi, np.zeros(10), 1.0), np.zeros(3))


def test_ridge_single_sample():
    w = ridge_fit(np.array([[1.0, 0.0, 0.0]]), np.array([1.0]), 1.0)
    assert np.allclose(w, [0.5, 0.0, 0.0])


def test_ridge_recovers_noiseless_weights():
    rng = np.random.default_rng(1)
    phi = rng.normal(size=(100, 5))
    w_star = rng.normal(size=5)
    w = ridge_fit(phi, phi @ w_star, 1e-8)
    assert np.linalg.norm(w - w_star) < 1e-5


def test_ridge_solves_normal_equations():
    rng = np.random.default_rng(2)
    phi, y = rng.random((40, 6)), rng.random(40)
    w = ridge_fit(phi, y, 0.5)
    resid = (0.5 * np.eye(6) + phi.T @ phi) @ w - phi.T @ y
    assert np.abs(resid).max() < 1e-10


def test_ridge_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        ridge_fit(np.ones((2, 2)), np.ones(2), 0.0)


def test_dataset_ridge_matches_statistics_fit():
    m = make_env("random-lin")
    rng = np.random.default_rng(3)
    data = StepDataset(4, m.n_states, m.n_actions)
    for _ in range(200):
        data.append(int(rng.integers(m.n_states)), int(rng.integers(m.n_actions)), float(rng.random()), TERMINAL)
    _, _, r, _ = data.arrays()
    sample_w = ridge_fit_dataset(data, r, 1.0, m.features[3])
    _, stats_w = fit_step(data, None, "linear", 1.0, m.features[3])
    assert np.allclose(sample_w, stats_w, atol=1e-10)


def test_fqe_tabular_close_to_policy_value():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=5, n_states=3, n_actions=2, horizon=3))
    probs = softmax(np.random.default_rng(0).normal(size=(3, 3, 2)))
    bufs = exhaustive_buffers(m, 200, np.random.default_rng(1))
    f = fqe(bufs, probs).table()
    assert np.abs(f - evaluate_probs(m, probs).q).max() < 0.05


def test_fqe_linear_exact_on_realizable_mdp():
    m = make_env("random-lin")
    probs = softmax(np.random.default_rng(4).normal(size=m.rewards.shape))
    critic = fqe(expected_buffers(m), probs, kind="linear", ridge=1e-8, features=m.features, clip_enabled=False)
    assert np.abs(critic.table() - evaluate_probs(m, probs).q).max() < 1e-3


def test_fqi_linear_exact_on_realizable_mdp():
    m = make_env("random-lin")
    critic = fqi(expected_buffers(m), kind="linear", ridge=1e-8, features=m.features, clip_enabled=False)
    assert np.abs(critic.table() - dp_solve_optimal(m).q).max() < 1e-3


def test_fqi_chain_exhaustive():
    m = make_chain(5, 8)
    f = fqi(exhaustive_buffers(m, 1, np.random.default_rng(0))).table()
    assert np.abs(f - dp_solve_optimal(m).q).max() < 0.05


def test_fqi_horizon_one_is_reward_regression():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=2, n_states=3, n_actions=2, horizon=1))
    f = fqi(exhaustive_buffers(m, 3, np.random.default_rng(0))).table()
    assert np.allclose(f, m.rewards)


def test_fit_zero_reward_gives_zero_critic():
    m = make_random_tabular(EnvConfig(kind="random-tabular", seed=2, sparsity=1.0))
    bufs = exhaustive_buffers(m, 2, np.random.default_rng(0))
    assert not fqi(bufs).table().any()
    assert not fqe(bufs, np.full(m.rewards.shape, 0.5)).table().any()


def test_unvisited_cells_regress_to_zero():
    bufs = empty_buffers(2, 2, 2)
    bufs[0].append(0, 0, 1.0, 1)
    f = fqi(bufs).table()
    assert f[0, 0, 0] == 1.0 and f[0, 1].sum() == 0.0 and not f[1].any()


def test_optimistic_eval_zero_bonus_is_plain_value():
    critic = Critic("tabular", np.full((2, 2, 2), 0.7), clip_enabled=True)
    bonus = BonusState.tabular(2, 2, 2, multiplier=0.0)
    assert optimistic_eval(critic, bonus, 1, 0, 1) == pytest.approx(0.7)


def test_linear_bonus_on_empty_data_is_multiplier():
    phi = np.zeros((1, 1, 1, 3))
    phi[..., 0] = 1.0
    bonus = BonusState.linear(phi, multiplier=1.0, ridge=1.0)
    assert bonus.bonus(0, 0, 0) == pytest.approx(1.0)
    assert bonus.bonus_table()[0, 0, 0] == pytest.approx(1.0)


def test_tabular_bonus_dominates_q_star_when_unvisited():
    m = make_chain(5, 8)
    critic = Critic("tabular", np.zeros((8, 5, 2)), clip_enabled=False)
    bonus = BonusState.tabular(8, 5, 2, multiplier=8.0)
    q = dp_solve_optimal(m).q
    values = np.array([[[optimistic_eval(critic, bonus, h, s, a) for a in range(2)] for s in range(5)] for h in range(8)])
    assert np.all(values >= 8.0) and np.all(values >= q)


def test_clipped_values_stay_in_range():
    bonus = BonusState.tabular(3, 2, 2, multiplier=10.0)
    critic = Critic("tabular", np.full((3, 2, 2), 5.0), bonus=bonus, clip_enabled=True)
    assert np.allclose(critic.table().max(axis=(1, 2)), [3.0, 2.0, 1.0])


def test_bonus_table_matches_pointwise_bonus():
    m = make_env("random-lin")
    bonus = BonusState.linear(m.features, multiplier=0.7)
    rng = np.random.default_rng(0)
    for _ in range(30):
        bonus.update(int(rng.integers(4)), int(rng.integers(6)), int(rng.integers(3)))
    table = bonus.bonus_table()
    for h, s, a in [(0, 1, 2), (3, 5, 0), (2, 2, 1)]:
        assert table[h, s, a] == pytest.approx(bonus.bonus(h, s, a), rel=1e-10)


def test_log_determinant_nondecreasing():
    m = make_env("random-lin")
    bonus = BonusState.linear(m.features, multiplier=1.0)
    rng = np.random.default_rng(1)
    last = bonus.logdet()
    assert np.all(last >= m.dim * np.log(1.0) - 1e-12)
    for _ in range(50):
        bonus.update(int(rng.integers(4)), int(rng.integers(6)), int(rng.integers(3)))
        now = bonus.logdet()
        assert np.all(now >= last - 1e-12)
        last = now


def test_det_doubling_examples():
    eye = np.eye(2)
    assert not det_doubling_fired(eye, eye)
    assert det_doubling_fired(2 * eye, eye)
    assert switch_should_fire("det-doubling", gram_now=2 * eye, gram_last=eye)
    assert not switch_should_fire("det-doubling", logdet_now=np.array([0.5]), logdet_last=np.array([0.0]))


def test_td_gap_zero_for_fresh_refit():
    m = make_chain(5, 8)
    bufs = exhaustive_buffers(m, 2, np.random.default_rng(0))
    critic = fqi(bufs, clip_enabled=False)
    gaps = td_gaps(critic.table(), bufs, MAX_BACKUP)
    assert np.allclose(gaps, 0.0, atol=1e-9)
    assert not switch_should_fire("td-gap", gaps=gaps, horizon=8, beta=0.1)


def test_td_gap_fires_for_stale_critic():
    m = make_chain(5, 8)
    bufs = exhaustive_buffers(m, 5, np.random.default_rng(0))
    gaps = td_gaps(np.zeros((8, 5, 2)), bufs, MAX_BACKUP)
    assert gaps.max() > 0
    assert switch_should_fire("td-gap", gaps=gaps, horizon=8, beta=gaps.max() / (5 * 64))


def test_default_widths():
    assert default_beta(5, 2, 8, 1000, 0.05) == pytest.approx(np.log(5 * 2 * 8 * 1000 / 0.05))
    assert default_linear_bonus(4, 6, 1000, 0.05) == pytest.approx(0.5 * 6 * np.sqrt(4 * np.log(1000 / 0.05)))


def test_incremental_bonus_matches_exact_recomputation():
    m = make_env("tetris-small")
    bonus = BonusState.linear(m.features, multiplier=0.5)
    rng = np.random.default_rng(2)
    bonus.bonus_table()
    for i in range(1200):
        bonus.update(int(rng.integers(m.horizon)), int(rng.integers(m.n_states)), int(rng.integers(m.n_actions)))
        if i % 5 == 0:
            bonus.bonus_table()
    incremental = bonus.bonus_table()
    exact = BonusState.linear(m.features, multiplier=0.5)
    exact.counts, exact.gram = bonus.counts.copy(), bonus.gram.copy()
    assert np.abs(incremental - exact.bonus_table()).max() < 1e-10


def test_dataset_gram_tracks_appends():
    m = make_env("random-lin")
    data = StepDataset(1, m.n_states, m.n_actions)
    rng = np.random.default_rng(0)
    for _ in range(3):
        for _ in range(7):
            data.append(int(rng.integers(m.n_states)), int(rng.integers(m.n_actions)), 0.0, TERMINAL)
        s, a, _, _ = data.arrays()
        phi = m.features[0][s, a]
        assert np.allclose(data.weighted_gram(m.features[0]), phi.T @ phi, atol=1e-12)
