"""Exact regret accounting and diagnostics: decompositions, exponent fits, switch
curves and optimism checks. All expectations are computed from exact occupancy
measures, so identities hold to floating-point precision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acbench.algorithms import EpisodeRecord, RunResult, Snapshot
from acbench.mdp import Env, LinearMdp, TabularMdp, ValueTables, dp_solve_optimal, evaluate_probs, occupancy_from_probs
from acbench.policy import greedy_probs


class AnalysisError(ValueError):
    pass


@dataclass
class RegretLedger:
    """Exact per-episode regret bookkeeping of one run."""

    v_star: float
    records: list[EpisodeRecord]

    @classmethod
    def from_result(cls, result: RunResult) -> RegretLedger:
        return cls(result.v_star, result.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def regrets(self) -> np.ndarray:
        return np.array([r.regret for r in self.records])

    @property
    def cum_regret(self) -> np.ndarray:
        return np.array([r.cum_regret for r in self.records])

    @property
    def cum_switches(self) -> np.ndarray:
        return np.array([r.cum_switches for r in self.records])

    def check(self, tol: float = 1e-9) -> None:
        """Raise if a ledger invariant is broken."""
        ts = [r.t for r in self.records]
        if ts != list(range(1, len(ts) + 1)):
            raise AnalysisError("episode indices must run 1..T")
        reg = self.regrets
        if np.any(reg < -tol) or np.any(reg > self.v_star + tol):
            raise AnalysisError("instantaneous regret outside [0, V*]")
        if np.any(np.diff(self.cum_regret) < -tol) or np.any(np.diff(self.cum_switches) < 0):
            raise AnalysisError("cumulative series must be nondecreasing")
        if not np.allclose(np.cumsum(reg), self.cum_regret, atol=1e-6):
            raise AnalysisError("cumulative regret is not the running sum of instantaneous regret")


@dataclass
class DecompositionReport:
    """Regret terms of one episode.

    ``kind="q-star"``: tracking error, minus the Bellman error along the
    comparator's occupancy, greedy Bellman error under the played policy, and greedy
    tracking error. ``kind="q-pi"``: the first two, plus the Bellman error under
    the played policy's own backup (``term4`` is 0).
    """

    term1: float
    term2: float
    term3: float
    term4: float
    total: float
    regret: float
    kind: str = "q-star"

    @property
    def residual(self) -> float:
        return abs(self.total - self.regret)


def _tabular(env: Env) -> TabularMdp:
    if isinstance(env, TabularMdp):
        return env
    if isinstance(env, LinearMdp):
        return env.tabular
    raise AnalysisError("decompositions need an enumerable (tabular) environment")


def _table(critic) -> np.ndarray:
    return np.asarray(critic if isinstance(critic, np.ndarray) else critic.table(), dtype=float)


def _probs(policy) -> np.ndarray:
    return np.asarray(policy if isinstance(policy, np.ndarray) else policy.probs(), dtype=float)


def _next_state_values(mdp: TabularMdp, state_values: np.ndarray) -> np.ndarray:
    """E_{s' ~ P_h(.|s,a)} V_{h+1}(s') for (H, S) values V_{h+1} (zero after H)."""
    H = mdp.horizon
    out = np.zeros(mdp.rewards.shape)
    for h in range(H - 1):
        out[h] = mdp.transitions[h] @ state_values[h + 1]
    return out


def policy_backup(mdp: TabularMdp, f: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """(T^pi f)_h(s, a) = r_h(s, a) + E_{s'}[<f_{h+1}(s', .), pi_{h+1}(. | s')>]."""
    return mdp.rewards + _next_state_values(mdp, np.einsum("hsa,hsa->hs", f, probs))


def greedy_backup(mdp: TabularMdp, f: np.ndarray) -> np.ndarray:
    """(T f)_h(s, a) = r_h(s, a) + E_{s'}[max_a' f_{h+1}(s', a')]."""
    return mdp.rewards + _next_state_values(mdp, f.max(axis=-1))


def _expect(occupancy: np.ndarray, g: np.ndarray) -> float:
    return float(np.sum(occupancy * g))


def _state_expect(occupancy: np.ndarray, g_state: np.ndarray) -> float:
    return float(np.sum(occupancy.sum(axis=-1) * g_state))


def decomposition_terms(
    env: Env, critic, policy, comparator=None, kind: str = "q-star"
) -> DecompositionReport:
    """Exact regret decomposition of V*_1(s1) - V^pi_1(s1) for critic ``f``.

    ``comparator`` defaults to the greedy policy of Q*. Both ``kind="q-star"``
    (four terms) and ``kind="q-pi"`` (three terms) sum to the regret against
    the comparator's value.
    """
    mdp = _tabular(env)
    f = _table(critic)
    pi = _probs(policy)
    if f.shape != mdp.rewards.shape or pi.shape != mdp.rewards.shape:
        raise AnalysisError("critic and policy must be (H, S, A) tables matching the MDP")
    star = greedy_probs(dp_solve_optimal(mdp).q) if comparator is None else _probs(comparator)
    d_star = occupancy_from_probs(mdp, star)
    d_pi = occupancy_from_probs(mdp, pi)
    s1 = mdp.initial_state
    regret = float(evaluate_probs(mdp, star).v[0, s1] - evaluate_probs(mdp, pi).v[0, s1])

    term1 = _state_expect(d_star, np.einsum("hsa,hsa->hs", f, star - pi))
    # The Bellman error along the comparator's occupancy is taken under the
    # played policy's backup; only this form makes the terms sum to the regret.
    term2 = -_expect(d_star, f - policy_backup(mdp, f, pi))
    if kind == "q-star":
        term3 = _expect(d_pi, f - greedy_backup(mdp, f))
        gap = f.max(axis=-1) - np.einsum("hsa,hsa->hs", f, pi)
        term4 = _expect(d_pi, _next_state_values(mdp, gap))
    elif kind == "q-pi":
        term3 = _expect(d_pi, f - policy_backup(mdp, f, pi))
        term4 = 0.0
    else:
        raise AnalysisError(f"unknown decomposition kind {kind!r}")
    total = term1 + term2 + term3 + term4
    return DecompositionReport(term1, term2, term3, term4, total, regret, kind)


def value_difference(env: Env, critic, policy, other) -> tuple[float, float]:
    """Both sides of f_1(s1, pi_1) - V^{pi'}_1(s1)
    = sum_h E_{pi'}[<f_h, pi_h - pi'_h>] + sum_h E_{pi'}[f_h - T^{pi} f_{h+1}].

    The Bellman error uses the backup of ``policy`` (the one paired with f on
    the left), not that of ``other``; the identity is exact only in this form.
    """
    mdp = _tabular(env)
    f = _table(critic)
    pi = _probs(policy)
    pi2 = _probs(other)
    s1 = mdp.initial_state
    lhs = float(f[0, s1] @ pi[0, s1] - evaluate_probs(mdp, pi2).v[0, s1])
    d = occupancy_from_probs(mdp, pi2)
    rhs = _state_expect(d, np.einsum("hsa,hsa->hs", f, pi - pi2)) + _expect(d, f - policy_backup(mdp, f, pi))
    return lhs, rhs


@dataclass
class ExponentFit:
    slope: float
    intercept: float
    window: tuple[int, int]
    n_points: int
    flagged: bool = False
    note: str = ""


def exponent_fit(
    series, window: tuple[int, int] | None = None, drop_fraction: float = 0.1
) -> ExponentFit:
    """OLS of log Reg(t) on log t, t = 1..T, over the inclusive 1-based ``window``.

    The default window drops the first ``drop_fraction`` of episodes. Points with
    nonpositive values cannot enter the fit; they are skipped and the result is
    flagged.
    """
    y = np.asarray(series, dtype=float)
    T = len(y)
    if window is None:
        window = (int(np.floor(drop_fraction * T)) + 1, T)
    lo, hi = max(int(window[0]), 1), min(int(window[1]), T)
    if hi < lo:
        raise AnalysisError(f"empty fit window {window} for a series of length {T}")
    t = np.arange(lo, hi + 1, dtype=float)
    vals = y[lo - 1 : hi]
    positive = vals > 0
    flagged = not bool(positive.all())
    if positive.sum() < 2:
        return ExponentFit(float("nan"), float("nan"), (lo, hi), int(positive.sum()), True, "fewer than two positive points")
    x, z = np.log(t[positive]), np.log(vals[positive])
    slope, intercept = np.polyfit(x, z, 1)
    note = "nonpositive values skipped" if flagged else ""
    return ExponentFit(float(slope), float(intercept), (lo, hi), int(positive.sum()), flagged, note)


@dataclass
class SwitchCurve:
    cumulative: np.ndarray
    statistic: float

    @property
    def total(self) -> int:
        return int(self.cumulative[-1]) if len(self.cumulative) else 0


def switch_curve(records: list[EpisodeRecord] | RunResult) -> SwitchCurve:
    """Cumulative switches per episode and the growth statistic switches(T) / log T."""
    recs = records.records if isinstance(records, RunResult) else records
    cum = np.cumsum([int(r.switch) for r in recs])
    T = len(recs)
    stat = float(cum[-1] / np.log(T)) if T > 1 else float(cum[-1]) if T else 0.0
    return SwitchCurve(cum, stat)


def optimism_violation_rate(
    snapshots: RunResult | list[Snapshot] | list[np.ndarray],
    q_star: ValueTables,
    cells: str = "all",
    env: Env | None = None,
    tol: float = 1e-9,
) -> float:
    """Fraction of sampled (t, h, s, a) where the optimistic critic is below Q* - tol.

    ``cells="all"`` checks every cell; ``cells="optimal-support"`` only cells the
    optimal policy visits with positive probability (needs ``env``).
    """
    if isinstance(snapshots, RunResult):
        snapshots = snapshots.snapshots
    tables = [s.critic if isinstance(s, Snapshot) else np.asarray(s) for s in snapshots]
    if not tables:
        return 0.0
    stack = np.stack(tables)
    below = stack < q_star.q[None] - tol
    if cells == "all":
        return float(below.mean())
    if cells == "optimal-support":
        if env is None:
            raise AnalysisError("optimal-support cells need the environment")
        mdp = _tabular(env)
        support = occupancy_from_probs(mdp, greedy_probs(q_star.q)) > 0
        if not support.any():
            return 0.0
        return float(below[:, support].mean())
    raise AnalysisError(f"unknown cell selection {cells!r}")


def uniform_baseline(env: Env, episodes: int) -> float:
    """Cumulative regret T (V* - V^uniform) of the uniform policy."""
    mdp = _tabular(env)
    s1 = mdp.initial_state
    uniform = np.full(mdp.rewards.shape, 1.0 / mdp.n_actions)
    gap = dp_solve_optimal(mdp).v[0, s1] - evaluate_probs(mdp, uniform).v[0, s1]
    return float(episodes * gap)


@dataclass
class Band:
    mean: np.ndarray
    p10: np.ndarray
    p90: np.ndarray


def seed_band(series: list[np.ndarray] | np.ndarray) -> Band:
    """Per-episode mean and 10th/90th percentiles across seeds."""
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise AnalysisError("need a (seeds, T) array")
    return Band(arr.mean(axis=0), np.percentile(arr, 10, axis=0), np.percentile(arr, 90, axis=0))
