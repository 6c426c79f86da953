"""Episode loops for the optimistic, rare-switching and hybrid actor-critics.

Each run is sequential and deterministic given its config; the only randomness
is one ``numpy`` generator seeded from ``AlgoConfig.seed`` and consumed by
episode roll-outs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Literal

import numpy as np

from acbench.approx import (
    MAX_BACKUP,
    BonusState,
    Critic,
    StepDataset,
    TdTargetMode,
    default_beta,
    default_linear_bonus,
    empty_buffers,
    fit_backward,
    switch_should_fire,
    td_gaps,
)
from acbench.confset import confidence_set_critic
from acbench.mdp import TERMINAL, Env, LinearMdp, dp_solve_optimal, evaluate_probs, rollout
from acbench.offline import OfflineDataset
from acbench.policy import SoftmaxPolicy, default_eta, greedy_probs, mirror_ascent_step, reset_uniform

log = logging.getLogger(__name__)

ALGOS = ("douhua", "nora", "nora-pi", "noah-pi", "noah-star", "hybrid-nora", "lsvi-ucb-rs")
HYBRID = ("noah-pi", "noah-star", "hybrid-nora")

SwitchRule = Literal["det-doubling", "td-gap"]


class ConfigError(ValueError):
    """Invalid algorithm configuration."""


@dataclass
class AlgoConfig:
    """Run parameters. ``None`` fields take the documented defaults.

    eta: learning rate; 0 freezes the actor. Default is ``eta_scale`` times the
        Theta-form for the algorithm family.
    beta: confidence width for the TD-gap trigger, default
        ``beta_scale * log(S A H T / delta)``.
    bonus: bonus multiplier; default H (tabular critics) or
        0.5 H sqrt(d log(T / delta)) (linear critics). Non-optimistic learners
        always use 0.
    clip: clip critic values to [0, H - h + 1]; default on for tabular critics
        and off for linear ones.
    critic: ``auto`` picks linear for linear environments, tabular otherwise.
        ``confidence-set`` is the exact enumerated set (tiny tabular, max-backup
        learners only).
    freeze_after_init: never refit after the initial critic (ablation).
    """

    algo: str = "nora"
    episodes: int = 1000
    seed: int = 0
    eta: float | None = None
    eta_scale: float = 1.0
    beta: float | None = None
    beta_scale: float = 1.0
    delta: float = 0.05
    bonus: float | None = None
    ridge: float = 1.0
    switch_rule: SwitchRule | None = None
    clip: bool | None = None
    critic: str = "auto"
    grid_step: float = 0.25
    allow_empty_offline: bool = False
    freeze_after_init: bool = False
    snapshot_every: int = 50

    def __post_init__(self) -> None:
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; expected one of {ALGOS}")
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if self.eta is not None and self.eta < 0:
            raise ConfigError("eta must be nonnegative")
        if self.switch_rule not in (None, "det-doubling", "td-gap"):
            raise ConfigError(f"unknown switch rule {self.switch_rule!r}")
        if self.critic not in ("auto", "tabular", "linear", "confidence-set"):
            raise ConfigError(f"unknown critic class {self.critic!r}")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> AlgoConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown algorithm fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpisodeRecord:
    t: int
    reward: float
    regret: float
    cum_regret: float
    switch: bool
    cum_switches: int
    reset: bool
    td_gaps: np.ndarray | None = None


@dataclass
class Snapshot:
    """Critic and policy in force during episode ``t``."""

    t: int
    critic: np.ndarray
    probs: np.ndarray


@dataclass
class RunResult:
    config: AlgoConfig
    v_star: float
    records: list[EpisodeRecord]
    snapshots: list[Snapshot] = field(default_factory=list)
    refits: int = 0
    critic: Critic | None = None
    policy: SoftmaxPolicy | None = None
    critic_kind: str = "tabular"
    eta: float = 0.0
    beta: float = 0.0
    bonus: float = 0.0

    @property
    def cum_regret(self) -> np.ndarray:
        return np.array([r.cum_regret for r in self.records])

    @property
    def regrets(self) -> np.ndarray:
        return np.array([r.regret for r in self.records])

    @property
    def cum_switches(self) -> np.ndarray:
        return np.array([r.cum_switches for r in self.records])

    @property
    def switches(self) -> int:
        return self.records[-1].cum_switches if self.records else 0

    @property
    def resets(self) -> int:
        return sum(r.reset for r in self.records)


class _Run:
    """Shared state of one learner: data, bonus statistics, actor and bookkeeping."""

    def __init__(self, env: Env, cfg: AlgoConfig, offline: OfflineDataset | None, optimistic: bool) -> None:
        self.env = env
        self.cfg = cfg
        m = env.tabular
        self.m = m
        self.H, self.S, self.A = m.horizon, m.n_states, m.n_actions
        self.s1 = m.initial_state
        self.v_star = float(dp_solve_optimal(m).v[0, self.s1])
        self.rng = np.random.default_rng(cfg.seed)

        kind = cfg.critic
        if kind == "auto":
            kind = "linear" if isinstance(env, LinearMdp) else "tabular"
        self.exact_set = kind == "confidence-set"
        self.kind = "tabular" if self.exact_set else kind
        if self.kind == "linear":
            self.features = env.features if isinstance(env, LinearMdp) else m.one_hot_features()
            self.dim = self.features.shape[-1]
        else:
            self.features = None
            self.dim = self.S * self.A
        self.clip = cfg.clip if cfg.clip is not None else self.kind == "tabular"

        T = cfg.episodes
        self.beta = cfg.beta if cfg.beta is not None else default_beta(self.S, self.A, self.H, T, cfg.delta, cfg.beta_scale)
        if not optimistic:
            self.bonus_mult = 0.0
        elif cfg.bonus is not None:
            self.bonus_mult = cfg.bonus
        elif self.kind == "linear":
            self.bonus_mult = default_linear_bonus(self.dim, self.H, T, cfg.delta)
        else:
            self.bonus_mult = float(self.H)
        if self.kind == "linear":
            self.bonus = BonusState.linear(self.features, self.bonus_mult, cfg.ridge)
        else:
            self.bonus = BonusState.tabular(self.H, self.S, self.A, self.bonus_mult, cfg.ridge)

        self.data = empty_buffers(self.H, self.S, self.A)
        if cfg.algo in HYBRID:
            if offline is None:
                raise ConfigError(f"{cfg.algo} needs an offline dataset")
            if offline.n_samples == 0 and not cfg.allow_empty_offline:
                raise ConfigError("empty offline dataset; set allow_empty_offline to run without one")
        if offline is not None and offline.n_samples:
            if offline.horizon != self.H or offline.steps[0].counts.shape != self.data[0].counts.shape:
                raise ConfigError("offline dataset does not match the environment")
            for mine, theirs in zip(self.data, offline.steps):
                mine.extend(theirs)
            self.bonus.absorb(offline.steps)

        self.policy = SoftmaxPolicy.uniform(self.H, self.S, self.A)
        self.records: list[EpisodeRecord] = []
        self.snapshots: list[Snapshot] = []
        self.cum_regret = 0.0
        self.cum_switches = 0
        self.refits = 0

    def eta_for(self, family: str) -> float:
        if self.cfg.eta is not None:
            return self.cfg.eta
        return default_eta(family, self.A, self.H, self.cfg.episodes, self.dim, self.cfg.eta_scale)

    def fit(self, mode: TdTargetMode, initial: bool = False) -> Critic:
        """Fit the critic on all data; the data-free initial fit is not counted as a refit."""
        self.refits += not initial
        if self.exact_set:
            if mode.mode != "max":
                raise ConfigError("the exact confidence set supports greedy backups only")
            return confidence_set_critic(self.data, self.H, self.beta, self.cfg.grid_step)
        bonus = self.bonus if self.bonus_mult > 0 else None
        return fit_backward(self.data, mode, self.kind, self.cfg.ridge, self.features, bonus, self.clip)

    def gaps(self, critic: Critic, mode: TdTargetMode) -> np.ndarray:
        return td_gaps(critic.table(), self.data, mode, self.kind, self.cfg.ridge, self.features)

    def play(self, probs: np.ndarray) -> tuple[float, float]:
        """Evaluate the pre-episode policy exactly, then roll it out and store the data."""
        value = float(evaluate_probs(self.m, probs).v[0, self.s1])
        states, actions, nxt = rollout(self.m, probs, self.rng)
        total = 0.0
        for h in range(self.H):
            s, a = int(states[h]), int(actions[h])
            r = float(self.m.rewards[h, s, a])
            total += r
            self.data[h].append(s, a, r, int(nxt[h]) if nxt[h] != TERMINAL else TERMINAL)
            self.bonus.update(h, s, a)
        regret = self.v_star - value
        if -1e-9 < regret < 0.0:
            regret = 0.0
        return total, regret

    def record(self, t: int, reward: float, regret: float, switched: bool, reset: bool, gaps=None) -> None:
        self.cum_regret += regret
        self.cum_switches += int(switched)
        self.records.append(
            EpisodeRecord(t, reward, regret, self.cum_regret, switched, self.cum_switches, reset, gaps)
        )

    def snapshot(self, t: int, critic: np.ndarray, probs: np.ndarray) -> None:
        if t == 1 or t % self.cfg.snapshot_every == 0 or t == self.cfg.episodes:
            self.snapshots.append(Snapshot(t, critic.copy(), probs.copy()))

    def result(self, critic: Critic | None, eta: float) -> RunResult:
        return RunResult(
            self.cfg,
            self.v_star,
            self.records,
            self.snapshots,
            self.refits,
            critic,
            self.policy,
            "confidence-set" if self.exact_set else self.kind,
            eta,
            self.beta,
            self.bonus_mult,
        )


def run_douhua(env: Env, cfg: AlgoConfig) -> RunResult:
    """Optimistic critic targeting Q^{pi_t}, refit and actor update every episode."""
    run = _Run(env, cfg, None, optimistic=True)
    eta = run.eta_for("every-episode")
    critic = run.fit(TdTargetMode("policy", run.policy.probs()), initial=True)
    for t in range(1, cfg.episodes + 1):
        probs = run.policy.probs()
        run.snapshot(t, critic.table(), probs)
        reward, regret = run.play(probs)
        if eta > 0:
            mirror_ascent_step(run.policy, critic, eta)
        critic = run.fit(TdTargetMode("policy", probs))
        run.record(t, reward, regret, switched=True, reset=False)
    return run.result(critic, eta)


def _rare_switching(
    env: Env,
    cfg: AlgoConfig,
    offline: OfflineDataset | None,
    *,
    optimistic: bool,
    target: Literal["max", "policy"],
    reset_on_switch: bool,
    default_rule: SwitchRule,
) -> RunResult:
    """Shared loop of the rare-switching learners.

    The critic is refit only when the trigger fires; a reset (if enabled)
    restores the uniform actor, after which the new critic drives the update.
    """
    run = _Run(env, cfg, offline, optimistic)
    rule = cfg.switch_rule or default_rule
    eta = run.eta_for("rare-switching")

    def mode_for(probs: np.ndarray) -> TdTargetMode:
        return MAX_BACKUP if target == "max" else TdTargetMode("policy", probs)

    critic = run.fit(mode_for(run.policy.probs()), initial=True)
    logdet_last = run.bonus.logdet()
    for t in range(1, cfg.episodes + 1):
        probs = run.policy.probs()
        run.snapshot(t, critic.table(), probs)
        reward, regret = run.play(probs)
        mode = mode_for(probs)
        gaps = None
        if rule == "td-gap":
            gaps = run.gaps(critic, mode)
            fired = switch_should_fire("td-gap", gaps=gaps, horizon=run.H, beta=run.beta)
        else:
            fired = switch_should_fire("det-doubling", logdet_now=run.bonus.logdet(), logdet_last=logdet_last)
        fired = fired and not cfg.freeze_after_init
        reset = False
        if fired:
            critic = run.fit(mode)
            logdet_last = run.bonus.logdet()
            if reset_on_switch:
                reset_uniform(run.policy)
                reset = True
        if eta > 0:
            mirror_ascent_step(run.policy, critic, eta)
        run.record(t, reward, regret, fired, reset, gaps)
    return run.result(critic, eta)


def run_nora(env: Env, cfg: AlgoConfig) -> RunResult:
    """Optimistic critic targeting Q*, rare switching with policy resets."""
    return _rare_switching(
        env, cfg, None, optimistic=True, target="max", reset_on_switch=True, default_rule="det-doubling"
    )


def run_nora_pi(env: Env, cfg: AlgoConfig) -> RunResult:
    """Rare-switching optimistic critic that targets Q^{pi_t}, without resets.

    The default trigger matches :func:`run_nora`; choose ``switch_rule="td-gap"``
    to observe the moving-target effect of the policy backup on switching.
    """
    return _rare_switching(
        env, cfg, None, optimistic=True, target="policy", reset_on_switch=False, default_rule="det-doubling"
    )


def run_noah_star(env: Env, cfg: AlgoConfig, offline: OfflineDataset) -> RunResult:
    """Non-optimistic FQI critic over online plus offline data, rare switching with resets."""
    return _rare_switching(
        env, cfg, offline, optimistic=False, target="max", reset_on_switch=True, default_rule="td-gap"
    )


def run_hybrid_nora(env: Env, cfg: AlgoConfig, offline: OfflineDataset) -> RunResult:
    """NORA whose fits, bonuses and trigger statistics include the offline samples."""
    return _rare_switching(
        env, cfg, offline, optimistic=True, target="max", reset_on_switch=True, default_rule="det-doubling"
    )


def run_noah_pi(env: Env, cfg: AlgoConfig, offline: OfflineDataset) -> RunResult:
    """Non-optimistic FQE actor-critic over online plus offline data, updated every episode."""
    run = _Run(env, cfg, offline, optimistic=False)
    eta = run.eta_for("every-episode")
    critic = None
    for t in range(1, cfg.episodes + 1):
        probs = run.policy.probs()
        reward, regret = run.play(probs)
        critic = run.fit(TdTargetMode("policy", probs))
        run.snapshot(t, critic.table(), probs)
        if eta > 0:
            mirror_ascent_step(run.policy, critic, eta)
        run.record(t, reward, regret, switched=True, reset=False)
    return run.result(critic, eta)


def run_lsvi_ucb_rs(env: Env, cfg: AlgoConfig) -> RunResult:
    """Rare-switching LSVI-UCB: greedy play on the optimistic critic, refit on det doubling."""
    run = _Run(env, cfg, None, optimistic=True)
    rule = cfg.switch_rule or "det-doubling"
    critic = run.fit(MAX_BACKUP, initial=True)
    logdet_last = run.bonus.logdet()
    for t in range(1, cfg.episodes + 1):
        probs = greedy_probs(critic.table())
        run.snapshot(t, critic.table(), probs)
        reward, regret = run.play(probs)
        gaps = None
        if rule == "td-gap":
            gaps = run.gaps(critic, MAX_BACKUP)
            fired = switch_should_fire("td-gap", gaps=gaps, horizon=run.H, beta=run.beta)
        else:
            fired = switch_should_fire("det-doubling", logdet_now=run.bonus.logdet(), logdet_last=logdet_last)
        fired = fired and not cfg.freeze_after_init
        if fired:
            critic = run.fit(MAX_BACKUP)
            logdet_last = run.bonus.logdet()
        run.record(t, reward, regret, fired, False, gaps)
    run.policy = SoftmaxPolicy.from_probs(greedy_probs(critic.table()))
    return run.result(critic, 0.0)


def run_algorithm(env: Env, cfg: AlgoConfig, offline: OfflineDataset | None = None) -> RunResult:
    """Dispatch on ``cfg.algo``; hybrid learners require ``offline``."""
    if cfg.algo == "douhua":
        return run_douhua(env, cfg)
    if cfg.algo == "nora":
        return run_nora(env, cfg)
    if cfg.algo == "nora-pi":
        return run_nora_pi(env, cfg)
    if cfg.algo == "lsvi-ucb-rs":
        return run_lsvi_ucb_rs(env, cfg)
    if offline is None:
        if not cfg.allow_empty_offline:
            raise ConfigError(f"{cfg.algo} needs an offline dataset")
        offline = OfflineDataset.empty(env)
    if cfg.algo == "noah-pi":
        return run_noah_pi(env, cfg, offline)
    if cfg.algo == "noah-star":
        return run_noah_star(env, cfg, offline)
    return run_hybrid_nora(env, cfg, offline)
