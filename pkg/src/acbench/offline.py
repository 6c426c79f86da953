"""Offline datasets for the hybrid learners and occupancy-ratio coverage reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from acbench.approx import StepDataset, empty_buffers
from acbench.mdp import TERMINAL, Env, TabularMdp, dp_solve_optimal, occupancy_from_probs, sample_batch
from acbench.policy import SoftmaxPolicy, greedy_probs

CSV_HEADER = ["h", "s", "a", "r", "s_next"]


@dataclass
class OfflineDataset:
    """Per-step offline buffers. ``behavior`` names the logging policy."""

    steps: list[StepDataset]
    behavior: str = "custom"
    mix: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def n_samples(self) -> int:
        return sum(len(d) for d in self.steps)

    @property
    def n_episodes(self) -> int:
        return len(self.steps[0]) if self.steps else 0

    @classmethod
    def empty(cls, mdp: Env) -> OfflineDataset:
        m = mdp.tabular
        return cls(empty_buffers(m.horizon, m.n_states, m.n_actions), behavior="empty")


def behavior_probs(mdp: Env, name: str, mix: float = 0.0) -> np.ndarray:
    """Logging policy ``(1 - mix) * base + mix * uniform`` with base ``optimal`` or ``uniform``."""
    m = mdp.tabular
    uniform = np.full(m.rewards.shape, 1.0 / m.n_actions)
    if name == "uniform":
        return uniform
    if name == "optimal":
        base = greedy_probs(dp_solve_optimal(m).q)
        return (1.0 - mix) * base + mix * uniform
    raise ValueError(f"unknown behavior policy {name!r}")


def generate_offline(
    mdp: Env,
    behavior: SoftmaxPolicy | np.ndarray,
    n_episodes: int,
    seed: int,
    name: str = "custom",
    mix: float = 0.0,
) -> OfflineDataset:
    """Roll out ``n_episodes`` full trajectories of ``behavior``."""
    if n_episodes < 0:
        raise ValueError("n_episodes must be nonnegative")
    m = mdp.tabular
    probs = behavior if isinstance(behavior, np.ndarray) else behavior.probs()
    steps = empty_buffers(m.horizon, m.n_states, m.n_actions)
    if n_episodes:
        rng = np.random.default_rng(seed)
        states, actions, rewards = sample_batch(m, probs, n_episodes, rng)
        for h, data in enumerate(steps):
            for s, a, r, s2 in zip(states[:, h], actions[:, h], rewards[:, h], states[:, h + 1]):
                data.append(int(s), int(a), float(r), int(s2))
    return OfflineDataset(steps, behavior=name, mix=mix, seed=seed)


def merge(online: list[StepDataset], offline: OfflineDataset | list[StepDataset] | None) -> list[StepDataset]:
    """Per-step union of two buffer lists as fresh datasets (online samples first)."""
    off = offline.steps if isinstance(offline, OfflineDataset) else offline
    if not off:
        return [d.copy() for d in online]
    if not online:
        return [d.copy() for d in off]
    if len(off) != len(online):
        raise ValueError(f"horizon mismatch: {len(online)} online vs {len(off)} offline steps")
    merged = []
    for a, b in zip(online, off):
        out = a.copy()
        out.extend(b)
        merged.append(out)
    return merged


@dataclass
class ConcentrabilityReport:
    per_step: np.ndarray
    value: float
    note: str = (
        "occupancy ratio max d^pi*(s,a) / mu_hat(s,a); an upper-bound proxy for the "
        "Bellman-error concentrability, not that quantity itself"
    )


def estimate_concentrability(offline: OfflineDataset, mdp: Env) -> ConcentrabilityReport:
    """max_h max over optimal-support cells of d_h^{pi*}(s,a) / mu_hat_h(s,a).

    Unvisited optimal-support cells give ``inf``.
    """
    m: TabularMdp = mdp.tabular
    d_star = occupancy_from_probs(m, greedy_probs(dp_solve_optimal(m).q))
    ratios = np.zeros(m.horizon)
    for h, data in enumerate(offline.steps):
        n = data.visit_counts
        total = n.sum()
        support = d_star[h] > 0
        if total == 0:
            ratios[h] = np.inf if support.any() else 0.0
            continue
        mu = (n / total)[support]
        target = d_star[h][support]
        r = np.divide(target, mu, out=np.full_like(target, np.inf), where=mu > 0)
        ratios[h] = r.max() if r.size else 0.0
    return ConcentrabilityReport(ratios, float(ratios.max()))


def save_offline(offline: OfflineDataset, directory: str | Path) -> Path:
    """Write ``offline.csv`` (h is 1-based, terminal s_next is -1) and ``offline.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "offline.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for data in offline.steps:
            for tr in data.transitions():
                writer.writerow([tr.step, tr.state, tr.action, repr(tr.reward), tr.next_state])
    sidecar = {
        "seed": offline.seed,
        "behavior": offline.behavior,
        "mix": offline.mix,
        "n_off": offline.n_samples,
        "n_episodes": offline.n_episodes,
        "horizon": offline.horizon,
        "n_states": offline.steps[0].n_states if offline.steps else 0,
        "n_actions": offline.steps[0].n_actions if offline.steps else 0,
        **offline.meta,
    }
    with open(out / "offline.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return out


def load_offline(directory: str | Path, mdp: Env | None = None) -> OfflineDataset:
    src = Path(directory)
    with open(src / "offline.json") as fh:
        meta = json.load(fh)
    H, S, A = meta["horizon"], meta["n_states"], meta["n_actions"]
    if mdp is not None and (mdp.horizon, mdp.n_states, mdp.n_actions) != (H, S, A):
        raise ValueError("offline dataset shape does not match the environment")
    steps = empty_buffers(H, S, A)
    with open(src / "offline.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"offline CSV header must be {CSV_HEADER}")
        for row in reader:
            h = int(row["h"])
            s_next = int(row["s_next"])
            steps[h - 1].append(int(row["s"]), int(row["a"]), float(row["r"]), TERMINAL if s_next < 0 else s_next)
    return OfflineDataset(steps, behavior=meta.get("behavior", "custom"), mix=meta.get("mix", 0.0), seed=meta.get("seed"))
