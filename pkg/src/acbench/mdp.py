"""Finite-horizon episodic MDPs with exact dynamic-programming oracles.

Steps are 1-based in :class:`Transition` records (``step`` in ``[1, H]``) and
0-based everywhere an array is indexed (``q[h]`` is step ``h + 1``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np

if TYPE_CHECKING:
    from acbench.policy import SoftmaxPolicy

TERMINAL = -1
PROB_TOL = 1e-9


class MdpError(ValueError):
    """Raised when an MDP specification violates its invariants."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Ground-truth tabular MDP.

    ``transitions[h, s, a, s']`` is P_h(s'|s,a) and ``rewards[h, s, a]`` is the
    deterministic reward r_h(s,a) in [0, 1].
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial_state: int = 0

    def __post_init__(self) -> None:
        P = np.asarray(self.transitions, dtype=float)
        r = np.asarray(self.rewards, dtype=float)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise MdpError(f"transitions must have shape (H, S, A, S), got {P.shape}")
        if r.shape != P.shape[:3]:
            raise MdpError(f"rewards shape {r.shape} does not match transitions {P.shape[:3]}")
        if min(P.shape) < 1:
            raise MdpError("S, A and H must be positive")
        if np.any(P < -PROB_TOL) or np.any(np.abs(P.sum(axis=-1) - 1.0) > PROB_TOL):
            raise MdpError("every transition row must be a probability vector")
        if np.any(r < 0.0) or np.any(r > 1.0):
            raise MdpError("rewards must lie in [0, 1]")
        if not 0 <= self.initial_state < P.shape[1]:
            raise MdpError(f"initial_state {self.initial_state} out of range")
        P = np.clip(P, 0.0, None)
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def tabular(self) -> TabularMdp:
        return self

    def one_hot_features(self) -> np.ndarray:
        """Features of shape (H, S, A, S*A) with a single 1 per (s, a)."""
        H, S, A = self.rewards.shape
        eye = np.eye(S * A).reshape(S, A, S * A)
        return np.broadcast_to(eye, (H, S, A, S * A)).copy()


@dataclass(frozen=True, eq=False)
class LinearMdp:
    """A tabular MDP paired with a feature map phi(h, s, a) of dimension d.

    Realizability of the features is the builder's concern; only the norm bound
    and shapes are checked here.
    """

    underlying: TabularMdp
    features: np.ndarray

    def __post_init__(self) -> None:
        phi = np.asarray(self.features, dtype=float)
        expected = self.underlying.rewards.shape
        if phi.ndim != 4 or phi.shape[:3] != expected:
            raise MdpError(f"features must have shape {expected + ('d',)}, got {phi.shape}")
        if np.any(np.linalg.norm(phi, axis=-1) > 1.0 + PROB_TOL):
            raise MdpError("feature norms must be at most 1")
        phi.setflags(write=False)
        object.__setattr__(self, "features", phi)

    def feature_map(self, h: int, s: int, a: int) -> np.ndarray:
        return self.features[h, s, a]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    @property
    def tabular(self) -> TabularMdp:
        return self.underlying

    @property
    def horizon(self) -> int:
        return self.underlying.horizon

    @property
    def n_states(self) -> int:
        return self.underlying.n_states

    @property
    def n_actions(self) -> int:
        return self.underlying.n_actions

    @property
    def initial_state(self) -> int:
        return self.underlying.initial_state

    @property
    def transitions(self) -> np.ndarray:
        return self.underlying.transitions

    @property
    def rewards(self) -> np.ndarray:
        return self.underlying.rewards


Env = TabularMdp | LinearMdp


@dataclass(frozen=True)
class Transition:
    step: int
    state: int
    action: int
    reward: float
    next_state: int


@dataclass
class Trajectory:
    transitions: list[Transition]
    episode_index: int = 0

    def __post_init__(self) -> None:
        for prev, cur in zip(self.transitions, self.transitions[1:]):
            if prev.next_state != cur.state or cur.step != prev.step + 1:
                raise MdpError("trajectory transitions are not chained")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def total_reward(self) -> float:
        return float(sum(tr.reward for tr in self.transitions))


@dataclass
class ValueTables:
    q: np.ndarray
    v: np.ndarray
    kind: Literal["optimal", "policy-eval"] = "optimal"
    greedy: np.ndarray | None = field(default=None, repr=False)


def dp_solve_optimal(mdp: Env) -> ValueTables:
    """Exact Q* and V* by backward induction; ties resolve to the lowest action."""
    m = mdp.tabular
    H, S, A = m.rewards.shape
    q = np.zeros((H, S, A))
    v = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        q[h] = m.rewards[h] + m.transitions[h] @ v[h + 1]
        v[h] = q[h].max(axis=1)
    return ValueTables(q=q, v=v[:H], kind="optimal", greedy=q.argmax(axis=2))


def evaluate_probs(mdp: Env, probs: np.ndarray) -> ValueTables:
    """Exact Q^pi and V^pi for a policy given as an (H, S, A) probability table."""
    m = mdp.tabular
    H = m.horizon
    q = np.empty_like(m.rewards)
    v = np.zeros((H + 1, m.n_states))
    for h in range(H - 1, -1, -1):
        q[h] = m.rewards[h] + m.transitions[h] @ v[h + 1]
        v[h] = np.einsum("sa,sa->s", probs[h], q[h])
    return ValueTables(q=q, v=v[:H], kind="policy-eval")


def dp_policy_eval(mdp: Env, policy: SoftmaxPolicy) -> ValueTables:
    return evaluate_probs(mdp, policy.probs())


def occupancy_from_probs(mdp: Env, probs: np.ndarray) -> np.ndarray:
    """Per-step state-action occupancy d_h(s, a), shape (H, S, A)."""
    m = mdp.tabular
    H, S, A = m.rewards.shape
    d = np.empty((H, S, A))
    state_dist = np.zeros(S)
    state_dist[m.initial_state] = 1.0
    for h in range(H):
        d[h] = state_dist[:, None] * probs[h]
        state_dist = np.einsum("sa,sak->k", d[h], m.transitions[h])
    return d


def occupancy_measures(mdp: Env, policy: SoftmaxPolicy) -> np.ndarray:
    return occupancy_from_probs(mdp, policy.probs())


def _draw(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    # Row-wise inverse-CDF draw; clamp guards against cumsum round-off below 1.
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_batch(
    mdp: Env, probs: np.ndarray, n_episodes: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Roll out ``n_episodes`` episodes at once.

    Returns ``states`` (N, H+1), ``actions`` (N, H) and ``rewards`` (N, H).
    Column H of ``states`` holds the terminal sentinel.
    """
    m = mdp.tabular
    H = m.horizon
    states = np.empty((n_episodes, H + 1), dtype=np.int64)
    actions = np.empty((n_episodes, H), dtype=np.int64)
    rewards = np.empty((n_episodes, H))
    states[:, 0] = m.initial_state
    for h in range(H):
        s = states[:, h]
        a = _draw(np.cumsum(probs[h, s], axis=1), rng.random(n_episodes))
        actions[:, h] = a
        rewards[:, h] = m.rewards[h, s, a]
        if h + 1 < H:
            states[:, h + 1] = _draw(np.cumsum(m.transitions[h, s, a], axis=1), rng.random(n_episodes))
    states[:, H] = TERMINAL
    return states, actions, rewards


def rollout(mdp: Env, probs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One episode as arrays ``(states[H], actions[H], next_states[H])``."""
    m = mdp.tabular
    H = m.horizon
    states = np.empty(H, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    nxt = np.empty(H, dtype=np.int64)
    u = rng.random(2 * H)
    s = m.initial_state
    for h in range(H):
        states[h] = s
        a = int(np.searchsorted(np.cumsum(probs[h, s]), u[2 * h], side="right"))
        a = min(a, m.n_actions - 1)
        actions[h] = a
        if h + 1 < H:
            s2 = int(np.searchsorted(np.cumsum(m.transitions[h, s, a]), u[2 * h + 1], side="right"))
            s = min(s2, m.n_states - 1)
            nxt[h] = s
        else:
            nxt[h] = TERMINAL
    return states, actions, nxt


def sample_episode(
    mdp: Env, policy: SoftmaxPolicy, rng: np.random.Generator, episode_index: int = 0
) -> Trajectory:
    m = mdp.tabular
    states, actions, nxt = rollout(m, policy.probs(), rng)
    return Trajectory(
        [
            Transition(h + 1, int(s), int(a), float(m.rewards[h, s, a]), int(s2))
            for h, (s, a, s2) in enumerate(zip(states, actions, nxt))
        ],
        episode_index=episode_index,
    )


def mdp_from_dict(doc: dict) -> Env:
    """Build an MDP from the JSON document layout used by the CLI."""
    try:
        S, A, H = int(doc["n_states"]), int(doc["n_actions"]), int(doc["horizon"])
        P = np.asarray(doc["transitions"], dtype=float).reshape(H, S, A, S)
        r = np.asarray(doc["rewards"], dtype=float).reshape(H, S, A)
    except (KeyError, ValueError, TypeError) as exc:
        raise MdpError(f"malformed MDP document: {exc}") from exc
    mdp = TabularMdp(P, r, int(doc.get("initial_state", 0)))
    if doc.get("features") is None:
        return mdp
    phi = np.asarray(doc["features"], dtype=float)
    return LinearMdp(mdp, phi.reshape(H, S, A, phi.shape[-1]))


def mdp_to_dict(mdp: Env) -> dict:
    m = mdp.tabular
    doc = {
        "n_states": m.n_states,
        "n_actions": m.n_actions,
        "horizon": m.horizon,
        "transitions": m.transitions.tolist(),
        "rewards": m.rewards.tolist(),
        "initial_state": m.initial_state,
    }
    if isinstance(mdp, LinearMdp):
        doc["features"] = mdp.features.reshape(-1, mdp.dim).tolist()
    return doc


def load_mdp(path: str | Path) -> Env:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))
