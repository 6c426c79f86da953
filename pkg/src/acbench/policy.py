"""Softmax actor updated by multiplicative weights (mirror ascent)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acbench.mdp import Env, occupancy_from_probs


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-logit subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class SoftmaxPolicy:
    """pi_h(a|s) proportional to exp(logits[h, s, a]).

    With ``features`` set the policy is linear-logit: the logits are
    ``features @ weights[h]`` and only linear critics may update it.
    """

    logits: np.ndarray
    eta: float = 1.0
    reset_count: int = 0
    features: np.ndarray | None = None
    weights: np.ndarray | None = None

    @classmethod
    def uniform(cls, horizon: int, n_states: int, n_actions: int, eta: float = 1.0) -> SoftmaxPolicy:
        return cls(np.zeros((horizon, n_states, n_actions)), eta=eta)

    @classmethod
    def linear(cls, features: np.ndarray, eta: float = 1.0) -> SoftmaxPolicy:
        H, S, A, d = features.shape
        return cls(np.zeros((H, S, A)), eta=eta, features=features, weights=np.zeros((H, d)))

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> SoftmaxPolicy:
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.logits.shape

    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def action_probs(self, h: int, s: int) -> np.ndarray:
        return softmax(self.logits[h, s])

    def copy(self) -> SoftmaxPolicy:
        return SoftmaxPolicy(
            self.logits.copy(),
            self.eta,
            self.reset_count,
            self.features,
            None if self.weights is None else self.weights.copy(),
        )


def action_probs(policy: SoftmaxPolicy, h: int, s: int) -> np.ndarray:
    return policy.action_probs(h, s)


def mirror_ascent_step(policy: SoftmaxPolicy, critic, eta: float | None = None) -> SoftmaxPolicy:
    """In-place update pi <- pi * exp(eta * f); returns the same policy.

    ``critic`` may be a :class:`~acbench.approx.Critic` or an (H, S, A) table.
    """
    eta = policy.eta if eta is None else eta
    if not eta > 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    if policy.weights is not None:
        w = getattr(critic, "weights", None)
        if w is None or getattr(critic, "bonus", None) is not None or critic.clip_enabled:
            raise ValueError("linear-logit policies accept only unclipped, bonus-free linear critics")
        policy.weights += eta * w
        policy.logits = np.einsum("hsad,hd->hsa", policy.features, policy.weights)
        return policy
    table = critic if isinstance(critic, np.ndarray) else critic.table()
    policy.logits += eta * table
    return policy


def reset_uniform(policy: SoftmaxPolicy) -> SoftmaxPolicy:
    policy.logits = np.zeros(policy.logits.shape)
    if policy.weights is not None:
        policy.weights = np.zeros_like(policy.weights)
    policy.reset_count += 1
    return policy


def greedy_actions(table: np.ndarray) -> np.ndarray:
    """argmax over actions; np.argmax already returns the lowest tied index."""
    return table.argmax(axis=-1)


def greedy_probs(table: np.ndarray) -> np.ndarray:
    return np.eye(table.shape[-1])[greedy_actions(table)]


def greedy_policy(critic) -> SoftmaxPolicy:
    """Deterministic policy playing argmax_a f_h(s, a); logits are 0 / -inf."""
    table = critic if isinstance(critic, np.ndarray) else critic.table()
    return SoftmaxPolicy.from_probs(greedy_probs(table))


def kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def default_eta(kind: str, n_actions: int, horizon: int, episodes: int, dim: int = 1, scale: float = 1.0) -> float:
    """Learning rates of the order prescribed for the two actor-critic families.

    ``kind="every-episode"`` is sqrt(log|A| / (H^2 T)); ``kind="rare-switching"`` is
    sqrt(d log T log|A| / (H T)).
    """
    log_a = np.log(max(n_actions, 2))
    T = max(episodes, 2)
    if kind == "every-episode":
        return scale * float(np.sqrt(log_a / (horizon**2 * T)))
    if kind == "rare-switching":
        return scale * float(np.sqrt(dim * np.log(T) * log_a / (horizon * T)))
    raise ValueError(f"unknown learning-rate family {kind!r}")


def mirror_tracking_check(
    critics: list[np.ndarray] | np.ndarray, comparator: np.ndarray, mdp: Env, eta: float
) -> tuple[float, float]:
    """Tracking error of multiplicative weights against a fixed comparator.

    ``critics`` is a sequence of (H, S, A) tables f^(1..T) with values in [0, H];
    ``comparator`` an (H, S, A) probability table. The policies pi^(t) start
    uniform and are updated with each critic in turn. Returns ``(lhs, rhs)`` with
    lhs = sum_t sum_h E_{comparator}[<f_h^(t), comparator_h - pi_h^(t)>] and
    rhs = eta H^3 T / 2 + H log|A| / eta.
    """
    m = mdp.tabular
    H, S, A = m.rewards.shape
    state_occ = occupancy_from_probs(m, comparator).sum(axis=-1)
    logits = np.zeros((H, S, A))
    lhs = 0.0
    for f in critics:
        pi = softmax(logits)
        gap = np.einsum("hsa,hsa->hs", f, comparator - pi)
        lhs += float(np.sum(state_occ * gap))
        logits += eta * f
    T = len(critics)
    rhs = eta * H**3 * T / 2 + H * np.log(A) / eta
    return lhs, float(rhs)
