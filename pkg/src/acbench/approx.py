"""Critic classes, TD losses, least-squares fits and bonus-based optimism.

Every environment in this package is enumerable, so a critic is always
materialised as an (H, S, A) table; linear critics additionally keep their
per-step weights. Datasets keep per-(s, a, s') sufficient statistics so that
losses and fits are exact functions of the sample multiset.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from acbench.mdp import TERMINAL, Transition

CriticKind = Literal["tabular", "linear"]


class StepDataset:
    """Append-only transitions for a single step ``h`` (1-based).

    Next states use slot ``S`` of the statistics arrays for the terminal sentinel.
    """

    def __init__(self, step: int, n_states: int, n_actions: int) -> None:
        self.step = step
        self.n_states = n_states
        self.n_actions = n_actions
        self.counts = np.zeros((n_states, n_actions, n_states + 1))
        self.reward_sums = np.zeros((n_states, n_actions, n_states + 1))
        self.reward_sq = 0.0
        self._visits = np.zeros((n_states, n_actions))
        self._reward_totals = np.zeros((n_states, n_actions))
        self._gram_cache: dict[tuple, tuple[int, np.ndarray, np.ndarray]] = {}
        self._s: list[int] = []
        self._a: list[int] = []
        self._r: list[float] = []
        self._n: list[int] = []

    def append(self, s: int, a: int, r: float, s_next: int) -> None:
        k = self.n_states if s_next == TERMINAL else s_next
        self.counts[s, a, k] += 1.0
        self.reward_sums[s, a, k] += r
        self.reward_sq += r * r
        self._visits[s, a] += 1.0
        self._reward_totals[s, a] += r
        self._s.append(int(s))
        self._a.append(int(a))
        self._r.append(float(r))
        self._n.append(int(s_next))

    def add(self, tr: Transition) -> None:
        if tr.step != self.step:
            raise ValueError(f"transition for step {tr.step} added to dataset of step {self.step}")
        self.append(tr.state, tr.action, tr.reward, tr.next_state)

    def extend(self, other: StepDataset) -> None:
        if other.step != self.step or other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge datasets of different steps or shapes")
        # Replay sample by sample so the statistics are bit-identical to
        # appending the concatenated samples directly.
        for row in zip(other._s, other._a, other._r, other._n):
            self.append(*row)

    def copy(self) -> StepDataset:
        cache, self._gram_cache = self._gram_cache, {}
        try:
            return copy.deepcopy(self)
        finally:
            self._gram_cache = cache

    def __len__(self) -> int:
        return len(self._s)

    @property
    def visit_counts(self) -> np.ndarray:
        return self._visits.copy()

    def weighted_gram(self, features_h: np.ndarray) -> np.ndarray:
        """sum_i phi(s_i, a_i) phi(s_i, a_i)^T, updated incrementally as samples arrive."""
        # Views of the same buffer share this key; the cached view keeps the
        # buffer alive, so the address cannot be recycled by another array.
        key = (features_h.__array_interface__["data"][0], features_h.shape, features_h.strides)
        hit = self._gram_cache.get(key)
        if hit is None:
            hit = (len(self), features_h, _weighted_gram(self._visits, features_h))
        elif hit[0] != len(self):
            phi = features_h[self._s[hit[0] :], self._a[hit[0] :]]
            hit = (len(self), features_h, hit[2] + phi.T @ phi)
        self._gram_cache[key] = hit
        return hit[2]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.asarray(self._s, dtype=np.int64),
            np.asarray(self._a, dtype=np.int64),
            np.asarray(self._r, dtype=float),
            np.asarray(self._n, dtype=np.int64),
        )

    def transitions(self) -> list[Transition]:
        return [Transition(self.step, s, a, r, n) for s, a, r, n in zip(self._s, self._a, self._r, self._n)]

    def mean_targets(self, next_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-(s, a) visit counts and mean regression target r + V(s').

        ``next_values`` has length S; the terminal slot is valued 0.
        """
        v = np.append(next_values, 0.0)
        n = self._visits
        total = self._reward_totals + self.counts @ v
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(n > 0, total / n, 0.0)
        return n, mean


def empty_buffers(horizon: int, n_states: int, n_actions: int) -> list[StepDataset]:
    return [StepDataset(h + 1, n_states, n_actions) for h in range(horizon)]


@dataclass(frozen=True)
class TdTargetMode:
    """Greedy backup (``mode="max"``) or backup under ``policy`` (H, S, A probs)."""

    mode: Literal["max", "policy"] = "max"
    policy: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode == "policy" and self.policy is None:
            raise ValueError("policy target mode needs a policy")

    def next_values(self, f_next: np.ndarray | None, h: int) -> np.ndarray | None:
        """State values of the next-step critic used as the bootstrap target."""
        if f_next is None:
            return None
        if self.mode == "max":
            return f_next.max(axis=-1)
        return np.einsum("sa,sa->s", self.policy[h + 1], f_next)


MAX_BACKUP = TdTargetMode("max")


@dataclass
class BonusState:
    """Per-step Gram matrices Lambda_h = lambda I + sum phi phi^T and visit counts.

    Tabular states use one-hot features, so Lambda_h is diagonal and only the
    counts are stored.
    """

    kind: CriticKind
    counts: np.ndarray
    ridge: float = 1.0
    multiplier: float = 1.0
    features: np.ndarray | None = None
    gram: np.ndarray | None = None
    _cache: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    # Inverse Grams and quadratic forms phi^T Lambda^{-1} phi, kept current by
    # rank-one updates and recomputed exactly every RESYNC_EVERY updates.
    _inv: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    _quad: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)
    _since_sync: int = field(default=0, init=False, repr=False, compare=False)

    RESYNC_EVERY = 500

    @classmethod
    def tabular(cls, horizon: int, n_states: int, n_actions: int, multiplier: float, ridge: float = 1.0) -> BonusState:
        return cls("tabular", np.zeros((horizon, n_states, n_actions)), ridge, multiplier)

    @classmethod
    def linear(cls, features: np.ndarray, multiplier: float, ridge: float = 1.0) -> BonusState:
        H, S, A, d = features.shape
        gram = np.broadcast_to(ridge * np.eye(d), (H, d, d)).copy()
        return cls("linear", np.zeros((H, S, A)), ridge, multiplier, features, gram)

    def update(self, h: int, s: int, a: int, weight: float = 1.0) -> None:
        self.counts[h, s, a] += weight
        self._cache = None
        if self.gram is not None:
            phi = self.features[h, s, a]
            self.gram[h] += weight * np.outer(phi, phi)
            if self._quad is not None and self._since_sync < self.RESYNC_EVERY:
                u = self._inv[h] @ phi
                scale = weight / (1.0 + weight * (phi @ u))
                self._inv[h] -= scale * np.outer(u, u)
                proj = self.features[h] @ u
                self._quad[h] -= scale * proj * proj
                self._since_sync += 1
            else:
                self._quad = self._inv = None

    def absorb(self, buffers: list[StepDataset]) -> None:
        self._cache = self._quad = self._inv = None
        for h, data in enumerate(buffers):
            n = data.visit_counts
            self.counts[h] += n
            if self.gram is not None:
                self.gram[h] += _weighted_gram(n, self.features[h])

    def logdet(self) -> np.ndarray:
        """log det(Lambda_h) for every step."""
        if self.gram is None:
            return np.log(self.ridge + self.counts).sum(axis=(1, 2))
        return np.linalg.slogdet(self.gram)[1]

    def bonus_table(self) -> np.ndarray:
        """(H, S, A) bonuses; cached until the next update."""
        if self._cache is None:
            self._cache = self._compute_bonus_table()
        return self._cache.copy()

    def _compute_bonus_table(self) -> np.ndarray:
        if self.multiplier == 0.0:
            return np.zeros(self.counts.shape)
        if self.gram is None:
            return self.multiplier / np.sqrt(1.0 + self.counts)
        if self._quad is None:
            H, S, A, d = self.features.shape
            flat = self.features.reshape(H, S * A, d)
            self._inv = np.linalg.inv(self.gram)
            self._quad = (np.matmul(flat, self._inv) * flat).sum(axis=-1).reshape(H, S, A)
            self._since_sync = 0
        return self.multiplier * np.sqrt(np.maximum(self._quad, 0.0))

    def bonus(self, h: int, s: int, a: int) -> float:
        if self.gram is None:
            return float(self.multiplier / np.sqrt(1.0 + self.counts[h, s, a]))
        phi = self.features[h, s, a]
        return float(self.multiplier * np.sqrt(max(phi @ np.linalg.solve(self.gram[h], phi), 0.0)))

    def copy(self) -> BonusState:
        out = BonusState(
            self.kind,
            self.counts.copy(),
            self.ridge,
            self.multiplier,
            self.features,
            None if self.gram is None else self.gram.copy(),
        )
        out._cache = self._cache
        return out


def _weighted_gram(n: np.ndarray, features_h: np.ndarray) -> np.ndarray:
    """sum_{s,a} n(s, a) phi(s, a) phi(s, a)^T for an (S, A, d) feature slice."""
    flat = features_h.reshape(-1, features_h.shape[-1])
    return flat.T @ (flat * n.reshape(-1, 1))


@dataclass
class Critic:
    """Step-indexed Q estimate f_h(s, a).

    ``base`` holds the regression values; ``values`` the evaluated table with the
    frozen bonus added and, if ``clip_enabled``, clipped to [0, H - h + 1].
    """

    kind: CriticKind
    base: np.ndarray
    weights: np.ndarray | None = None
    bonus: BonusState | None = None
    clip_enabled: bool = True
    values: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        bonus = 0.0 if self.bonus is None else self.bonus.bonus_table()
        self.values = finish_values(self.base + bonus, self.clip_enabled)

    @classmethod
    def zeros(cls, horizon: int, n_states: int, n_actions: int, kind: CriticKind = "tabular", dim: int = 0) -> Critic:
        w = np.zeros((horizon, dim)) if kind == "linear" else None
        return cls(kind, np.zeros((horizon, n_states, n_actions)), weights=w, clip_enabled=False)

    @property
    def horizon(self) -> int:
        return self.base.shape[0]

    def table(self) -> np.ndarray:
        return self.values

    def __call__(self, h: int, s: int, a: int) -> float:
        return float(self.values[h, s, a])


def clip_caps(horizon: int) -> np.ndarray:
    """Upper clip value H - h + 1 for 0-based step index h."""
    return (horizon - np.arange(horizon)).astype(float)


def finish_values(raw: np.ndarray, clip_enabled: bool) -> np.ndarray:
    if not clip_enabled:
        return raw.copy()
    caps = clip_caps(raw.shape[0])[:, None, None]
    return np.clip(raw, 0.0, caps)


def optimistic_eval(critic: Critic, bonus: BonusState, h: int, s: int, a: int) -> float:
    """Critic base value plus the bonus of ``bonus`` at (h, s, a), clipped if enabled."""
    value = float(critic.base[h, s, a]) + bonus.bonus(h, s, a)
    if critic.clip_enabled:
        value = min(max(value, 0.0), float(critic.horizon - h))
    return value


def td_loss(
    f_h: np.ndarray,
    f_next: np.ndarray | None,
    data: StepDataset,
    mode: TdTargetMode = MAX_BACKUP,
) -> float:
    """Sum over samples of (f_h(s,a) - r - target(s'))^2.

    ``f_h`` and ``f_next`` are (S, A) tables; ``f_next=None`` (last step) means a
    zero bootstrap target.
    """
    if f_h.shape != data.counts.shape[:2]:
        raise ValueError(f"critic slice shape {f_h.shape} does not match data {data.counts.shape[:2]}")
    if len(data) == 0:
        return 0.0
    next_v = mode.next_values(f_next, data.step - 1)
    v = np.zeros(data.n_states + 1)
    if next_v is not None:
        v[:-1] = next_v
    diff = f_h[:, :, None] - v[None, None, :]
    loss = np.sum(data.counts * diff**2) - 2.0 * np.sum(data.reward_sums * diff) + data.reward_sq
    return max(float(loss), 0.0)


def ridge_fit(features: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    """w = (lambda I + Phi^T Phi)^-1 Phi^T y for per-sample feature rows ``features``."""
    if not ridge > 0:
        raise ValueError("ridge parameter must be positive")
    phi = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    d = phi.shape[1]
    gram = ridge * np.eye(d) + phi.T @ phi
    return np.linalg.solve(gram, phi.T @ y)


def ridge_fit_dataset(data: StepDataset, targets: np.ndarray, ridge: float, features_h: np.ndarray) -> np.ndarray:
    """Sample-level ridge fit; ``features_h`` is the (S, A, d) feature slice of the step."""
    s, a, _, _ = data.arrays()
    return ridge_fit(features_h[s, a].reshape(len(data), -1), targets, ridge)


def _ridge_from_stats(
    n: np.ndarray, mean: np.ndarray, features_h: np.ndarray, ridge: float, data_gram: np.ndarray | None = None
) -> np.ndarray:
    d = features_h.shape[-1]
    gram = ridge * np.eye(d) + (_weighted_gram(n, features_h) if data_gram is None else data_gram)
    rhs = features_h.reshape(-1, d).T @ (n * mean).reshape(-1)
    return np.linalg.solve(gram, rhs)


def fit_step(
    data: StepDataset,
    next_values: np.ndarray | None,
    kind: CriticKind,
    ridge: float = 1.0,
    features_h: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Least-squares minimiser of the TD loss at one step.

    Tabular: per-(s, a) sample mean of the targets, 0 on unvisited cells.
    Linear: ridge regression. Returns ``(table (S, A), weights or None)``.
    """
    S = data.n_states
    nv = np.zeros(S) if next_values is None else next_values
    n, mean = data.mean_targets(nv)
    if kind == "tabular":
        return mean, None
    if features_h is None:
        raise ValueError("linear critics need features")
    w = _ridge_from_stats(n, mean, features_h, ridge, data.weighted_gram(features_h))
    return (features_h.reshape(-1, w.shape[0]) @ w).reshape(n.shape), w


def fit_backward(
    buffers: list[StepDataset],
    mode: TdTargetMode,
    kind: CriticKind = "tabular",
    ridge: float = 1.0,
    features: np.ndarray | None = None,
    bonus: BonusState | None = None,
    clip_enabled: bool = True,
) -> Critic:
    """Backward least-squares pass h = H..1 (FQE for policy mode, FQI for max mode).

    With ``bonus`` the bootstrap target at step h uses the optimistic (bonus
    added, optionally clipped) critic of step h + 1, as in LSVI-UCB.
    """
    H = len(buffers)
    S, A = buffers[0].n_states, buffers[0].n_actions
    base = np.zeros((H, S, A))
    weights = np.zeros((H, features.shape[-1])) if kind == "linear" else None
    bonus_tab = np.zeros((H, S, A)) if bonus is None else bonus.bonus_table()
    values = np.zeros((H, S, A))
    caps = clip_caps(H)
    for h in range(H - 1, -1, -1):
        next_v = mode.next_values(values[h + 1], h) if h + 1 < H else None
        feats = None if features is None else features[h]
        base[h], w = fit_step(buffers[h], next_v, kind, ridge, feats)
        if w is not None:
            weights[h] = w
        raw = base[h] + bonus_tab[h]
        values[h] = np.clip(raw, 0.0, caps[h]) if clip_enabled else raw
    return Critic(kind, base, weights=weights, bonus=None if bonus is None else bonus.copy(), clip_enabled=clip_enabled)


def fqe(
    buffers: list[StepDataset],
    policy,
    kind: CriticKind = "tabular",
    ridge: float = 1.0,
    features: np.ndarray | None = None,
    bonus: BonusState | None = None,
    clip_enabled: bool = True,
) -> Critic:
    """Fitted Q evaluation of ``policy`` (SoftmaxPolicy or (H, S, A) probs)."""
    probs = policy if isinstance(policy, np.ndarray) else policy.probs()
    return fit_backward(buffers, TdTargetMode("policy", probs), kind, ridge, features, bonus, clip_enabled)


def fqi(
    buffers: list[StepDataset],
    kind: CriticKind = "tabular",
    ridge: float = 1.0,
    features: np.ndarray | None = None,
    bonus: BonusState | None = None,
    clip_enabled: bool = True,
) -> Critic:
    """Fitted Q iteration: greedy backups toward Q*."""
    return fit_backward(buffers, MAX_BACKUP, kind, ridge, features, bonus, clip_enabled)


def td_gaps(
    critic_table: np.ndarray,
    buffers: list[StepDataset],
    mode: TdTargetMode,
    kind: CriticKind = "tabular",
    ridge: float = 1.0,
    features: np.ndarray | None = None,
) -> np.ndarray:
    """Per-step L_h(f_h, f_{h+1}) - min_{f'} L_h(f', f_{h+1}).

    The minimum is realised by :func:`fit_step`; with ridge regularisation it can
    sit marginally above the exact minimum, so the gap may be slightly negative.
    """
    H = len(buffers)
    gaps = np.zeros(H)
    for h in range(H):
        f_next = critic_table[h + 1] if h + 1 < H else None
        next_v = mode.next_values(f_next, h)
        feats = None if features is None else features[h]
        refit, _ = fit_step(buffers[h], next_v, kind, ridge, feats)
        gaps[h] = td_loss(critic_table[h], f_next, buffers[h], mode) - td_loss(refit, f_next, buffers[h], mode)
    return gaps


def det_doubling_fired(gram_now: np.ndarray, gram_last: np.ndarray) -> bool:
    """True iff det(Lambda_h^now) >= 2 det(Lambda_h^last) for some step h.

    Accepts a single (d, d) matrix or a stack (H, d, d).
    """
    now = np.linalg.slogdet(np.asarray(gram_now, dtype=float))[1]
    last = np.linalg.slogdet(np.asarray(gram_last, dtype=float))[1]
    return bool(np.any(np.atleast_1d(now - last) >= np.log(2.0) - 1e-12))


def switch_should_fire(kind: Literal["td-gap", "det-doubling"], **state) -> bool:
    """Rare-switching trigger.

    ``td-gap`` expects ``gaps`` (per-step TD-loss gaps), ``horizon`` and ``beta``
    and fires iff some gap reaches 5 H^2 beta. ``det-doubling`` expects either
    ``gram_now``/``gram_last`` matrices or ``logdet_now``/``logdet_last`` arrays.
    """
    if kind == "td-gap":
        threshold = 5.0 * state["horizon"] ** 2 * state["beta"]
        return bool(np.any(np.asarray(state["gaps"]) >= threshold))
    if kind == "det-doubling":
        if "gram_now" in state:
            return det_doubling_fired(state["gram_now"], state["gram_last"])
        diff = np.asarray(state["logdet_now"]) - np.asarray(state["logdet_last"])
        return bool(np.any(diff >= np.log(2.0) - 1e-12))
    raise ValueError(f"unknown switch rule {kind!r}")


def default_beta(n_states: int, n_actions: int, horizon: int, episodes: int, delta: float, scale: float = 1.0) -> float:
    return scale * float(np.log(n_states * n_actions * horizon * max(episodes, 1) / delta))


def default_linear_bonus(dim: int, horizon: int, episodes: int, delta: float) -> float:
    return 0.5 * horizon * float(np.sqrt(dim * np.log(max(episodes, 2) / delta)))
