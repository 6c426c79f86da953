"""Environment constructors with exact DP ground truth."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, fields, replace
from typing import Literal

import numpy as np

from acbench.mdp import Env, LinearMdp, MdpError, TabularMdp

EnvKind = Literal["chain", "random-tabular", "random-linear", "tetris"]

DEFAULT_STATE_CAP = 200_000

# Tetris pieces as (width, height) rectangles in their unrotated orientation.
PIECES: tuple[tuple[int, int], ...] = ((1, 1), (2, 1), (2, 2))


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind = "chain"
    seed: int = 0
    n_states: int = 5
    n_actions: int = 2
    horizon: int = 8
    dim: int = 4
    width: int = 3
    height: int = 3
    n_pieces: int = 1
    slip: float = 0.0
    sparsity: float = 0.0
    dirichlet: float = 1.0
    one_hot: bool = False
    tetris_features: str = "afterstate"
    state_cap: int = DEFAULT_STATE_CAP

    def __post_init__(self) -> None:
        for name in ("n_states", "n_actions", "horizon", "dim", "width", "height", "n_pieces", "state_cap"):
            if getattr(self, name) < 1:
                raise MdpError(f"{name} must be positive")
        if not 0.0 <= self.sparsity <= 1.0 or not 0.0 <= self.slip <= 1.0:
            raise MdpError("sparsity and slip must lie in [0, 1]")
        if self.kind == "random-linear" and self.dim > self.n_states * self.n_actions:
            raise MdpError("random-linear needs dim <= n_states * n_actions")

    @classmethod
    def from_dict(cls, doc: dict) -> EnvConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"preset"}
        if unknown:
            raise MdpError(f"unknown env fields: {sorted(unknown)}")
        base = PRESETS[doc["preset"]] if "preset" in doc else cls()
        return replace(base, **{k: v for k, v in doc.items() if k != "preset"})

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, EnvConfig] = {
    "chain-5": EnvConfig(kind="chain", n_states=5, n_actions=2, horizon=8),
    "random-tab": EnvConfig(kind="random-tabular", seed=0, n_states=4, n_actions=2, horizon=3),
    "random-lin": EnvConfig(kind="random-linear", seed=7, n_states=6, n_actions=3, horizon=4, dim=4),
    "tetris-small": EnvConfig(kind="tetris", seed=0, width=3, height=3, n_pieces=2, horizon=6),
}


def make_chain(length: int, horizon: int, slip: float = 0.0) -> TabularMdp:
    """Chain of ``length`` states starting at the left end.

    Action 0 drifts left, action 1 steps right; with probability ``slip`` the
    move goes the other way. The reward is the probability of landing in the
    rightmost state, so the deterministic chain pays 1 per step spent arriving
    at or staying on the right end.
    """
    S = length
    if S < 2:
        raise MdpError("chain needs at least 2 states")
    if horizon < S - 1:
        raise MdpError(f"horizon {horizon} < {S - 1}: the goal is unreachable and V* would be 0")
    step = np.zeros((S, 2, S))
    for s in range(S):
        left, right = max(s - 1, 0), min(s + 1, S - 1)
        step[s, 0, left] += 1.0 - slip
        step[s, 0, right] += slip
        step[s, 1, right] += 1.0 - slip
        step[s, 1, left] += slip
    P = np.broadcast_to(step, (horizon, S, 2, S)).copy()
    r = P[..., S - 1].copy()
    return TabularMdp(P, r, 0)


def make_random_tabular(cfg: EnvConfig) -> TabularMdp:
    """Dirichlet transitions and U[0, 1] rewards zeroed with probability ``sparsity``."""
    rng = np.random.default_rng(cfg.seed)
    H, S, A = cfg.horizon, cfg.n_states, cfg.n_actions
    P = rng.dirichlet(np.full(S, cfg.dirichlet), size=(H, S, A))
    r = rng.random((H, S, A))
    r[rng.random((H, S, A)) < cfg.sparsity] = 0.0
    if cfg.sparsity >= 1.0:
        r[:] = 0.0
    return TabularMdp(P, r, 0)


def make_random_linear(cfg: EnvConfig) -> LinearMdp:
    """Low-rank MDP with P_h(s'|s,a) = phi(h,s,a)^T mu_h(s') and r_h = phi^T theta_h.

    Features are drawn from a flat Dirichlet and projected (L1-normalised) onto
    the simplex, so every Q^pi is exactly linear in phi and ||phi||_2 <= 1.
    """
    rng = np.random.default_rng(cfg.seed)
    H, S, A, d = cfg.horizon, cfg.n_states, cfg.n_actions, cfg.dim
    if d > S * A:
        raise MdpError("random-linear needs dim <= n_states * n_actions")
    if cfg.one_hot:
        if d != S * A:
            raise MdpError("one-hot features need dim == n_states * n_actions")
        phi = np.broadcast_to(np.eye(d).reshape(S, A, d), (H, S, A, d)).copy()
    else:
        phi = rng.dirichlet(np.ones(d), size=(H, S, A))
    mu = rng.dirichlet(np.full(S, cfg.dirichlet), size=(H, d))
    theta = rng.random((H, d))
    theta[rng.random((H, d)) < cfg.sparsity] = 0.0
    phi_mass = phi.sum(axis=-1, keepdims=True)
    mu_mass = mu.sum(axis=-1, keepdims=True)
    if np.any(phi_mass <= 0) or np.any(mu_mass <= 0):
        raise MdpError("feature or next-state factor rows cannot be normalised")
    phi = phi / phi_mass
    mu = mu / mu_mass
    P = np.einsum("hsad,hdk->hsak", phi, mu)
    r = np.clip(np.einsum("hsad,hd->hsa", phi, theta), 0.0, 1.0)
    return LinearMdp(TabularMdp(P, r, 0), phi)


def tetris_state_count(width: int, height: int, n_pieces: int) -> int:
    return (height + 1) ** width * n_pieces


def _tetris_drop(profile: tuple[int, ...], piece: int, action: int, height: int) -> tuple[tuple[int, ...], int]:
    """Drop ``piece`` with ``action`` = rotation * W + column; returns (profile, rows cleared)."""
    W = len(profile)
    rotation, column = divmod(action, W)
    pw, ph = PIECES[piece]
    if rotation:
        pw, ph = ph, pw
    column = min(column, W - pw)
    heights = list(profile)
    base = max(heights[column : column + pw])
    for c in range(column, column + pw):
        heights[c] = base + ph
    floor = min(heights)
    heights = [min(x - floor, height) for x in heights]
    return tuple(heights), floor - min(profile)


def make_tetris(cfg: EnvConfig) -> LinearMdp:
    """Column-height tetris with exhaustive state enumeration.

    A state is a capped height profile and the id of the piece to place; an
    action picks a rotation and a left column (clamped to the board). Rows
    completed by a drop are the rise of the minimum column height; they are
    removed and the reward is that count divided by the height cap (at least
    one column is untouched, so at most ``height`` rows complete at once).
    Heights above the cap are truncated and the next piece is uniform.

    Profile features are the post-drop heights scaled by the cap, a one-hot of
    the current piece and a bias. ``tetris_features="afterstate"`` prepends a
    one-hot of the post-drop profile and the reward, which makes the MDP an
    exact linear MDP: the next state depends on (s, a) only through the
    post-drop profile. Rows are scaled to unit norm bound.
    """
    W, C, K = cfg.width, cfg.height, cfg.n_pieces
    if not (3 <= W <= 6 and 3 <= C <= 6):
        raise MdpError("tetris needs width and height cap in [3, 6]")
    if not 1 <= K <= len(PIECES):
        raise MdpError(f"tetris supports 1..{len(PIECES)} pieces")
    if cfg.tetris_features not in ("afterstate", "profile"):
        raise MdpError(f"unknown tetris feature set {cfg.tetris_features!r}")
    S = tetris_state_count(W, C, K)
    if S > cfg.state_cap:
        raise MdpError(f"tetris state count {S} exceeds cap {cfg.state_cap}")
    A = 2 * W
    H = cfg.horizon
    profiles = list(itertools.product(range(C + 1), repeat=W))
    index = {p: i for i, p in enumerate(profiles)}
    # Post-drop profiles always touch the floor.
    after = [p for p in profiles if min(p) == 0]
    after_index = {p: i for i, p in enumerate(after)}

    step = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    n_after = len(after) + 1 if cfg.tetris_features == "afterstate" else 0
    d = n_after + W + K + 1
    phi = np.zeros((S, A, d))
    for pi, profile in enumerate(profiles):
        for piece in range(K):
            s = pi * K + piece
            for a in range(A):
                nxt, cleared = _tetris_drop(profile, piece, a, C)
                reward[s, a] = cleared / C
                base = index[nxt] * K
                step[s, a, base : base + K] = 1.0 / K
                if n_after:
                    phi[s, a, after_index[nxt]] = 1.0
                    phi[s, a, n_after - 1] = reward[s, a]
                phi[s, a, n_after : n_after + W] = np.asarray(nxt) / C
                phi[s, a, n_after + W + piece] = 1.0
                phi[s, a, -1] = 1.0
    phi /= np.sqrt((2 if n_after else 0) + W + 2)
    P = np.broadcast_to(step, (H, S, A, S)).copy()
    r = np.broadcast_to(reward, (H, S, A)).copy()
    feats = np.broadcast_to(phi, (H, S, A, d)).copy()
    return LinearMdp(TabularMdp(P, r, 0), feats)


def make_env(cfg: EnvConfig | str | dict) -> Env:
    if isinstance(cfg, str):
        cfg = PRESETS[cfg]
    elif isinstance(cfg, dict):
        cfg = EnvConfig.from_dict(cfg)
    if cfg.kind == "chain":
        return make_chain(cfg.n_states, cfg.horizon, cfg.slip)
    if cfg.kind == "random-tabular":
        return make_random_tabular(cfg)
    if cfg.kind == "random-linear":
        return make_random_linear(cfg)
    if cfg.kind == "tetris":
        return make_tetris(cfg)
    raise MdpError(f"unknown environment kind {cfg.kind!r}")
