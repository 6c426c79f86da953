"""Exact optimistic critic over an enumerated confidence set of grid-valued tables.

The function class is every (H, S, A) table whose entries lie on the grid
{0, g, 2g, ...} (g = ``grid_step * H``) below the step cap H - h + 1. The
confidence set keeps the tables whose greedy-backup TD loss at every step is
within ``beta`` of the best grid table for the same next-step critic; the
returned critic maximises max_a f_1(s_1, a) over that set.

The loss separates over (s, a) cells and couples steps only through the
next-step state values, so the search runs backward over the set of reachable
next-value vectors instead of over whole tables. It is still exponential in S
and is meant for tiny tabular instances only.
"""

from __future__ import annotations

import itertools

import numpy as np

from acbench.approx import Critic, StepDataset, td_loss

MAX_CELLS = 12
MAX_VALUE_VECTORS = 200_000


class ConfidenceSetTooLarge(ValueError):
    """The instance is outside the sizes the exact search supports."""


def value_grid(horizon: int, step_index: int, grid_step: float) -> np.ndarray:
    """Grid values for 0-based step ``step_index``, capped at H - h."""
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    width = grid_step * horizon
    cap = horizon - step_index
    return np.arange(0.0, cap + 1e-9, width)


def _cell_losses(data: StepDataset, next_values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """(S, A, G) TD loss of each grid value per cell, up to a cell-independent constant."""
    v = np.append(next_values, 0.0)
    diff = grid[None, None, None, :] - v[None, None, :, None]
    return np.einsum("sak,sakg->sag", data.counts, diff**2) - 2.0 * np.einsum("sak,sakg->sag", data.reward_sums, diff)


def _state_options(cell_loss: np.ndarray, grid: np.ndarray) -> list[dict[int, tuple[float, tuple[int, ...]]]]:
    """Per state: grid index of max_a f(s, a) -> (least loss excess, action-value indices)."""
    S, A, G = cell_loss.shape
    combos = np.array(list(itertools.product(range(G), repeat=A)))
    out = []
    for s in range(S):
        losses = cell_loss[s, np.arange(A)[None, :], combos].sum(axis=1)
        floor = losses.min()
        best: dict[int, tuple[float, tuple[int, ...]]] = {}
        for loss, combo in zip(losses, combos):
            top = int(combo.max())
            excess = float(loss - floor)
            if top not in best or excess < best[top][0] - 1e-12:
                best[top] = (excess, tuple(int(c) for c in combo))
        out.append(best)
    return out


def _feasible_vectors(options, beta: float):
    """Yield (value-index vector, per-state combos) with summed excess <= beta."""
    S = len(options)

    def walk(s: int, budget: float, idx: tuple, combos: tuple):
        if s == S:
            yield idx, combos
            return
        for top, (excess, combo) in sorted(options[s].items()):
            if excess <= budget + 1e-9:
                yield from walk(s + 1, budget - excess, idx + (top,), combos + (combo,))

    yield from walk(0, beta, (), ())


def confidence_set_critic(
    buffers: list[StepDataset], horizon: int, beta: float, grid_step: float = 0.25, initial_state: int = 0
) -> Critic:
    """Most optimistic grid table in the greedy-backup confidence set of width ``beta``."""
    S, A = buffers[0].n_states, buffers[0].n_actions
    if S * A > MAX_CELLS:
        raise ConfidenceSetTooLarge(f"exact confidence set needs S*A <= {MAX_CELLS}, got {S * A}")
    H = horizon
    grids = [value_grid(H, h, grid_step) for h in range(H)]
    # reachable[h] maps a next-value vector V_{h+1} (as a tuple) to the
    # (V_{h+2}, per-state combos) that produced it.
    reachable: list[dict[tuple, tuple]] = [dict() for _ in range(H + 1)]
    reachable[H][tuple(np.zeros(S))] = (None, None)
    for h in range(H - 1, 0, -1):
        grid = grids[h]
        for v_next in reachable[h + 1]:
            options = _state_options(_cell_losses(buffers[h], np.asarray(v_next), grid), grid)
            for idx, combos in _feasible_vectors(options, beta):
                key = tuple(float(grid[i]) for i in idx)
                if key not in reachable[h]:
                    reachable[h][key] = (v_next, combos)
                    if len(reachable[h]) > MAX_VALUE_VECTORS:
                        raise ConfidenceSetTooLarge("too many reachable value vectors for the exact search")

    grid = grids[0]
    best = None
    for v_next in reachable[1]:
        options = _state_options(_cell_losses(buffers[0], np.asarray(v_next), grid), grid)
        others = sum(min(e for e, _ in opt.values()) for s, opt in enumerate(options) if s != initial_state)
        for top, (excess, combo) in options[initial_state].items():
            if excess + others <= beta + 1e-9 and (best is None or grid[top] > best[0]):
                combos = [
                    combo if s == initial_state else min(opt.values())[1] for s, opt in enumerate(options)
                ]
                best = (float(grid[top]), v_next, combos)
    assert best is not None  # the per-step least-loss table is always feasible

    table = np.zeros((H, S, A))
    _, v_next, combos = best
    table[0] = grid[np.array(combos)]
    for h in range(1, H):
        nxt, combos = reachable[h][v_next]
        table[h] = grids[h][np.array(combos)]
        v_next = nxt
    return Critic("tabular", table, clip_enabled=False)


def brute_force_optimum(
    buffers: list[StepDataset], horizon: int, beta: float, grid_step: float = 0.25, initial_state: int = 0
) -> float:
    """Reference optimum by enumerating every grid table; exponential in H S A."""
    S, A = buffers[0].n_states, buffers[0].n_actions
    H = horizon
    grids = [value_grid(H, h, grid_step) for h in range(H)]
    per_step = [np.array(list(itertools.product(g, repeat=S * A))).reshape(-1, S, A) for g in grids]
    best = -np.inf
    floors: dict[tuple, float] = {}

    def loss_ok(h: int, f_h: np.ndarray, f_next: np.ndarray | None) -> bool:
        key = (h, None if f_next is None else f_next.tobytes())
        if key not in floors:
            floors[key] = min(td_loss(g, f_next, buffers[h]) for g in per_step[h])
        return td_loss(f_h, f_next, buffers[h]) <= floors[key] + beta + 1e-9

    for tables in itertools.product(*per_step):
        if all(loss_ok(h, tables[h], tables[h + 1] if h + 1 < H else None) for h in range(H)):
            best = max(best, float(tables[0][initial_state].max()))
    return best
