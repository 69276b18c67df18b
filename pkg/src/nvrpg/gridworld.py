"""FrozenLake-style slippery gridworlds and the built-in test environments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nvrpg.mdp import TabularMdp

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
_PERPENDICULAR = {UP: (LEFT, RIGHT), DOWN: (LEFT, RIGHT), LEFT: (UP, DOWN), RIGHT: (UP, DOWN)}

FROZEN_LAKE_8X8 = (
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
)


@dataclass(frozen=True)
class GridSpec:
    """Grid layout.  Cells are (row, col); state index is row * cols + col.

    ``goal_mode="terminal"`` sends goal cells to the absorbing terminal state
    after one step (reward is collected once); ``"absorbing"`` makes each goal
    cell a self-loop so its reward accrues every step.  Holes always lead to
    the terminal state.  ``start_dist="uniform"`` spreads the initial
    distribution over every state (terminal included) instead of the start cells.
    """

    rows: int
    cols: int
    holes: tuple = ()
    goals: tuple = ()
    slip: float = 1.0 / 3.0
    gamma: float = 0.9
    start: tuple = ((0, 0),)
    goal_mode: str = "terminal"
    start_dist: str = "cells"

    @classmethod
    def from_map(cls, lines, **kwargs) -> "GridSpec":
        holes, goals, start = [], [], []
        for r, line in enumerate(lines):
            for c, ch in enumerate(line):
                if ch == "H":
                    holes.append((r, c))
                elif ch == "G":
                    goals.append((r, c))
                elif ch == "S":
                    start.append((r, c))
        return cls(len(lines), len(lines[0]), tuple(holes), tuple(goals), start=tuple(start), **kwargs)

    @property
    def has_terminal(self) -> bool:
        return bool(self.holes) or (bool(self.goals) and self.goal_mode == "terminal")

    @property
    def num_states(self) -> int:
        return self.rows * self.cols + int(self.has_terminal)

    def index(self, cell) -> int:
        return cell[0] * self.cols + cell[1]


def _validate(spec: GridSpec) -> None:
    if spec.rows < 1 or spec.cols < 1:
        raise ValueError("grid must have at least one cell")
    if not 0.0 <= spec.slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")
    if spec.goal_mode not in ("terminal", "absorbing"):
        raise ValueError(f"unknown goal_mode {spec.goal_mode!r}")
    for name, cells in (("hole", spec.holes), ("goal", spec.goals), ("start", spec.start)):
        for r, c in cells:
            if not (0 <= r < spec.rows and 0 <= c < spec.cols):
                raise ValueError(f"{name} cell {(r, c)} lies outside the {spec.rows}x{spec.cols} grid")
    if spec.start_dist not in ("cells", "uniform"):
        raise ValueError(f"unknown start_dist {spec.start_dist!r}")
    if set(spec.holes) & set(spec.goals):
        raise ValueError("a cell cannot be both a hole and a goal")
    if not spec.start:
        raise ValueError("need at least one start cell")


def _neighbor(spec: GridSpec, cell, action):
    dr, dc = _MOVES[action]
    r, c = cell[0] + dr, cell[1] + dc
    if 0 <= r < spec.rows and 0 <= c < spec.cols:
        return r, c
    return cell


def build_gridworld(spec: GridSpec) -> TabularMdp:
    _validate(spec)
    n = spec.num_states
    terminal = n - 1 if spec.has_terminal else None
    p = np.zeros((n, 4, n))
    holes, goals = set(spec.holes), set(spec.goals)
    for r in range(spec.rows):
        for c in range(spec.cols):
            s = spec.index((r, c))
            if (r, c) in holes or ((r, c) in goals and spec.goal_mode == "terminal"):
                p[s, :, terminal] = 1.0
                continue
            if (r, c) in goals:
                p[s, :, s] = 1.0
                continue
            for a in range(4):
                p[s, a, spec.index(_neighbor(spec, (r, c), a))] += 1.0 - spec.slip
                for side in _PERPENDICULAR[a]:
                    p[s, a, spec.index(_neighbor(spec, (r, c), side))] += spec.slip / 2.0
    if terminal is not None:
        p[terminal, :, terminal] = 1.0
    if spec.start_dist == "uniform":
        rho = np.full(n, 1.0 / n)
    else:
        rho = np.zeros(n)
        for cell in spec.start:
            rho[spec.index(cell)] += 1.0 / len(spec.start)
    return TabularMdp(p, rho, spec.gamma, name=f"grid{spec.rows}x{spec.cols}")


def goal_reward(spec: GridSpec, value: float = 1.0) -> np.ndarray:
    """Reward table paying ``value`` for any action taken in a goal cell."""
    r = np.zeros((spec.num_states, 4))
    for cell in spec.goals:
        r[spec.index(cell)] = value
    return r


def frozen_lake_8x8(slip: float = 1.0 / 3.0, gamma: float = 0.9, start_dist: str = "cells") -> GridSpec:
    return GridSpec.from_map(FROZEN_LAKE_8X8, slip=slip, gamma=gamma, start_dist=start_dist)


def gridworld_5x5(slip: float = 0.0, gamma: float = 0.9, start_dist: str = "cells") -> GridSpec:
    return GridSpec(5, 5, holes=((1, 1), (1, 3), (3, 1), (2, 3)), goals=((4, 4),), slip=slip, gamma=gamma,
                    start_dist=start_dist)


def chain_2state(gamma: float = 0.8) -> TabularMdp:
    """Two states, two actions, stochastic dynamics; small enough for exact oracles."""
    p = np.array(
        [
            [[0.5, 0.5], [0.9, 0.1]],
            [[0.0, 1.0], [0.7, 0.3]],
        ]
    )
    return TabularMdp(p, np.array([0.6, 0.4]), gamma, name="chain_2state")
