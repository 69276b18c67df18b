import numpy as np
import pytest

from nvrpg.gridworld import (
    DOWN, LEFT, RIGHT, UP, GridSpec, build_gridworld, frozen_lake_8x8, goal_reward, gridworld_5x5,
)
from nvrpg.mdp import value_iteration


def test_one_by_one_grid_is_absorbing():
    mdp = build_gridworld(GridSpec(1, 1, slip=0.0))
    assert mdp.num_states == 1 and mdp.num_actions == 4
    assert np.all(mdp.transition == 1.0)


def test_two_by_two_right_is_deterministic():
    spec = GridSpec(2, 2, slip=0.0)
    mdp = build_gridworld(spec)
    row = mdp.transition[spec.index((0, 0)), RIGHT]
    assert row[spec.index((0, 1))] == 1.0 and row.sum() == 1.0


def _hand_neighbors(r, c, a, n=4):
    # intended move, then the two perpendicular ones; walls keep the agent in place
    moves = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
    side = {UP: (LEFT, RIGHT), DOWN: (LEFT, RIGHT), LEFT: (UP, DOWN), RIGHT: (UP, DOWN)}
    out = np.zeros(n * n)
    for move, prob in ((a, 2 / 3), (side[a][0], 1 / 6), (side[a][1], 1 / 6)):
        dr, dc = moves[move]
        rr, cc = r + dr, c + dc
        if not (0 <= rr < n and 0 <= cc < n):
            rr, cc = r, c
        out[rr * n + cc] += prob
    return out


def test_slip_model_matches_hand_enumeration():
    mdp = build_gridworld(GridSpec(4, 4, slip=1 / 3))
    for r in range(4):
        for c in range(4):
            for a in range(4):
                np.testing.assert_allclose(mdp.transition[r * 4 + c, a], _hand_neighbors(r, c, a), atol=1e-15)
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)


def test_holes_and_goal_lead_to_terminal():
    spec = frozen_lake_8x8()
    mdp = build_gridworld(spec)
    assert mdp.num_states == 65
    term = mdp.num_states - 1
    for cell in spec.holes + spec.goals:
        assert np.all(mdp.transition[spec.index(cell), :, term] == 1.0)
    assert np.all(mdp.transition[term, :, term] == 1.0)
    assert mdp.initial_dist[0] == 1.0


def test_uniform_start_covers_every_state():
    mdp = build_gridworld(frozen_lake_8x8(start_dist="uniform"))
    np.testing.assert_allclose(mdp.initial_dist, 1.0 / 65)


def test_goal_reward_marks_goal_cells():
    spec = gridworld_5x5()
    r = goal_reward(spec)
    assert r.sum() == 4.0 and np.all(r[spec.index((4, 4))] == 1.0)


def test_5x5_optimum_is_discounted_shortest_path():
    # goal at (4,4) is 8 moves from (0,0) around the holes; gamma^8 is paid when acting there
    spec = gridworld_5x5()
    _, j_star = value_iteration(build_gridworld(spec), goal_reward(spec))
    assert j_star == pytest.approx(0.9**8, abs=1e-10)


@pytest.mark.parametrize("kwargs, match", [
    (dict(goals=((5, 0),)), "outside"),
    (dict(holes=((0, 1),), goals=((0, 1),)), "both"),
    (dict(slip=1.5), "slip"),
    (dict(start_dist="gaussian"), "start_dist"),
    (dict(goal_mode="sticky"), "goal_mode"),
])
def test_inconsistent_specs_rejected(kwargs, match):
    with pytest.raises(ValueError, match=match):
        build_gridworld(GridSpec(3, 3, **kwargs))


def test_absorbing_goal_mode_self_loops():
    spec = GridSpec(2, 2, goals=((1, 1),), slip=0.0, goal_mode="absorbing")
    mdp = build_gridworld(spec)
    assert mdp.num_states == 4
    assert np.all(mdp.transition[3, :, 3] == 1.0)
