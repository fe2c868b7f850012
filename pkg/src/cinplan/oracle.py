"""Exact planners with known dynamics: value iteration and BFS distances.

The oracle is the reference every learned planner is measured against. It
also supplies expert action labels for imitation learning.
"""
from __future__ import annotations

from dataclasses import dataclass

from collections import deque

import numpy as np

from .gridworld import ACTION_OFFSETS, N_ACTIONS, Action, State, WorldMap, next_state_table

CONVERGENCE_TOL = 1e-9
# Slack for the per-sweep contraction assertion; covers float rounding only.
_CONTRACTION_SLACK = 1e-12


@dataclass(frozen=True)
class OracleSolution:
    """Converged value maps, greedy policy, and BFS step counts to the goal.

    ``dist`` is float64 holding exact integer step counts, with np.inf for
    cells that cannot reach the goal.
    """

    v_star: np.ndarray
    q_star: np.ndarray
    policy: np.ndarray
    dist: np.ndarray
    goal: State


def bfs_distances(world: WorldMap, goal: State) -> np.ndarray:
    """Unit-cost shortest-path lengths to the goal over 8-connected moves."""
    if not world.traversable(goal):
        raise ValueError(f"goal {goal} is not traversable")
    m = world.m
    dist = np.full((m, m), np.inf)
    dist[goal] = 0.0
    queue = deque([goal])
    cells = world.cells
    terrain = world.is_terrain
    delta = world.delta_h_star
    while queue:
        r, c = queue.popleft()
        d = dist[r, c]
        for a in range(N_ACTIONS):
            nr, nc = r + int(ACTION_OFFSETS[a, 0]), c + int(ACTION_OFFSETS[a, 1])
            if not (0 <= nr < m and 0 <= nc < m):
                continue
            if terrain:
                if abs(cells[nr, nc] - cells[r, c]) > delta:
                    continue
            elif cells[nr, nc] != 1.0:
                continue
            if dist[nr, nc] == np.inf:
                dist[nr, nc] = d + 1.0
                queue.append((nr, nc))
    return dist


def solve_exact(world: WorldMap, goal: State, hp) -> OracleSolution:
    """Classical value iteration with the true deterministic dynamics.

    Sparse reward (r_p at goal, r_n elsewhere), goal clamped to r_p after
    every sweep so it acts as an absorbing terminal. Iterates until the
    max-norm change drops below 1e-9 or the sweep cap 10*m^2 is hit.
    """
    if not world.traversable(goal):
        raise ValueError(f"goal {goal} is not traversable")
    m = world.m
    table = next_state_table(world)
    trav = world.traversable_mask().ravel()
    gi = goal[0] * m + goal[1]
    reward = np.full(m * m, hp.r_n)
    reward[gi] = hp.r_p

    v = np.zeros(m * m)
    prev_delta = None
    for _ in range(10 * m * m):
        q = reward[None, :] + hp.gamma * v[table]
        v_new = q.max(axis=0)
        v_new[~trav] = 0.0
        v_new[gi] = hp.r_p
        delta = np.abs(v_new - v).max()
        if prev_delta is not None:
            assert delta <= hp.gamma * prev_delta + _CONTRACTION_SLACK, (
                f"value sweep expanded: {delta} > gamma * {prev_delta}"
            )
        v = v_new
        if delta < CONVERGENCE_TOL:
            break
        prev_delta = delta

    q = (reward[None, :] + hp.gamma * v[table]).T.reshape(m, m, N_ACTIONS)
    q[~trav.reshape(m, m)] = 0.0
    policy = np.argmax(q, axis=2).astype(np.int64)
    return OracleSolution(
        v_star=v.reshape(m, m),
        q_star=q,
        policy=policy,
        dist=bfs_distances(world, goal),
        goal=(int(goal[0]), int(goal[1])),
    )


def expert_action(sol: OracleSolution, s: State) -> Action:
    """Greedy optimal action at ``s``; ties go to the lowest action index."""
    if not np.isfinite(sol.dist[s]):
        raise ValueError(f"state {s} cannot reach the goal")
    return Action(int(sol.policy[s]))
