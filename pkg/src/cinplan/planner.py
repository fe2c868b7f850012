"""The differentiable planner forward pass.

Kernels produced by the capability net act as per-state, per-action
convolution weights over the value map; K sweeps of convolve + max-pool
approximate value iteration. With ground-truth one-hot kernels the sweep is
bit-identical to classical VI, which is what the oracle-equivalence tests
pin down.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import capability
from .gridworld import (
    N_ACTIONS,
    Action,
    State,
    WorldMap,
    all_patches,
    next_state_table,
    step as world_step,
)

REACHED = "reached"
TIMEOUT = "timeout"
STUCK = "stuck"


@dataclass(frozen=True)
class HyperParams:
    """Planning and reward constants shared by the oracle and the planner."""

    gamma: float = 0.99
    k_iters: int = 30
    kernel_size: int = 3
    r_p: float = 10.0
    r_n: float = -0.5
    max_steps: int = 100

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.k_iters < 1:
            raise ValueError(f"k_iters must be positive, got {self.k_iters}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not (self.r_p > 0.0 > self.r_n):
            raise ValueError(f"need r_p > 0 > r_n, got {self.r_p}, {self.r_n}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")


def default_hyperparams(m: int, exact: bool = False, **overrides) -> HyperParams:
    """Defaults scaled to the map side: K = 3m for learned kernels, 10m when
    the run must reproduce converged VI exactly."""
    kw = dict(
        gamma=0.99,
        k_iters=(10 if exact else 3) * m,
        kernel_size=3,
        r_p=10.0,
        r_n=-0.5,
        max_steps=m * m,
    )
    kw.update(overrides)
    return HyperParams(**kw)


@dataclass(frozen=True)
class PlanResult:
    """One planning query: value maps, the greedy action, and its rollout."""

    q: np.ndarray
    v: np.ndarray
    reward: np.ndarray
    chosen: Action
    trajectory: list[State]


@dataclass(frozen=True)
class RolloutResult:
    trajectory: list[State]
    status: str  # REACHED | TIMEOUT | STUCK
    steps: int


def sparse_reward(world: WorldMap, goal: State, hp: HyperParams) -> np.ndarray:
    """r_p at the goal cell, r_n everywhere else."""
    if not world.in_bounds(goal):
        raise ValueError(f"goal {goal} out of bounds for m={world.m}")
    if not world.traversable(goal):
        raise ValueError(f"goal {goal} is not traversable")
    reward = np.full((world.m, world.m), hp.r_n)
    reward[goal] = hp.r_p
    return reward


def true_kernel_field(world: WorldMap, f: int = 3) -> np.ndarray:
    """Ground-truth one-hot kernel field, (m, m, |A|, f, f).

    Non-traversable cells self-loop, so their values can never reach a
    traversable cell through these kernels.
    """
    if f % 2 == 0 or f < 1:
        raise ValueError(f"kernel size must be odd, got {f}")
    m, half = world.m, f // 2
    table = next_state_table(world)
    rows, cols = np.divmod(np.arange(m * m), m)
    field = np.zeros((m * m, N_ACTIONS, f, f))
    for a in range(N_ACTIONS):
        dr = table[a] // m - rows + half
        dc = table[a] % m - cols + half
        field[np.arange(m * m), a, dr, dc] = 1.0
    return field.reshape(m, m, N_ACTIONS, f, f)


def build_kernel_field(
    world: WorldMap, net: capability.CapabilityNet, f: int | None = None
) -> np.ndarray:
    """Capability-net kernels for every traversable state, (m, m, |A|, f, f).

    One batched net evaluation per map; the field is reused across all K
    value-iteration sweeps. Non-traversable cells get a fixed self-loop.
    """
    f = net.kernel_size if f is None else f
    if f != net.kernel_size:
        raise ValueError(f"net expects kernel size {net.kernel_size}, got {f}")
    m, half = world.m, f // 2
    trav = world.traversable_mask().ravel()
    patches = all_patches(world, f)
    probs, _ = capability.forward_batch(net, patches[trav])
    field = np.zeros((m * m, N_ACTIONS, f, f))
    field[:, :, half, half] = 1.0
    field[trav] = probs.reshape(-1, N_ACTIONS, f, f)
    return field.reshape(m, m, N_ACTIONS, f, f)


def vi_forward(
    kernels: np.ndarray, reward: np.ndarray, hp: HyperParams, tape=None
) -> tuple[np.ndarray, np.ndarray]:
    """K sweeps of Q = gamma * <kernel, V-window> + R, V = max_a Q.

    V starts at zero, windows past the border read zero, and the goal cell
    (the unique positive reward) is clamped to r_p after every max-pool.
    Passing ``tape`` records per-sweep inputs and argmax routes for the
    reverse pass without changing a single arithmetic operation.
    """
    m = reward.shape[0]
    f = hp.kernel_size
    half = f // 2
    if kernels.shape != (m, m, N_ACTIONS, f, f):
        raise ValueError(f"kernel field shape {kernels.shape} mismatches map/hp")
    if hp.k_iters < 1:
        raise ValueError("k_iters must be >= 1")
    gi = int(np.argmax(reward))
    goal = (gi // m, gi % m)
    kern_flat = kernels.reshape(m * m, N_ACTIONS, f * f)
    reward_col = reward.reshape(m * m, 1)
    v = np.zeros((m, m))
    q = None
    for _ in range(hp.k_iters):
        if tape is not None:
            tape.v_hist.append(v)
        vpad = np.zeros((m + 2 * half, m + 2 * half))
        vpad[half : half + m, half : half + m] = v
        windows = np.lib.stride_tricks.sliding_window_view(vpad, (f, f))
        win_flat = windows.reshape(m * m, f * f, 1)
        q = hp.gamma * (kern_flat @ win_flat)[:, :, 0] + reward_col
        amax = q.argmax(axis=1)
        v = np.take_along_axis(q, amax[:, None], axis=1)[:, 0].reshape(m, m).copy()
        v[goal] = hp.r_p
        if tape is not None:
            tape.amax_hist.append(amax.reshape(m, m))
    return q.reshape(m, m, N_ACTIONS), v


def greedy_action(q: np.ndarray, s: State) -> Action:
    """Argmax over the action axis; ties resolve to the lowest index."""
    return Action(int(np.argmax(q[s[0], s[1]])))


def rollout_greedy(
    world: WorldMap, q: np.ndarray, goal: State, start: State, max_steps: int
) -> RolloutResult:
    """Walk the greedy policy of a fixed Q map until goal, timeout, or a
    blocked (self-repeating) move."""
    traj = [(int(start[0]), int(start[1]))]
    s = traj[0]
    if s == tuple(goal):
        return RolloutResult(traj, REACHED, 0)
    for t in range(1, max_steps + 1):
        a = greedy_action(q, s)
        nxt = world_step(world, s, a)
        traj.append(nxt)
        if nxt == tuple(goal):
            return RolloutResult(traj, REACHED, t)
        if nxt == s:
            return RolloutResult(traj, STUCK, t)
        s = nxt
    return RolloutResult(traj, TIMEOUT, max_steps)


def plan(
    world: WorldMap,
    net: capability.CapabilityNet | None,
    goal: State,
    start: State,
    hp: HyperParams,
) -> tuple[PlanResult, RolloutResult]:
    """Plan once on a map and roll the greedy policy out from ``start``.

    ``net=None`` plans with the ground-truth one-hot kernels.
    """
    if not world.traversable(start):
        raise ValueError(f"start {start} is not traversable")
    reward = sparse_reward(world, goal, hp)
    if net is None:
        kernels = true_kernel_field(world, hp.kernel_size)
    else:
        kernels = build_kernel_field(world, net, hp.kernel_size)
    q, v = vi_forward(kernels, reward, hp)
    roll = rollout_greedy(world, q, goal, start, hp.max_steps)
    result = PlanResult(
        q=q, v=v, reward=reward, chosen=greedy_action(q, start), trajectory=roll.trajectory
    )
    return result, roll


def rollout(
    world: WorldMap,
    net: capability.CapabilityNet | None,
    goal: State,
    start: State,
    hp: HyperParams,
) -> RolloutResult:
    """Convenience wrapper: plan then walk; see ``plan``."""
    _, roll = plan(world, net, goal, start, hp)
    return roll


def save_matrix_text(path, arr: np.ndarray) -> None:
    """Plain-text matrix dump, one row per line."""
    with open(path, "w") as fh:
        for row in np.atleast_2d(arr):
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def save_grayscale_pgm(path, arr: np.ndarray) -> None:
    """Min-max normalized 8-bit grayscale image (binary PGM)."""
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi > lo:
        img = np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.zeros_like(a, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
