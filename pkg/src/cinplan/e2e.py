"""End-to-end imitation learning through the unrolled planner.

The forward pass is the planner's own ``vi_forward`` (same code path, so the
numerics match bit for bit) plus a softmax readout of Q at the query states.
The tape records everything the reverse pass needs: the value map entering
each sweep, each sweep's max-pool argmax routes, and the capability-net
activation cache. Backward pushes cross-entropy adjoints through K max-pool
layers, the per-state kernel dot products, the per-action softmax, and
finally the MLP, accumulating kernel adjoints across sweeps in a fixed order
so training is reproducible.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import capability, planner
from .capability import AdamState, CapabilityNet, TrainingDiverged, adam_step
from .gridworld import N_ACTIONS, State, WorldMap, all_patches


@dataclass(eq=False, frozen=True)
class ILSample:
    """One imitation example: plan on ``world`` toward ``goal``, queried at
    ``state``; ``expert`` is the oracle's greedy action index there."""

    world: WorldMap
    goal: State
    state: State
    expert: int


@dataclass
class Tape:
    """Recording of one planning forward pass, enough to replay or reverse it."""

    world: WorldMap
    net: CapabilityNet
    goal: State
    hp: planner.HyperParams
    trav_idx: np.ndarray  # flat indices of traversable states fed to the net
    cache: tuple  # MLP activation cache for those states
    probs: np.ndarray  # net outputs (T, |A|, F^2)
    kernels: np.ndarray  # full field (m, m, |A|, F, F)
    reward: np.ndarray
    queries: list[State]
    v_hist: list[np.ndarray] = field(default_factory=list)  # V entering sweep k
    amax_hist: list[np.ndarray] = field(default_factory=list)  # argmax of sweep k
    q: np.ndarray | None = None
    v: np.ndarray | None = None
    logits: np.ndarray | None = None  # (n_queries, |A|)
    probs_q: np.ndarray | None = None  # softmax of logits


def softmax_row(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss_from_probs(p: np.ndarray, expert: int) -> float:
    return float(-np.log(p[expert]))


def ce_grad_from_probs(p: np.ndarray, expert: int) -> np.ndarray:
    """d(cross-entropy)/d(logits) when p = softmax(logits)."""
    g = np.asarray(p, dtype=np.float64).copy()
    g[expert] -= 1.0
    return g


def _is_single_state(s_t) -> bool:
    return (
        isinstance(s_t, tuple)
        and len(s_t) == 2
        and not isinstance(s_t[0], (tuple, list))
    )


def forward_with_tape(
    world: WorldMap,
    net: CapabilityNet,
    goal: State,
    s_t,
    hp: planner.HyperParams,
) -> tuple[np.ndarray, Tape]:
    """Plan and read action logits at one or more query states.

    Returns (logits, tape): logits has shape (|A|,) for a single query state
    and (n, |A|) for a sequence. Logits are Q(s_t, .) of the final sweep and
    the recorded probabilities are their softmax.
    """
    single = _is_single_state(s_t)
    queries = [s_t] if single else [(int(r), int(c)) for r, c in s_t]
    queries = [(int(r), int(c)) for r, c in queries]
    if not queries:
        raise ValueError("need at least one query state")
    m, f, half = world.m, hp.kernel_size, hp.kernel_size // 2
    reward = planner.sparse_reward(world, goal, hp)
    trav_idx = np.flatnonzero(world.traversable_mask().ravel())
    patches = all_patches(world, f)
    probs, cache = capability.forward_batch(net, patches[trav_idx])
    kernels = np.zeros((m * m, N_ACTIONS, f, f))
    kernels[:, :, half, half] = 1.0
    kernels[trav_idx] = probs.reshape(-1, N_ACTIONS, f, f)
    kernels = kernels.reshape(m, m, N_ACTIONS, f, f)
    tape = Tape(
        world=world,
        net=net,
        goal=(int(goal[0]), int(goal[1])),
        hp=hp,
        trav_idx=trav_idx,
        cache=cache,
        probs=probs,
        kernels=kernels,
        reward=reward,
        queries=queries,
    )
    q, v = planner.vi_forward(kernels, reward, hp, tape=tape)
    tape.q, tape.v = q, v
    logits = np.stack([q[s] for s in queries])
    tape.logits = logits
    tape.probs_q = softmax_row(logits)
    return (logits[0] if single else logits), tape


def _check_experts(tape: Tape, experts) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(experts, dtype=np.int64))
    if len(arr) != len(tape.queries):
        raise ValueError(f"{len(arr)} expert labels for {len(tape.queries)} queries")
    if arr.min() < 0 or arr.max() >= N_ACTIONS:
        raise ValueError(f"expert action out of range: {arr}")
    return arr


def tape_loss(tape: Tape, experts) -> float:
    """Sum of per-query cross-entropy losses against the expert actions."""
    arr = _check_experts(tape, experts)
    return float(-np.log(tape.probs_q[np.arange(len(arr)), arr]).sum())


def _vi_reverse(tape: Tape, experts: np.ndarray) -> np.ndarray:
    """Adjoints of the net's kernel outputs for one tape: (T, |A|, F^2).

    Reverse accumulation sweep by sweep: only the recorded argmax entry of
    each max-pool receives the value adjoint, the goal-clamp cell receives
    none, and every sweep adds its contribution to the shared kernel
    adjoints (fixed order, so gradients are reproducible).
    """
    hp = tape.hp
    m = tape.reward.shape[0]
    f = hp.kernel_size
    half = f // 2
    f2 = f * f
    kern_flat = tape.kernels.reshape(m * m, N_ACTIONS, f2)
    goal_flat = tape.goal[0] * m + tape.goal[1]

    g_q = np.zeros((m * m, N_ACTIONS))
    for i, s in enumerate(tape.queries):
        g_q[s[0] * m + s[1]] += ce_grad_from_probs(tape.probs_q[i], int(experts[i]))

    g_kern = np.zeros((m * m, N_ACTIONS, f2))
    for k in range(len(tape.v_hist) - 1, -1, -1):
        vpad = np.zeros((m + 2 * half, m + 2 * half))
        vpad[half : half + m, half : half + m] = tape.v_hist[k]
        win_flat = np.lib.stride_tricks.sliding_window_view(vpad, (f, f)).reshape(
            m * m, f2
        )
        g_kern += hp.gamma * g_q[:, :, None] * win_flat[:, None, :]
        if k == 0:
            break  # V entering the first sweep is the zero constant
        # d(Q)/d(V window): scatter gamma * <g_q, kernels> back over the
        # overlapping windows, one offset at a time
        g_scatter = hp.gamma * (g_q[:, None, :] @ kern_flat)[:, 0, :]
        g_vpad = np.zeros((m + 2 * half, m + 2 * half))
        for dk in range(f):
            for dl in range(f):
                g_vpad[dk : dk + m, dl : dl + m] += g_scatter[:, dk * f + dl].reshape(
                    m, m
                )
        g_v = g_vpad[half : half + m, half : half + m].reshape(-1).copy()
        g_v[goal_flat] = 0.0
        g_q = np.zeros((m * m, N_ACTIONS))
        np.put_along_axis(
            g_q, tape.amax_hist[k - 1].reshape(-1, 1), g_v[:, None], axis=1
        )
    return g_kern[tape.trav_idx]


def backward(tape: Tape, experts) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Parameter gradients of the summed cross-entropy loss on the tape.

    The value-iteration adjoints from ``_vi_reverse`` flow through the
    per-action softmax into the MLP.
    """
    arr = _check_experts(tape, experts)
    g_probs = _vi_reverse(tape, arr)
    d_logits = capability._slice_softmax_backward(tape.probs, g_probs)
    return capability._mlp_backward(tape.net, tape.cache, d_logits)


class _ParamAverager:
    """Bias-corrected exponential moving average of the net parameters."""

    def __init__(self, net: CapabilityNet, decay: float):
        self.decay = decay
        self.t = 0
        self.avg = capability.flatten_params(net) * 0.0

    def update(self, net: CapabilityNet):
        self.t += 1
        self.avg *= self.decay
        self.avg += (1.0 - self.decay) * capability.flatten_params(net)

    def corrected(self) -> np.ndarray:
        return self.avg / (1.0 - self.decay**self.t)

    def write_into(self, net: CapabilityNet):
        capability.assign_params(net, self.corrected())

    def applied(self, net: CapabilityNet):
        averager = self

        class _Swap:
            def __enter__(self):
                self.saved = capability.flatten_params(net)
                capability.assign_params(net, averager.corrected())

            def __exit__(self, *exc):
                capability.assign_params(net, self.saved)

        return _Swap()


def _group_samples(samples: list[ILSample]):
    """Group by (map identity, goal) preserving first-occurrence order."""
    groups: dict = {}
    for s in samples:
        key = (id(s.world), s.goal)
        if key not in groups:
            groups[key] = (s.world, s.goal, [], [])
        groups[key][2].append(s.state)
        groups[key][3].append(int(s.expert))
    return list(groups.values())


def _patch_cache(ctx: dict, world: WorldMap, f: int):
    """Per-map traversable patches, computed once and reused every epoch."""
    key = id(world)
    if key not in ctx:
        trav_idx = np.flatnonzero(world.traversable_mask().ravel())
        ctx[key] = (all_patches(world, f)[trav_idx], trav_idx)
    return ctx[key]


def _batched_net_forward(net: CapabilityNet, ctx: dict, groups, f: int):
    """One MLP evaluation covering every map in ``groups``.

    Small per-map GEMMs dominate the runtime otherwise; stacking the patch
    rows of all maps recovers most of it. Returns (probs, cache, slices)
    where ``slices[i]`` selects group i's rows.
    """
    rows, slices, start = [], [], 0
    for world, _, _, _ in groups:
        patches, _ = _patch_cache(ctx, world, f)
        rows.append(patches)
        slices.append(slice(start, start + patches.shape[0]))
        start += patches.shape[0]
    probs, cache = capability.forward_batch(net, np.concatenate(rows, axis=0))
    return probs, cache, slices


def _assemble_kernels(world: WorldMap, probs: np.ndarray, trav_idx, f: int):
    m, half = world.m, f // 2
    kernels = np.zeros((m * m, N_ACTIONS, f, f))
    kernels[:, :, half, half] = 1.0
    kernels[trav_idx] = probs.reshape(-1, N_ACTIONS, f, f)
    return kernels.reshape(m, m, N_ACTIONS, f, f)


def _eval_samples(net: CapabilityNet, groups, hp: planner.HyperParams, ctx: dict, chunk: int = 64):
    """Mean cross-entropy and %Err of the greedy action over all samples."""
    total_loss = 0.0
    wrong = 0
    n = 0
    for lo in range(0, len(groups), chunk):
        part = groups[lo : lo + chunk]
        probs_all, _, slices = _batched_net_forward(net, ctx, part, hp.kernel_size)
        for (world, goal, states, experts), sl in zip(part, slices):
            _, trav_idx = _patch_cache(ctx, world, hp.kernel_size)
            kernels = _assemble_kernels(world, probs_all[sl], trav_idx, hp.kernel_size)
            reward = planner.sparse_reward(world, goal, hp)
            q, _ = planner.vi_forward(kernels, reward, hp)
            logits = np.stack([q[s] for s in states])
            p = softmax_row(logits)
            idx = np.arange(len(states))
            total_loss += float(-np.log(p[idx, experts]).sum())
            wrong += int((np.argmax(logits, axis=1) != np.asarray(experts)).sum())
            n += len(states)
    return total_loss / n, 100.0 * wrong / n


def _batched_train_step(net: CapabilityNet, ctx: dict, groups, hp: planner.HyperParams):
    """Forward + reverse over one minibatch of (map, goal) groups.

    Value-iteration tapes stay per map; the MLP forward and backward run
    once over the stacked rows. Returns (summed loss, g_w, g_b).
    """
    probs_all, cache, slices = _batched_net_forward(net, ctx, groups, hp.kernel_size)
    g_probs_all = np.zeros_like(probs_all)
    loss = 0.0
    for (world, goal, states, experts), sl in zip(groups, slices):
        _, trav_idx = _patch_cache(ctx, world, hp.kernel_size)
        kernels = _assemble_kernels(world, probs_all[sl], trav_idx, hp.kernel_size)
        reward = planner.sparse_reward(world, goal, hp)
        tape = Tape(
            world=world,
            net=net,
            goal=(int(goal[0]), int(goal[1])),
            hp=hp,
            trav_idx=trav_idx,
            cache=None,
            probs=probs_all[sl],
            kernels=kernels,
            reward=reward,
            queries=[(int(r), int(c)) for r, c in states],
        )
        q, v = planner.vi_forward(kernels, reward, hp, tape=tape)
        tape.q, tape.v = q, v
        tape.logits = np.stack([q[s] for s in tape.queries])
        tape.probs_q = softmax_row(tape.logits)
        arr = _check_experts(tape, experts)
        loss += tape_loss(tape, arr)
        g_probs_all[sl] = _vi_reverse(tape, arr)
    d_logits = capability._slice_softmax_backward(probs_all, g_probs_all)
    g_w, g_b = capability._mlp_backward(net, cache, d_logits)
    return loss, g_w, g_b


def train_e2e(
    net: CapabilityNet,
    samples: list[ILSample],
    epochs: int,
    adam: AdamState,
    hp: planner.HyperParams,
    batch_size: int = 32,
    rng_seed: int = 0,
    lr_decay: float = 1.0,
    lr_decay_start: int = 0,
    param_avg: float = 0.0,
) -> list[dict]:
    """Minibatch Adam on mean cross-entropy against expert actions.

    Batches are assembled from shuffled (map, goal) groups so each map is
    planned once per batch and all its query states share that tape;
    ``batch_size`` counts samples, not groups. From epoch ``lr_decay_start``
    on, the learning rate is multiplied by ``lr_decay`` each epoch (constant
    Adam steps orbit the optimum and make the late error curve churn).
    ``param_avg`` > 0 additionally maintains a bias-corrected exponential
    moving average of the parameters (Polyak averaging, updated per batch);
    the per-epoch metrics are then measured on the averaged net and the
    averaged parameters are written back into ``net`` at the end.

    Returns one log row per epoch with row 0 measured before any update;
    %Err and loss are evaluated over all samples with the net frozen, so the
    curve is not polluted by within-epoch drift.
    """
    if not samples:
        raise ValueError("no training samples")
    if not (0.0 < lr_decay <= 1.0):
        raise ValueError(f"lr_decay must be in (0, 1], got {lr_decay}")
    if not (0.0 <= param_avg < 1.0):
        raise ValueError(f"param_avg must be in [0, 1), got {param_avg}")
    rng = np.random.default_rng(rng_seed)
    all_groups = _group_samples(samples)
    ctx: dict = {}
    rows = []
    t0 = time.perf_counter()
    loss0, err0 = _eval_samples(net, all_groups, hp, ctx)
    rows.append(
        {
            "epoch": 0,
            "mean_loss": loss0,
            "pct_err": err0,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
    )
    base_lr = adam.lr
    averager = _ParamAverager(net, param_avg) if param_avg > 0.0 else None
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        adam.lr = base_lr * lr_decay ** max(0, epoch - lr_decay_start)
        order = rng.permutation(len(all_groups))
        pos = 0
        while pos < len(order):
            groups = []
            n_in_batch = 0
            while pos < len(order):
                group = all_groups[order[pos]]
                if groups and n_in_batch + len(group[2]) > batch_size:
                    break
                groups.append(group)
                n_in_batch += len(group[2])
                pos += 1
            batch_loss, g_w, g_b = _batched_train_step(net, ctx, groups, hp)
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"cross-entropy became {batch_loss}")
            scale = 1.0 / n_in_batch
            for i in range(len(g_w)):
                g_w[i] *= scale
                g_b[i] *= scale
            adam_step(net, adam, g_w, g_b)
            if averager is not None:
                averager.update(net)
        if averager is not None:
            with averager.applied(net):
                mean_loss, pct_err = _eval_samples(net, all_groups, hp, ctx)
        else:
            mean_loss, pct_err = _eval_samples(net, all_groups, hp, ctx)
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(f"cross-entropy became {mean_loss}")
        rows.append(
            {
                "epoch": epoch,
                "mean_loss": mean_loss,
                "pct_err": pct_err,
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
        )
    adam.lr = base_lr
    if averager is not None:
        averager.write_into(net)
    return rows


def write_train_log(path, rows: list[dict]) -> None:
    """CSV log: epoch, mean_loss, pct_err, wall_ms."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "pct_err", "wall_ms"])
        for r in rows:
            writer.writerow(
                [
                    r["epoch"],
                    f"{r['mean_loss']:.6f}",
                    f"{r['pct_err']:.3f}",
                    f"{r['wall_ms']:.1f}",
                ]
            )
