"""The capability module: a patch -> per-action next-state classifier.

A plain MLP (ReLU hidden layers) maps the flattened F x F local patch to
|A| * F^2 logits, normalized independently per action so each action slice is
a probability distribution over the F x F window. Forward, backward, Adam,
and the file format are all implemented here; nothing is delegated to an
autodiff framework because the end-to-end trainer reuses these exact
primitives inside its own reverse pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    N_ACTIONS,
    Action,
    State,
    WorldMap,
    all_patches,
    extract_patch,
    step,
)

NET_MAGIC = b"CINNET v1\n"


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass
class CapabilityNet:
    """MLP parameters. ``layer_sizes`` runs input -> hidden... -> output."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_actions: int
    kernel_size: int

    def __post_init__(self):
        f2 = self.kernel_size * self.kernel_size
        if self.layer_sizes[0] != f2:
            raise ValueError("input size must equal kernel_size^2")
        if self.layer_sizes[-1] != self.n_actions * f2:
            raise ValueError("output size must equal n_actions * kernel_size^2")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise ValueError(f"weight {i} shape {w.shape} mismatches layer_sizes")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"bias {i} shape {b.shape} mismatches layer_sizes")


def init_net(
    kernel_size: int = 3,
    n_actions: int = N_ACTIONS,
    hidden: int = 64,
    depth: int = 4,
    rng_seed: int = 0,
) -> CapabilityNet:
    """He-initialized net with ``depth`` ReLU hidden layers of width ``hidden``."""
    f2 = kernel_size * kernel_size
    sizes = [f2] + [hidden] * depth + [n_actions * f2]
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        if i == 0:
            # spread the first-layer ReLU offsets across the input range so
            # threshold-like features exist from the start; sharp
            # traversability boundaries train far faster this way
            biases.append(rng.uniform(-0.75, 0.75, size=fan_out))
        elif i < len(sizes) - 2:
            # small positive hidden biases keep pre-activations off the exact
            # ReLU kink even when an input zeroes out a whole layer
            biases.append(np.full(fan_out, 0.01))
        else:
            # tiny noise so the action slices never coincide bitwise even if
            # an input kills the whole trunk (exact logit collisions create
            # exact max-pool ties all over the value recurrence)
            biases.append(rng.normal(0.0, 0.01, size=fan_out))
    return CapabilityNet(sizes, weights, biases, n_actions, kernel_size)


def _mlp_forward(net: CapabilityNet, x: np.ndarray):
    """Logits plus the activation cache needed for the backward pass."""
    acts = [x]
    pres = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pres.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    return h, (acts, pres)


def _mlp_backward(net: CapabilityNet, cache, d_logits: np.ndarray):
    """Gradients of the parameters given d(loss)/d(logits)."""
    acts, pres = cache
    n = len(net.weights)
    g_w = [None] * n
    g_b = [None] * n
    g = d_logits
    for i in range(n - 1, -1, -1):
        g_w[i] = acts[i].T @ g
        g_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.weights[i].T) * (pres[i - 1] > 0.0)
    return g_w, g_b


def _slice_softmax(logits: np.ndarray, n_actions: int, f2: int) -> np.ndarray:
    """Per-action softmax over the F^2 window positions. (B, A, F^2)."""
    z = logits.reshape(logits.shape[0], n_actions, f2)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def _slice_softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) for the per-slice softmax, flattened to (B, A*F^2)."""
    inner = (d_probs * probs).sum(axis=2, keepdims=True)
    dz = probs * (d_probs - inner)
    return dz.reshape(dz.shape[0], -1)


def forward_batch(net: CapabilityNet, patches: np.ndarray):
    """Kernel stacks for a batch of flattened patches: (B, A, F^2) plus cache."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != net.layer_sizes[0]:
        raise ValueError(
            f"patch batch must be (B, {net.layer_sizes[0]}), got {patches.shape}"
        )
    logits, cache = _mlp_forward(net, patches)
    probs = _slice_softmax(logits, net.n_actions, net.layer_sizes[0])
    return probs, cache


def forward(net: CapabilityNet, patch: np.ndarray) -> np.ndarray:
    """Per-action next-state distributions for one patch: (|A|, F, F)."""
    f = net.kernel_size
    flat = np.asarray(patch, dtype=np.float64).reshape(-1)
    if flat.size != f * f:
        raise ValueError(f"patch must hold {f * f} values, got {flat.size}")
    probs, _ = forward_batch(net, flat[None, :])
    return probs[0].reshape(net.n_actions, f, f)


@dataclass
class AdamState:
    """Adam optimizer state mirroring the net parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)


def adam_init(net: CapabilityNet, lr: float = 1e-3, **kw) -> AdamState:
    state = AdamState(lr=lr, **kw)
    state.m_w = [np.zeros_like(w) for w in net.weights]
    state.v_w = [np.zeros_like(w) for w in net.weights]
    state.m_b = [np.zeros_like(b) for b in net.biases]
    state.v_b = [np.zeros_like(b) for b in net.biases]
    return state


def adam_step(net: CapabilityNet, state: AdamState, g_w, g_b) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    corr1 = 1.0 - state.beta1**state.t
    corr2 = 1.0 - state.beta2**state.t
    for i in range(len(net.weights)):
        for p, g, mm, vv in (
            (net.weights[i], g_w[i], state.m_w[i], state.v_w[i]),
            (net.biases[i], g_b[i], state.m_b[i], state.v_b[i]),
        ):
            mm *= state.beta1
            mm += (1.0 - state.beta1) * g
            vv *= state.beta2
            vv += (1.0 - state.beta2) * g * g
            p -= state.lr * (mm / corr1) / (np.sqrt(vv / corr2) + state.eps)


@dataclass(frozen=True)
class CapSample:
    """One supervised example: patch, attempted action, observed next cell.

    ``label`` is a one-hot F^2 vector marking the offset of the next state
    inside the patch window (the center when the move was blocked).
    """

    patch: np.ndarray
    action: int
    label: np.ndarray
    terrain: bool = False


def one_hot_label(offset: tuple[int, int], f: int) -> np.ndarray:
    half = f // 2
    dr, dc = offset
    if abs(dr) > half or abs(dc) > half:
        raise ValueError(f"offset {offset} outside the {f}x{f} window")
    y = np.zeros(f * f)
    y[(dr + half) * f + (dc + half)] = 1.0
    return y


def collect_samples(
    maps: list[WorldMap],
    n_episodes: int,
    episode_len: int,
    rng_seed: int,
    f: int = 3,
) -> list[CapSample]:
    """Random-policy rollouts; every step becomes one (patch, action, label).

    ``n_episodes`` episodes per map, each ``episode_len`` steps from a random
    traversable start. Blocked moves label the window center.
    """
    if not maps:
        raise ValueError("need at least one map")
    rng = np.random.default_rng(rng_seed)
    samples: list[CapSample] = []
    for world in maps:
        trav = np.argwhere(world.traversable_mask())
        if len(trav) == 0:
            raise ValueError("map has no traversable cells")
        for _ in range(n_episodes):
            r, c = trav[rng.integers(len(trav))]
            s = (int(r), int(c))
            for _ in range(episode_len):
                a = int(rng.integers(N_ACTIONS))
                patch = extract_patch(world, s, f)
                nxt = step(world, s, Action(a))
                label = one_hot_label((nxt[0] - s[0], nxt[1] - s[1]), f)
                samples.append(
                    CapSample(
                        patch=patch.values.reshape(-1),
                        action=a,
                        label=label,
                        terrain=world.is_terrain,
                    )
                )
                s = nxt
    return samples


def kernel_mse(pred: np.ndarray, label: np.ndarray) -> float:
    """Mean over the batch of (1/F^2) * sum of squared errors on one slice."""
    pred = np.atleast_2d(pred)
    label = np.atleast_2d(label)
    f2 = pred.shape[1]
    return float(((pred - label) ** 2).sum(axis=1).mean() / f2)


def curriculum_order(
    samples: list[CapSample], delta_h_star: float, rng_seed: int = 0
) -> list[list[CapSample]]:
    """Difficulty bins for terrain samples, emitted easy -> hard.

    A sample is hard when some height gap in its patch sits close to the
    traversability threshold; the score is min over patch entries of
    ``abs(abs(gap) - delta_h_star)``. Bin edges are fixed fractions of the
    threshold. Non-terrain samples pass through as a single bin.
    """
    if not samples:
        return []
    if not any(s.terrain for s in samples):
        return [list(samples)]
    edges = np.array([0.6, 0.3, 0.1]) * delta_h_star
    bins: list[list[CapSample]] = [[] for _ in range(len(edges) + 1)]
    for s in samples:
        if not s.terrain:
            bins[0].append(s)
            continue
        score = np.abs(np.abs(s.patch) - delta_h_star).min()
        bins[int(np.searchsorted(-edges, -score, side="left"))].append(s)
    rng = np.random.default_rng(rng_seed)
    out = []
    for b in bins:
        idx = rng.permutation(len(b))
        out.append([b[i] for i in idx])
    return out


# Repetition factor per difficulty bin (easy -> hard). Hard samples sit near
# the traversability threshold and need the extra gradient weight.
CURRICULUM_WEIGHTS = (1, 1, 2, 4)


def _curriculum_index_pool(bin_sizes: list[int]) -> np.ndarray:
    """Sample indices with hard bins repeated per CURRICULUM_WEIGHTS."""
    pool = []
    start = 0
    for j, size in enumerate(bin_sizes):
        weight = CURRICULUM_WEIGHTS[min(j, len(CURRICULUM_WEIGHTS) - 1)]
        idx = np.arange(start, start + size)
        pool.extend([idx] * weight)
        start += size
    return np.concatenate(pool) if pool else np.arange(0)


def train_supervised(
    net: CapabilityNet,
    samples: list[CapSample],
    epochs: int,
    adam: AdamState,
    batch_size: int = 64,
    rng_seed: int = 0,
    curriculum_bins: list[list[CapSample]] | None = None,
) -> list[float]:
    """Minibatch MSE training of the capability net; returns per-epoch loss.

    With ``curriculum_bins`` every epoch shuffles a pool in which harder
    bins appear multiple times (CURRICULUM_WEIGHTS), concentrating gradient
    weight near the traversability threshold; otherwise samples are fully
    shuffled every epoch. Training is deterministic given the seed.
    Per-epoch losses are averaged over the samples visited that epoch.
    """
    if curriculum_bins is not None:
        samples = [s for b in curriculum_bins for s in b]
        pool = _curriculum_index_pool([len(b) for b in curriculum_bins])
    else:
        pool = None
    if not samples:
        raise ValueError("no training samples")
    f2 = net.layer_sizes[0]
    x = np.stack([s.patch for s in samples])
    actions = np.array([s.action for s in samples])
    y = np.stack([s.label for s in samples])
    rng = np.random.default_rng(rng_seed)
    n = len(samples)
    losses = []
    rows = np.arange(batch_size)
    for epoch in range(epochs):
        order = rng.permutation(n) if pool is None else pool[rng.permutation(len(pool))]
        total = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            xb, ab, yb = x[idx], actions[idx], y[idx]
            probs, cache = forward_batch(net, xb)
            pred = probs[rows[: len(idx)], ab]
            loss = kernel_mse(pred, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"MSE loss became {loss}")
            total += loss * len(idx)
            d_probs = np.zeros_like(probs)
            d_probs[rows[: len(idx)], ab] = (2.0 / (f2 * len(idx))) * (pred - yb)
            d_logits = _slice_softmax_backward(probs, d_probs)
            g_w, g_b = _mlp_backward(net, cache, d_logits)
            adam_step(net, adam, g_w, g_b)
        losses.append(total / len(order))
    return losses


# Fractions of the epoch budget and learning-rate multipliers for the phased
# schedule: a long exploration phase, then progressively finer steps to
# sharpen decision boundaries.
LR_PHASES = ((0.40, 1.0), (0.25, 0.3), (0.20, 0.1), (0.15, 0.03))


def train_supervised_schedule(
    net: CapabilityNet,
    samples: list[CapSample],
    epochs: int,
    adam: AdamState,
    batch_size: int = 64,
    rng_seed: int = 0,
    curriculum_bins: list[list[CapSample]] | None = None,
    phases=LR_PHASES,
) -> list[float]:
    """``train_supervised`` run in phases with a decaying learning rate.

    The epoch budget is split across ``phases``; adam.lr is restored on
    return. This is the production recipe for terrain capability training,
    where the last phases do the boundary sharpening.
    """
    base_lr = adam.lr
    losses: list[float] = []
    remaining = epochs
    try:
        for i, (frac, mult) in enumerate(phases):
            if remaining <= 0:
                break
            if i == len(phases) - 1:
                ep = remaining
            else:
                ep = min(remaining, max(1, int(round(epochs * frac))))
            remaining -= ep
            adam.lr = base_lr * mult
            losses += train_supervised(
                net, samples, ep, adam, batch_size, rng_seed + i, curriculum_bins
            )
    finally:
        adam.lr = base_lr
    return losses


def flatten_params(net: CapabilityNet) -> np.ndarray:
    """All parameters as one vector (weights then bias per layer, in order)."""
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def assign_params(net: CapabilityNet, vec: np.ndarray) -> None:
    pos = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = vec[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        b[...] = vec[pos : pos + b.size]
        pos += b.size
    if pos != vec.size:
        raise ValueError(f"parameter vector length {vec.size} != {pos}")


def save_net(net: CapabilityNet, path) -> None:
    """Versioned binary dump: magic, int64 header, float64 row-major params."""
    header = np.array(
        [net.n_actions, net.kernel_size, len(net.layer_sizes)] + net.layer_sizes,
        dtype="<i8",
    )
    with open(path, "wb") as fh:
        fh.write(NET_MAGIC)
        fh.write(header.tobytes())
        fh.write(flatten_params(net).astype("<f8").tobytes())


def load_net(path) -> CapabilityNet:
    with open(path, "rb") as fh:
        magic = fh.read(len(NET_MAGIC))
        if magic != NET_MAGIC:
            raise ValueError(f"bad model magic {magic!r}")
        fixed = np.frombuffer(fh.read(3 * 8), dtype="<i8")
        n_actions, kernel_size, n_sizes = (int(v) for v in fixed)
        sizes = [int(v) for v in np.frombuffer(fh.read(n_sizes * 8), dtype="<i8")]
        flat = np.frombuffer(fh.read(), dtype="<f8")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(np.empty((fan_in, fan_out)))
        biases.append(np.empty(fan_out))
    net = CapabilityNet(sizes, weights, biases, n_actions, kernel_size)
    assign_params(net, flat.copy())
    return net
