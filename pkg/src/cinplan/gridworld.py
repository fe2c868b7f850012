"""Grid worlds and the ground-truth motion model.

Two map kinds share one container: binary occupancy mazes (0 = obstacle,
1 = free) and real-valued height fields where a move is legal only if the
height difference to the target cell is at most ``delta_h_star``. Everything
downstream (oracle, planner, sample collection) goes through ``step`` so the
motion rules live in exactly one place.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

OCCUPANCY = "occupancy2d"
TERRAIN = "terrain3d"

MAP_MAGIC = "CINMAP"
MAP_VERSION = "v1"

State = tuple[int, int]


class Action(IntEnum):
    """Eight compass moves, enumerated clockwise from north.

    The enumeration order is the tie-breaking order everywhere: argmax over
    actions always resolves ties toward the lowest index.
    """

    N = 0
    NE = 1
    E = 2
    SE = 3
    S = 4
    SW = 5
    W = 6
    NW = 7


ACTION_OFFSETS = np.array(
    [[-1, 0], [-1, 1], [0, 1], [1, 1], [1, 0], [1, -1], [0, -1], [-1, -1]],
    dtype=np.int64,
)
ACTION_OFFSETS.setflags(write=False)
N_ACTIONS = len(Action)

# Out-of-grid padding for terrain patches, expressed as a relative height:
# far beyond any traversable step, so the boundary reads as a wall.
PAD_HEIGHT_FACTOR = 10.0


@dataclass(frozen=True)
class WorldMap:
    """Immutable square map. ``cells`` is m x m float64, read-only."""

    kind: str
    cells: np.ndarray
    delta_h_star: float = 0.0

    def __post_init__(self):
        if self.kind not in (OCCUPANCY, TERRAIN):
            raise ValueError(f"unknown map kind {self.kind!r}")
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
            raise ValueError(f"cells must be square, got shape {cells.shape}")
        if cells.shape[0] < 3:
            raise ValueError(f"map side must be >= 3, got {cells.shape[0]}")
        if not np.all(np.isfinite(cells)):
            raise ValueError("cells must be finite")
        if self.kind == OCCUPANCY:
            if not np.all((cells == 0.0) | (cells == 1.0)):
                raise ValueError("occupancy cells must be exactly 0 or 1")
        else:
            if not self.delta_h_star > 0.0:
                raise ValueError("terrain maps need delta_h_star > 0")
        cells = cells.copy()
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def m(self) -> int:
        return self.cells.shape[0]

    @property
    def is_terrain(self) -> bool:
        return self.kind == TERRAIN

    def in_bounds(self, s: State) -> bool:
        r, c = s
        return 0 <= r < self.m and 0 <= c < self.m

    def traversable(self, s: State) -> bool:
        """Whether ``s`` is a valid location: free in 2D, any cell in 3D."""
        if not self.in_bounds(s):
            return False
        return self.is_terrain or self.cells[s] == 1.0

    def traversable_mask(self) -> np.ndarray:
        if self.is_terrain:
            return np.ones((self.m, self.m), dtype=bool)
        return self.cells == 1.0


@dataclass(frozen=True)
class LocalPatch:
    """F x F window of map values centered on a state.

    For terrain maps the values are height differences relative to the center
    cell, so the patch carries no absolute elevation.
    """

    center: State
    size: int
    values: np.ndarray


def step(world: WorldMap, s: State, a: Action) -> State:
    """Deterministic one-step dynamics; illegal moves stay in place."""
    if not world.in_bounds(s):
        raise ValueError(f"state {s} out of bounds for m={world.m}")
    if not world.traversable(s):
        raise ValueError(f"state {s} is not traversable")
    dr, dc = ACTION_OFFSETS[int(a)]
    t = (s[0] + int(dr), s[1] + int(dc))
    if not world.in_bounds(t):
        return s
    if world.is_terrain:
        if abs(world.cells[t] - world.cells[s]) <= world.delta_h_star:
            return t
        return s
    if world.cells[t] == 1.0:
        return t
    return s


def next_state_table(world: WorldMap) -> np.ndarray:
    """Flat index of step(s, a) for every cell, shape (|A|, m*m).

    Non-traversable cells map to themselves for every action, which keeps the
    table total and makes obstacle rows inert in value iteration.
    """
    m = world.m
    rows, cols = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    self_idx = (rows * m + cols).ravel()
    table = np.empty((N_ACTIONS, m * m), dtype=np.int64)
    trav = world.traversable_mask()
    for a in range(N_ACTIONS):
        tr = rows + ACTION_OFFSETS[a, 0]
        tc = cols + ACTION_OFFSETS[a, 1]
        inb = (tr >= 0) & (tr < m) & (tc >= 0) & (tc < m)
        trc = np.clip(tr, 0, m - 1)
        tcc = np.clip(tc, 0, m - 1)
        if world.is_terrain:
            ok = inb & (np.abs(world.cells[trc, tcc] - world.cells) <= world.delta_h_star)
        else:
            ok = inb & (world.cells[trc, tcc] == 1.0)
        ok &= trav
        tgt = np.where(ok, trc * m + tcc, rows * m + cols)
        table[a] = tgt.ravel()
    table[:, ~trav.ravel()] = self_idx[~trav.ravel()]
    return table


def extract_patch(world: WorldMap, s: State, f: int) -> LocalPatch:
    """F x F window centered at ``s``, padded past the map edge.

    2D padding is 0 (obstacle); 3D padding is a sentinel relative height of
    ``PAD_HEIGHT_FACTOR * delta_h_star``, unreachable by construction.
    """
    if f % 2 == 0 or f < 1:
        raise ValueError(f"kernel size must be odd and positive, got {f}")
    if not world.in_bounds(s):
        raise ValueError(f"state {s} out of bounds for m={world.m}")
    m, half = world.m, f // 2
    if world.is_terrain:
        pad = PAD_HEIGHT_FACTOR * world.delta_h_star
    else:
        pad = 0.0
    values = np.full((f, f), pad, dtype=np.float64)
    r0, c0 = s[0] - half, s[1] - half
    sr0, sc0 = max(r0, 0), max(c0, 0)
    sr1, sc1 = min(r0 + f, m), min(c0 + f, m)
    values[sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = world.cells[sr0:sr1, sc0:sc1]
    if world.is_terrain:
        inside = np.zeros((f, f), dtype=bool)
        inside[sr0 - r0 : sr1 - r0, sc0 - c0 : sc1 - c0] = True
        values[inside] -= world.cells[s]
    return LocalPatch(center=(int(s[0]), int(s[1])), size=f, values=values)


def all_patches(world: WorldMap, f: int) -> np.ndarray:
    """Flattened patches for every cell, shape (m*m, f*f), row-major states."""
    if f % 2 == 0 or f < 1:
        raise ValueError(f"kernel size must be odd and positive, got {f}")
    m, half = world.m, f // 2
    if world.is_terrain:
        padded = np.pad(world.cells, half, constant_values=np.nan)
        windows = np.lib.stride_tricks.sliding_window_view(padded, (f, f))
        rel = windows - world.cells[:, :, None, None]
        rel = np.where(np.isnan(rel), PAD_HEIGHT_FACTOR * world.delta_h_star, rel)
        return rel.reshape(m * m, f * f)
    padded = np.pad(world.cells, half, constant_values=0.0)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (f, f))
    return windows.reshape(m * m, f * f).copy()


def true_kernel(world: WorldMap, s: State, f: int = 3) -> np.ndarray:
    """Ground-truth one-hot next-state distributions, shape (|A|, f, f)."""
    if f % 2 == 0 or f < 1:
        raise ValueError(f"kernel size must be odd and positive, got {f}")
    if not world.traversable(s):
        raise ValueError(f"state {s} is not traversable")
    half = f // 2
    kernels = np.zeros((N_ACTIONS, f, f), dtype=np.float64)
    for a in range(N_ACTIONS):
        t = step(world, s, Action(a))
        dr, dc = t[0] - s[0], t[1] - s[1]
        if abs(dr) > half or abs(dc) > half:
            raise AssertionError("step target escaped the kernel window")
        kernels[a, dr + half, dc + half] = 1.0
    return kernels


def generate_maze(m: int, rng_seed: int) -> WorldMap:
    """Occupancy maze via iterative depth-first search with backtracking.

    Corridors are carved on the even-index lattice, so every free cell is
    connected to every other under 4-moves (and hence 8-moves). Deterministic
    for a given seed.
    """
    if m < 3:
        raise ValueError(f"maze side must be >= 3, got {m}")
    rng = np.random.default_rng(rng_seed)
    grid = np.zeros((m, m), dtype=np.float64)
    n_lat = (m + 1) // 2
    start = (int(rng.integers(n_lat)), int(rng.integers(n_lat)))
    grid[2 * start[0], 2 * start[1]] = 1.0
    visited = {start}
    stack = [start]
    while stack:
        cr, cc = stack[-1]
        options = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nr, nc = cr + dr, cc + dc
            if 0 <= nr < n_lat and 0 <= nc < n_lat and (nr, nc) not in visited:
                options.append((nr, nc))
        if not options:
            stack.pop()
            continue
        nr, nc = options[rng.integers(len(options))]
        grid[cr + nr, cc + nc] = 1.0  # wall cell between the two lattice cells
        grid[2 * nr, 2 * nc] = 1.0
        visited.add((nr, nc))
        stack.append((nr, nc))
    return WorldMap(kind=OCCUPANCY, cells=grid)


def _bilinear_upsample(lattice: np.ndarray, m: int) -> np.ndarray:
    """Resize a small square lattice to m x m by bilinear interpolation."""
    c = lattice.shape[0]
    pos = np.linspace(0.0, c - 1.0, m)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, c - 2)
    frac = pos - i0
    rows = lattice[i0, :] * (1.0 - frac)[:, None] + lattice[i0 + 1, :] * frac[:, None]
    out = rows[:, i0] * (1.0 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return out


def generate_terrain(
    m: int, roughness: float, rng_seed: int, delta_h_star: float = 0.25
) -> WorldMap:
    """Height field in [0, 1] from two octaves of smoothed value noise.

    ``roughness`` controls the feature density: higher values put more noise
    lattice points per map side, giving steeper cell-to-cell gradients. The
    field is min-max normalized then passed through a smoothstep to steepen
    mid-range slopes, so maps contain both easy steps and genuine walls
    relative to a threshold like 0.25.
    """
    if m < 3:
        raise ValueError(f"terrain side must be >= 3, got {m}")
    if not (0.0 < roughness <= 1.0):
        raise ValueError(f"roughness must be in (0, 1], got {roughness}")
    if not delta_h_star > 0.0:
        raise ValueError("delta_h_star must be positive")
    rng = np.random.default_rng(rng_seed)
    c1 = max(2, 2 + int(round(roughness * m / 3.0)))
    c2 = min(m, 2 * c1)
    h = _bilinear_upsample(rng.uniform(size=(c1, c1)), m)
    h = h + 0.45 * _bilinear_upsample(rng.uniform(size=(c2, c2)), m)
    lo, hi = h.min(), h.max()
    h = (h - lo) / (hi - lo) if hi > lo else np.zeros_like(h)
    h = h * h * (3.0 - 2.0 * h)
    return WorldMap(kind=TERRAIN, cells=h, delta_h_star=float(delta_h_star))


def _format_cell(world: WorldMap, v: float) -> str:
    if world.is_terrain:
        return f"{v:.17g}"
    return str(int(v))


def dumps_map(world: WorldMap) -> str:
    """Serialize to the text format: header line, then m rows of m values."""
    delta = f"{world.delta_h_star:.17g}" if world.is_terrain else "0"
    lines = [f"{MAP_MAGIC} {MAP_VERSION} {world.kind} {world.m} {delta}"]
    for row in world.cells:
        lines.append(" ".join(_format_cell(world, v) for v in row))
    return "\n".join(lines) + "\n"


def loads_map(text: str) -> WorldMap:
    lines = text.strip().splitlines()
    if not lines:
        raise ValueError("empty map file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != MAP_MAGIC:
        raise ValueError(f"bad map header: {lines[0]!r}")
    if header[1] != MAP_VERSION:
        raise ValueError(f"unsupported map version {header[1]!r}")
    kind, m, delta = header[2], int(header[3]), float(header[4])
    if len(lines) != m + 1:
        raise ValueError(f"expected {m} rows, got {len(lines) - 1}")
    cells = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    if cells.shape != (m, m):
        raise ValueError(f"expected {m}x{m} cells, got {cells.shape}")
    return WorldMap(kind=kind, cells=cells, delta_h_star=delta)


def save_map(world: WorldMap, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_map(world))


def load_map(path) -> WorldMap:
    with open(path) as fh:
        return loads_map(fh.read())
