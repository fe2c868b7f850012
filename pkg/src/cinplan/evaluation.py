"""Dataset generation and the %Optimal / %Success / %Error protocol.

Metrics are micro-averaged over every traversable state that can reach the
goal, across all maps of a split: %Suc counts greedy rollouts that arrive,
%Opt those that arrive in exactly the BFS-shortest number of steps, and
%Err the states where the planner's first greedy action differs from the
oracle expert's.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import planner
from .capability import CapabilityNet
from .gridworld import (
    OCCUPANCY,
    TERRAIN,
    State,
    WorldMap,
    generate_maze,
    generate_terrain,
    load_map,
    save_map,
)
from .oracle import OracleSolution, solve_exact

SPLITS = ("train", "val", "test")
_MAX_GOAL_RETRIES = 50


@dataclass
class SplitData:
    """Maps, one goal each, and the cached oracle solutions for one split."""

    maps: list[WorldMap]
    goals: list[State]
    oracles: list[OracleSolution]

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class Dataset:
    kind: str
    m: int
    seed: int
    counts: tuple[int, int, int]
    splits: dict[str, SplitData]
    delta_h_star: float = 0.0
    roughness: float = 0.5

    @property
    def train(self) -> SplitData:
        return self.splits["train"]

    @property
    def val(self) -> SplitData:
        return self.splits["val"]

    @property
    def test(self) -> SplitData:
        return self.splits["test"]


@dataclass
class EvalReport:
    """Aggregate percentages (already rounded to one decimal, as reported)
    plus per-map counts and the configuration that produced them."""

    pct_opt: float
    pct_suc: float
    pct_err: float
    per_map: list[dict]
    config: dict

    def __post_init__(self):
        if not self.pct_opt <= self.pct_suc:
            raise ValueError(
                f"%Opt={self.pct_opt} exceeds %Suc={self.pct_suc}: impossible report"
            )


def _solve_with_goal(world: WorldMap, rng: np.random.Generator, hp) -> tuple[State, OracleSolution] | None:
    """Pick a uniformly random traversable goal that at least one other cell
    can reach; None if no such goal exists on this map."""
    trav = np.argwhere(world.traversable_mask())
    for _ in range(_MAX_GOAL_RETRIES):
        r, c = trav[rng.integers(len(trav))]
        goal = (int(r), int(c))
        sol = solve_exact(world, goal, hp)
        reachable = np.isfinite(sol.dist).sum()
        if reachable >= 2:  # the goal itself plus at least one other cell
            return goal, sol
    return None


def generate_dataset(
    m: int,
    counts: tuple[int, int, int],
    kind: str = OCCUPANCY,
    seed: int = 0,
    delta_h_star: float = 0.25,
    roughness: float = 0.5,
) -> Dataset:
    """Seeded train/val/test maps with one random goal and an oracle each.

    Per-map generator seeds are spawned from the dataset seed, with the three
    splits occupying disjoint index ranges, so splits never share a map.
    """
    n_tr, n_val, n_te = counts
    if min(counts) < 0 or max(counts) == 0:
        raise ValueError(f"bad split counts {counts}")
    if kind not in (OCCUPANCY, TERRAIN):
        raise ValueError(f"unknown dataset kind {kind!r}")
    root = np.random.SeedSequence(seed)
    hp = planner.default_hyperparams(m)
    splits: dict[str, SplitData] = {}
    for name, count in zip(SPLITS, counts):
        maps, goals, oracles = [], [], []
        while len(maps) < count:
            # spawn() advances the root sequence, so every map (and every
            # retry) draws a fresh, reproducible generator seed
            gen_seed = int(root.spawn(1)[0].generate_state(1)[0])
            if kind == OCCUPANCY:
                world = generate_maze(m, gen_seed)
            else:
                world = generate_terrain(m, roughness, gen_seed, delta_h_star)
            rng = np.random.default_rng(gen_seed + 1)
            picked = _solve_with_goal(world, rng, hp)
            if picked is None:
                continue  # disconnected map: retry with the next seed
            goal, sol = picked
            maps.append(world)
            goals.append(goal)
            oracles.append(sol)
        splits[name] = SplitData(maps, goals, oracles)
    return Dataset(
        kind=kind,
        m=m,
        seed=seed,
        counts=tuple(counts),
        splits=splits,
        delta_h_star=delta_h_star if kind == TERRAIN else 0.0,
        roughness=roughness if kind == TERRAIN else 0.0,
    )


def _eval_one_map(world, goal, sol, net, hp):
    """Per-map tallies: (n_states, n_suc, n_opt, n_err)."""
    if net is None:
        kernels = planner.true_kernel_field(world, hp.kernel_size)
    else:
        kernels = planner.build_kernel_field(world, net, hp.kernel_size)
    reward = planner.sparse_reward(world, goal, hp)
    q, _ = planner.vi_forward(kernels, reward, hp)
    starts = np.argwhere(world.traversable_mask() & np.isfinite(sol.dist))
    n = n_suc = n_opt = n_err = 0
    for r, c in starts:
        s = (int(r), int(c))
        n += 1
        if planner.greedy_action(q, s) != int(sol.policy[s]):
            n_err += 1
        roll = planner.rollout_greedy(world, q, goal, s, hp.max_steps)
        if roll.status == planner.REACHED:
            n_suc += 1
            if roll.steps == int(sol.dist[s]):
                n_opt += 1
    return n, n_suc, n_opt, n_err


def evaluate(
    net: CapabilityNet | None,
    split: SplitData,
    hp: planner.HyperParams,
    config: dict | None = None,
    jobs: int = 1,
) -> EvalReport:
    """Score a planner over every reachable state of every map in a split.

    ``net=None`` evaluates the ground-truth-kernel planner (the expert).
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    tallies = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_eval_one_map, w, g, sol, net, hp)
                for w, g, sol in zip(split.maps, split.goals, split.oracles)
            ]
            tallies = [f.result() for f in futures]
    else:
        for w, g, sol in zip(split.maps, split.goals, split.oracles):
            tallies.append(_eval_one_map(w, g, sol, net, hp))
    per_map = []
    for i, (n, n_suc, n_opt, n_err) in enumerate(tallies):
        per_map.append(
            {"map": i, "states": n, "success": n_suc, "optimal": n_opt, "errors": n_err}
        )
    total = sum(t[0] for t in tallies)
    suc = sum(t[1] for t in tallies)
    opt = sum(t[2] for t in tallies)
    err = sum(t[3] for t in tallies)
    cfg = {
        "n_maps": len(split),
        "gamma": hp.gamma,
        "k_iters": hp.k_iters,
        "kernel_size": hp.kernel_size,
        "r_p": hp.r_p,
        "r_n": hp.r_n,
    }
    cfg.update(config or {})
    return EvalReport(
        pct_opt=round(100.0 * opt / total, 1),
        pct_suc=round(100.0 * suc / total, 1),
        pct_err=round(100.0 * err / total, 1),
        per_map=per_map,
        config=cfg,
    )


def emit_report(report: EvalReport, base_path) -> tuple[Path, Path]:
    """Write ``<base>.csv`` (per-map rows) and ``<base>.json`` (everything).

    Percentages carry one decimal, matching how results are reported.
    """
    base = Path(base_path)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["map", "states", "success", "optimal", "errors"])
        for row in report.per_map:
            writer.writerow(
                [row["map"], row["states"], row["success"], row["optimal"], row["errors"]]
            )
        writer.writerow([])
        writer.writerow(["pct_opt", f"{report.pct_opt:.1f}"])
        writer.writerow(["pct_suc", f"{report.pct_suc:.1f}"])
        writer.writerow(["pct_err", f"{report.pct_err:.1f}"])
    payload = {
        "pct_opt": round(report.pct_opt, 1),
        "pct_suc": round(report.pct_suc, 1),
        "pct_err": round(report.pct_err, 1),
        "per_map": report.per_map,
        "config": report.config,
    }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def load_report(base_path) -> EvalReport:
    base = Path(base_path)
    with open(base.with_suffix(".json")) as fh:
        payload = json.load(fh)
    return EvalReport(
        pct_opt=payload["pct_opt"],
        pct_suc=payload["pct_suc"],
        pct_err=payload["pct_err"],
        per_map=payload["per_map"],
        config=payload["config"],
    )


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Directory layout: maps/<split>/<idx>.cinmap, goals.csv, meta.json."""
    out = Path(out_dir)
    for name in SPLITS:
        (out / "maps" / name).mkdir(parents=True, exist_ok=True)
    with open(out / "goals.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "idx", "row", "col"])
        for name in SPLITS:
            split = dataset.splits[name]
            for i, (world, goal) in enumerate(zip(split.maps, split.goals)):
                save_map(world, out / "maps" / name / f"{i:04d}.cinmap")
                writer.writerow([name, i, goal[0], goal[1]])
    meta = {
        "kind": dataset.kind,
        "m": dataset.m,
        "seed": dataset.seed,
        "counts": list(dataset.counts),
        "delta_h_star": dataset.delta_h_star,
        "roughness": dataset.roughness,
        "format": "cindata v1",
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir, splits: tuple[str, ...] = SPLITS, solve: bool = True) -> Dataset:
    """Load maps and goals back; oracles are re-solved unless ``solve=False``
    (they are deterministic functions of map and goal, so nothing is lost)."""
    root = Path(in_dir)
    with open(root / "meta.json") as fh:
        meta = json.load(fh)
    goals: dict[str, dict[int, State]] = {name: {} for name in SPLITS}
    with open(root / "goals.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            goals[row["split"]][int(row["idx"])] = (int(row["row"]), int(row["col"]))
    hp = planner.default_hyperparams(meta["m"])
    out_splits: dict[str, SplitData] = {}
    for name in SPLITS:
        maps_dir = root / "maps" / name
        split_maps, split_goals, split_oracles = [], [], []
        if name in splits and maps_dir.exists():
            for i in sorted(goals[name]):
                world = load_map(maps_dir / f"{i:04d}.cinmap")
                goal = goals[name][i]
                split_maps.append(world)
                split_goals.append(goal)
                if solve:
                    split_oracles.append(solve_exact(world, goal, hp))
        out_splits[name] = SplitData(split_maps, split_goals, split_oracles)
    return Dataset(
        kind=meta["kind"],
        m=meta["m"],
        seed=meta["seed"],
        counts=tuple(meta["counts"]),
        splits=out_splits,
        delta_h_star=meta.get("delta_h_star", 0.0),
        roughness=meta.get("roughness", 0.0),
    )
