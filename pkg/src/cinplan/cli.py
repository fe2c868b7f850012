"""Command-line entry point wiring the whole pipeline.

Subcommands: gen-maps, train-cap, train-e2e, plan, eval, dump-maps. Every
subcommand is reproducible given --seed (or the CIN_SEED environment
variable); flag values beat config-file values beat built-in defaults.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import capability, e2e, evaluation, planner
from .gridworld import OCCUPANCY, TERRAIN, load_map
from .oracle import expert_action


def _parse_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, val = line.split("=", 1)
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: cannot parse {raw.rstrip()!r}")
                key, val = parts
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _parse_state(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected 'row,col', got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _default_seed() -> int:
    env = os.environ.get("CIN_SEED")
    return int(env) if env else 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file (flags win)")
    p.add_argument("--seed", type=int, default=None, help="master RNG seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")


def _add_planning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--k-iters", type=int, default=0, help="0 = 3*m (10*m with --exact)")
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--rp", type=float, default=10.0, help="goal reward")
    p.add_argument("--rn", type=float, default=-0.5, help="living cost")
    p.add_argument("--exact", action="store_true", help="use exactness-grade K")


def _hyperparams(args, m: int) -> planner.HyperParams:
    k = args.k_iters if args.k_iters > 0 else (10 if args.exact else 3) * m
    return planner.HyperParams(
        gamma=args.gamma,
        k_iters=k,
        kernel_size=args.kernel_size,
        r_p=args.rp,
        r_n=args.rn,
        max_steps=m * m,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cinplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-maps", help="generate a train/val/test map dataset")
    _add_common(p)
    p.add_argument("--kind", choices=["2d", "3d"], default="2d")
    p.add_argument("--m", type=int, required=True)
    # desk-scale defaults; pass 10000/1000/1000 for the full-scale protocol
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--delta-h-star", type=float, default=0.25)
    p.add_argument("--roughness", type=float, default=0.5)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train-cap", help="train the capability module alone")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--episodes", type=int, default=6, help="episodes per map")
    p.add_argument("--episode-len", type=int, default=10)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument(
        "--curriculum",
        choices=["auto", "on", "off"],
        default="auto",
        help="easy-to-hard sample ordering (auto: on for terrain)",
    )
    p.add_argument("--out", required=True, help="model file (.cinnet)")
    p.add_argument("--log", help="training-log CSV")

    p = sub.add_parser("train-e2e", help="train end-to-end by imitation")
    _add_common(p)
    _add_planning(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=96)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.94, help="per-epoch factor")
    p.add_argument("--lr-decay-start", type=int, default=12)
    p.add_argument("--param-avg", type=float, default=0.985, help="Polyak EMA decay, 0 disables")
    p.add_argument("--queries-per-map", type=int, default=3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--out", required=True, help="model file (.cinnet)")
    p.add_argument("--log", help="training-log CSV")

    p = sub.add_parser("plan", help="plan one query on one map")
    _add_common(p)
    _add_planning(p)
    p.add_argument("--map", required=True)
    p.add_argument("--start", required=True, help="row,col")
    p.add_argument("--goal", required=True, help="row,col")
    p.add_argument("--model", help="capability net; omit for true kernels")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="score a model over a dataset split")
    _add_common(p)
    _add_planning(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=list(evaluation.SPLITS), default="test")
    p.add_argument("--model", help="capability net; omit for true kernels")
    p.add_argument("--out", required=True, help="report base path (no extension)")

    p = sub.add_parser("dump-maps", help="dump value/Q/reward maps for one plan")
    _add_common(p)
    _add_planning(p)
    p.add_argument("--map", required=True)
    p.add_argument("--goal", required=True, help="row,col")
    p.add_argument("--model", help="capability net; omit for true kernels")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = _parse_config_file(args.config)
        sub = next(
            a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
        ).choices[args.command]
        known = {a.dest for a in sub._actions}
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        sub.set_defaults(**{k: _coerce(sub, k, v) for k, v in overrides.items()})
        args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None:
        args.seed = _default_seed()
    return args


def _coerce(sub: argparse.ArgumentParser, key: str, value: str):
    for action in sub._actions:
        if action.dest == key and action.type is not None:
            return action.type(value)
    return value


def _load_model_or_none(path: str | None):
    return capability.load_net(path) if path else None


def cmd_gen_maps(args) -> int:
    kind = OCCUPANCY if args.kind == "2d" else TERRAIN
    dataset = evaluation.generate_dataset(
        args.m,
        (args.train, args.val, args.test),
        kind=kind,
        seed=args.seed,
        delta_h_star=args.delta_h_star,
        roughness=args.roughness,
    )
    evaluation.save_dataset(dataset, args.out)
    total = sum(dataset.counts)
    print(f"wrote {total} maps ({args.kind}, m={args.m}) to {args.out}")
    return 0


def cmd_train_cap(args) -> int:
    dataset = evaluation.load_dataset(args.dataset, splits=("train",), solve=False)
    maps = dataset.train.maps
    samples = capability.collect_samples(
        maps, args.episodes, args.episode_len, rng_seed=args.seed, f=args.kernel_size
    )
    use_curriculum = args.curriculum == "on" or (
        args.curriculum == "auto" and dataset.kind == TERRAIN
    )
    bins = None
    if use_curriculum:
        bins = capability.curriculum_order(
            samples, dataset.delta_h_star or 0.25, rng_seed=args.seed
        )
    net = capability.init_net(
        kernel_size=args.kernel_size,
        hidden=args.hidden,
        depth=args.depth,
        rng_seed=args.seed,
    )
    adam = capability.adam_init(net, lr=args.lr)
    t0 = time.perf_counter()
    losses = capability.train_supervised_schedule(
        net,
        samples,
        epochs=args.epochs,
        adam=adam,
        batch_size=args.batch,
        rng_seed=args.seed,
        curriculum_bins=bins,
    )
    wall = (time.perf_counter() - t0) * 1000.0
    capability.save_net(net, args.out)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "pct_err", "wall_ms"])
            per_epoch = wall / max(len(losses), 1)
            for i, loss in enumerate(losses, 1):
                writer.writerow([i, f"{loss:.8f}", "", f"{per_epoch:.1f}"])
    print(
        f"trained on {len(samples)} samples for {args.epochs} epochs, "
        f"final loss {losses[-1]:.6f}, saved {args.out}"
    )
    return 0


def _il_samples(dataset, split_name: str, queries_per_map: int, seed: int):
    split = dataset.splits[split_name]
    rng = np.random.default_rng(seed)
    samples = []
    for world, goal, sol in zip(split.maps, split.goals, split.oracles):
        starts = np.argwhere(
            world.traversable_mask() & np.isfinite(sol.dist) & (sol.dist > 0)
        )
        if len(starts) == 0:
            continue
        picks = rng.choice(len(starts), size=min(queries_per_map, len(starts)), replace=False)
        for p in np.atleast_1d(picks):
            s = (int(starts[p][0]), int(starts[p][1]))
            samples.append(
                e2e.ILSample(world, goal, s, int(expert_action(sol, s)))
            )
    return samples


def cmd_train_e2e(args) -> int:
    dataset = evaluation.load_dataset(args.dataset, splits=("train",))
    hp = _hyperparams(args, dataset.m)
    samples = _il_samples(dataset, "train", args.queries_per_map, args.seed)
    net = capability.init_net(
        kernel_size=args.kernel_size, hidden=args.hidden, depth=args.depth, rng_seed=args.seed
    )
    adam = capability.adam_init(net, lr=args.lr)
    rows = e2e.train_e2e(
        net,
        samples,
        args.epochs,
        adam,
        hp,
        batch_size=args.batch,
        rng_seed=args.seed,
        lr_decay=args.lr_decay,
        lr_decay_start=args.lr_decay_start,
        param_avg=args.param_avg,
    )
    capability.save_net(net, args.out)
    if args.log:
        e2e.write_train_log(args.log, rows)
    print(
        f"imitation-trained on {len(samples)} samples; "
        f"%err {rows[0]['pct_err']:.1f} -> {rows[-1]['pct_err']:.1f}, saved {args.out}"
    )
    return 0


def cmd_plan(args) -> int:
    world = load_map(args.map)
    start = _parse_state(args.start)
    goal = _parse_state(args.goal)
    hp = _hyperparams(args, world.m)
    net = _load_model_or_none(args.model)
    result, roll = planner.plan(world, net, goal, start, hp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectory.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "row", "col"])
        for i, (r, c) in enumerate(roll.trajectory):
            writer.writerow([i, r, c])
    planner.save_matrix_text(out / "value.txt", result.v)
    print(
        f"status={roll.status} steps={roll.steps} chosen={result.chosen.name} "
        f"-> {out / 'trajectory.csv'}"
    )
    return 0 if roll.status == planner.REACHED else 3


def cmd_eval(args) -> int:
    dataset = evaluation.load_dataset(args.dataset, splits=(args.split,))
    hp = _hyperparams(args, dataset.m)
    net = _load_model_or_none(args.model)
    report = evaluation.evaluate(
        net,
        dataset.splits[args.split],
        hp,
        config={"m": dataset.m, "split": args.split, "dataset_seed": dataset.seed},
        jobs=args.jobs,
    )
    csv_path, json_path = evaluation.emit_report(report, args.out)
    print(
        f"%Opt {report.pct_opt:.1f}  %Suc {report.pct_suc:.1f}  "
        f"%Err {report.pct_err:.1f}  -> {json_path}"
    )
    return 0


def cmd_dump_maps(args) -> int:
    world = load_map(args.map)
    goal = _parse_state(args.goal)
    hp = _hyperparams(args, world.m)
    net = _load_model_or_none(args.model)
    reward = planner.sparse_reward(world, goal, hp)
    if net is None:
        kernels = planner.true_kernel_field(world, hp.kernel_size)
    else:
        kernels = planner.build_kernel_field(world, net, hp.kernel_size)
    q, v = planner.vi_forward(kernels, reward, hp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    planner.save_matrix_text(out / "value.txt", v)
    planner.save_grayscale_pgm(out / "value.pgm", v)
    planner.save_matrix_text(out / "reward.txt", reward)
    planner.save_grayscale_pgm(out / "reward.pgm", reward)
    for a in planner.Action:
        planner.save_matrix_text(out / f"q_{a.name}.txt", q[:, :, int(a)])
        planner.save_grayscale_pgm(out / f"q_{a.name}.pgm", q[:, :, int(a)])
    print(f"wrote value/reward/Q dumps to {out}")
    return 0


_COMMANDS = {
    "gen-maps": cmd_gen_maps,
    "train-cap": cmd_train_cap,
    "train-e2e": cmd_train_e2e,
    "plan": cmd_plan,
    "eval": cmd_eval,
    "dump-maps": cmd_dump_maps,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, capability.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
