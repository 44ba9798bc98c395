"""Command-line entry points: gen-episodes, train, eval, report, replay."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .episodes import EpisodeSpec, GenerationConfig, generate_episode
from .evaluate import (AlineaConfig, EvalConfigError, episode_result, replay_actions,
                       run_alinea, run_nc, run_policy)
from .env import EnvConfig
from .encoding import RewardParams
from .metrics import compute_metrics, emit_tables, save_reports
from .nn import load_checkpoint
from .policy import PolicyConfig
from .ppo import TrainConfig, train
from .roadnet import MAP_NAMES, MapParams, build_map, scaled_params
from .runio import read_jsonl, run_manifest, write_json, write_jsonl


def _params_for_scale(scale: float) -> MapParams:
    return scaled_params(scale) if scale != 1.0 else MapParams()


def _episode_files(episode_dir: str) -> list[str]:
    try:
        names = sorted(os.listdir(episode_dir))
    except FileNotFoundError:
        raise SystemExit(f"error: episode directory {episode_dir!r} does not exist")
    files = [os.path.join(episode_dir, n) for n in names if n.endswith(".json")
             and n != "manifest.json"]
    if not files:
        raise SystemExit(f"error: no episode files in {episode_dir!r}")
    return files


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def cmd_gen_episodes(args) -> int:
    network = build_map(args.map, _params_for_scale(args.map_scale))
    config = GenerationConfig(
        demand_level=args.demand_level,
        demand_range=tuple(args.demand_range),
        penetration=args.penetration,
        profile_set=args.profile_set,
        duration=args.duration,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    seeds = []
    for i in range(args.count):
        seed = int(np.random.SeedSequence((args.seed, i)).generate_state(1, np.uint64)[0] % 2 ** 62)
        seeds.append(seed)
        spec = generate_episode(network, config, seed)
        with open(os.path.join(args.out_dir, f"ep_{i:03d}.json"), "w") as fh:
            fh.write(spec.to_json())
            fh.write("\n")
    manifest_cfg = {
        "map": args.map, "map_scale": args.map_scale, "count": args.count,
        "seed": args.seed, "demand_level": args.demand_level,
        "demand_range": list(args.demand_range), "duration": args.duration,
        "penetration": args.penetration, "profile_set": args.profile_set,
    }
    write_json(os.path.join(args.out_dir, "manifest.json"),
               run_manifest("gen-episodes", manifest_cfg, seeds))
    print(f"wrote {args.count} episodes to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    with open(args.config) as fh:
        config = TrainConfig.from_json(fh.read())
    ckpt = train(config, args.out_dir, resume_from=args.resume, progress=args.progress)
    print(f"final checkpoint: {ckpt}")
    return 0


def _load_policy(checkpoint: str, map_name: str, map_scale: float | None):
    store, extra = load_checkpoint(checkpoint)
    tc = extra.get("train_config")
    if tc is None:
        raise SystemExit("error: checkpoint carries no training configuration")
    if tc["map_name"] != map_name:
        raise SystemExit(
            f"error: checkpoint was trained on {tc['map_name']!r}, not {map_name!r}")
    if map_scale is not None and abs(map_scale - tc["map_scale"]) > 1e-12:
        raise SystemExit("error: --map-scale conflicts with the checkpoint's geometry")
    policy_config = PolicyConfig(variant=tc["variant"], embed_width=tc["embed_width"],
                                 ffn_width=tc["ffn_width"])
    env_config = EnvConfig(
        sensing_range=tc["sensing_range"],
        max_activated=tc["max_activated"],
        capacity=tc["capacity"],
        activation_lane_cap=tc.get("activation_lane_cap"),
        reward=RewardParams(eta_a=tc["eta_a"], eta_b=tc["eta_b"]),
    )
    name = extra.get("policy_card", {}).get("name", "policy")
    return store, policy_config, env_config, tc["map_scale"], name


def cmd_eval(args) -> int:
    files = _episode_files(args.episode_dir)
    specs = []
    for path in files:
        with open(path) as fh:
            spec = EpisodeSpec.from_json(fh.read())
        if spec.map_name != args.map:
            raise SystemExit(f"error: episode {path} is for map {spec.map_name!r}")
        if args.demand_filter is not None and spec.demand_level != args.demand_filter:
            continue
        specs.append((path, spec))
    if not specs:
        raise SystemExit("error: no episodes left after filtering")

    map_scale = args.map_scale
    if args.controller == "policy":
        if not args.checkpoint:
            raise SystemExit("error: --controller policy requires --checkpoint")
        store, policy_config, env_config, ckpt_scale, name = _load_policy(
            args.checkpoint, args.map, args.map_scale)
        map_scale = ckpt_scale
        controller_name = name
    else:
        map_scale = 1.0 if map_scale is None else map_scale
        controller_name = {"nc": "NC", "alinea": "ALINEA"}[args.controller]
    network = build_map(args.map, _params_for_scale(map_scale))

    os.makedirs(args.out_dir, exist_ok=True)
    results = []
    for path, spec in specs:
        if args.controller == "nc":
            sim = run_nc(network, spec)
        elif args.controller == "alinea":
            try:
                sim = run_alinea(network, spec, AlineaConfig(
                    gain=args.alinea_gain, target_occupancy=args.alinea_target))
            except EvalConfigError as exc:
                raise SystemExit(f"error: {exc}")
        else:
            action_log = [] if args.dump_actions else None
            sim = run_policy(network, spec, store, policy_config, env_config,
                             greedy=not args.sample, action_log=action_log)
            if action_log is not None:
                stem = os.path.splitext(os.path.basename(path))[0]
                write_jsonl(os.path.join(args.out_dir, f"actions_{stem}.jsonl"),
                            action_log)
        results.append(episode_result(sim, spec, controller_name, network))
        stem = os.path.splitext(os.path.basename(path))[0]
        write_jsonl(os.path.join(args.out_dir, f"releases_{stem}.jsonl"),
                    sim.release_log)
    write_jsonl(os.path.join(args.out_dir, "results.jsonl"), results)
    report = compute_metrics(results)
    write_json(os.path.join(args.out_dir, "report.json"), report.to_dict())
    manifest_cfg = {
        "map": args.map, "map_scale": map_scale, "controller": controller_name,
        "episode_dir": args.episode_dir,
        "demand_filter": args.demand_filter,
        "checkpoint": args.checkpoint,
        "episodes": {os.path.basename(p): _sha256(p) for p, _ in specs},
    }
    write_json(os.path.join(args.out_dir, "manifest.json"),
               run_manifest("eval", manifest_cfg, [s.seed for _, s in specs]))
    tp = report.throughput
    print(f"{controller_name}: throughput="
          f"{'N/A' if tp is None else f'{tp:.1f}%'} t_wait={report.t_wait:.1f}s "
          f"({report.episodes} episodes)")
    return 0


def cmd_report(args) -> int:
    rows = []
    for d in args.eval_dirs:
        path = os.path.join(d, "results.jsonl")
        if not os.path.exists(path):
            raise SystemExit(f"error: {path} not found")
        rows.extend(read_jsonl(path))
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault((row["map"], row["controller"], row["demand_level"]), []).append(row)
    reports = [compute_metrics(v) for _, v in sorted(groups.items())]
    os.makedirs(args.out_dir, exist_ok=True)
    written = emit_tables(reports, args.out_dir)
    save_reports(reports, os.path.join(args.out_dir, "reports.jsonl"))
    write_json(os.path.join(args.out_dir, "manifest.json"),
               run_manifest("report", {"eval_dirs": list(args.eval_dirs)}, []))
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_replay(args) -> int:
    with open(args.episode) as fh:
        spec = EpisodeSpec.from_json(fh.read())
    network = build_map(spec.map_name, _params_for_scale(args.map_scale))
    actions = read_jsonl(args.actions) if args.actions else []
    sim = replay_actions(network, spec, actions)
    write_jsonl(args.out, sim.trajectory_log or [])
    print(f"wrote {args.out} ({sim.released_total} releases)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeflow",
        description="Traffic-bottleneck simulation, training, and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-episodes", help="generate a deterministic episode pool")
    g.add_argument("--map", required=True, choices=MAP_NAMES)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--demand-level", type=float, required=True)
    g.add_argument("--demand-range", type=float, nargs=2, default=(0.6, 1.4))
    g.add_argument("--duration", type=float, default=1200.0)
    g.add_argument("--penetration", type=float, default=0.0)
    g.add_argument("--profile-set", default="normal",
                   choices=("normal", "conservative_av"))
    g.add_argument("--map-scale", type=float, default=1.0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_episodes)

    t = sub.add_parser("train", help="train a controller from a run config")
    t.add_argument("--config", required=True, help="TrainConfig JSON path")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a controller on an episode pool")
    e.add_argument("--map", required=True, choices=MAP_NAMES)
    e.add_argument("--controller", required=True, choices=("nc", "alinea", "policy"))
    e.add_argument("--episode-dir", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--demand-filter", type=float, default=None)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--map-scale", type=float, default=None)
    e.add_argument("--sample", action="store_true",
                   help="sample actions instead of greedy evaluation")
    e.add_argument("--dump-actions", action="store_true")
    e.add_argument("--alinea-gain", type=float, default=70.0)
    e.add_argument("--alinea-target", type=float, default=18.0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate eval runs into tables")
    r.add_argument("--eval-dirs", nargs="+", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="re-run an episode with a recorded action log")
    p.add_argument("--episode", required=True)
    p.add_argument("--actions", default=None)
    p.add_argument("--map-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
