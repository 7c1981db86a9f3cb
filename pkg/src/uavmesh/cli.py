"""Command line: train, eval, simulate and export."""
from __future__ import annotations

import argparse
import csv
import gzip
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .advisor import grid_summary, heuristic_plan, verify_plan
from .config import ARTIFACT_VERSION, RunConfig, config_hash, config_to_dict, load_config
from .distill import hungarian_match
from .world import HOVER, ConfigError

EXIT_CONFIG = 2
EXIT_SHAPE = 3

METRIC_NAMES = ("connected_prop", "avg_rate_mbps", "available_ratio", "team_reward")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise CliError(f"config file not found: {args.config}", EXIT_CONFIG)
    overrides = list(args.set or [])
    try:
        return load_config(args.config, overrides)
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg: RunConfig, deterministic: bool, command: str, **extra) -> None:
    data = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.training.seed,
        "deterministic": deterministic,
        "artifact_version": ARTIFACT_VERSION,
        "config": config_to_dict(cfg),
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(data, indent=2), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)

    def progress(row):
        if not args.quiet:
            print(f"episode {row['episode']:5d}  team {row['team_reward']:.4f}  "
                  f"connected {row['connected_prop']:.3f}  available {row['available_ratio']:.3f}", flush=True)

    trainer.train(cfg, out, deterministic=args.deterministic, resume=not args.no_resume, progress=progress)
    print(f"wrote {out / 'run_record.csv'}")
    return 0


def _policies_for(cfg: RunConfig, checkpoint: str | None):
    if checkpoint is None:
        return None
    policies = trainer.build_policies(cfg)
    try:
        trainer.load_checkpoint(Path(checkpoint), policies)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {exc.filename}", EXIT_CONFIG) from exc
    except ValueError as exc:
        raise CliError(f"checkpoint does not fit config: {exc}", EXIT_SHAPE) from exc
    return policies


def format_table(stats: dict) -> str:
    lines = [f"{'metric':<18}{'mean':>12}{'std':>12}"]
    for name in METRIC_NAMES:
        if name in stats:
            lines.append(f"{name:<18}{stats[name]:>12.6f}{stats[name + '_std']:>12.6f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    cfg = _load(args)
    if args.checkpoint is None and not args.random:
        raise CliError("eval needs --checkpoint or --random", EXIT_CONFIG)
    policies = None if args.random else _policies_for(cfg, args.checkpoint)
    mode = "random" if args.random else "greedy"
    stats = trainer.evaluate_policy(cfg, policies, args.episodes, mode=mode)
    print(format_table(stats))
    if args.out:
        out = _out_dir(args)
        _write_manifest(out, cfg, True, "eval", policy=mode, episodes=args.episodes)
        with open(out / "eval.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "std"])
            for name in METRIC_NAMES:
                if name in stats:
                    w.writerow([name, repr(stats[name]), repr(stats[name + "_std"])])
    return 0


def snap_layout(cfg: RunConfig, state) -> np.ndarray:
    """Verified heuristic plan for ``state``, matched to the UAVs in index order."""
    summary = grid_summary(state, cfg.radio, cfg.scenario.side_length)
    plan = heuristic_plan(summary, state.n_uav, cfg.scenario.uav_altitude, state.t)
    verdict = verify_plan(plan, summary, state, cfg.radio, cfg.advisor)
    if not verdict.accepted:
        logging.getLogger(__name__).warning("heuristic plan failed the %s check", verdict.failed)
    m = hungarian_match(state.uav, plan.positions)
    return plan.positions[list(m.sigma)]


def cmd_simulate(args) -> int:
    overrides = list(args.set or []) + [f"scenario.horizon={args.steps}"]
    args.set = overrides
    cfg = _load(args)
    out = _out_dir(args)
    kwargs = {}
    if args.policy == "random":
        mode, policies = "random", None
    elif args.policy == "greedy":
        if args.checkpoint is None:
            raise CliError("greedy simulation needs --checkpoint", EXIT_CONFIG)
        mode, policies = "greedy", _policies_for(cfg, args.checkpoint)
    else:
        mode, policies = "greedy", None
        kwargs["initial_uav"] = lambda st: snap_layout(cfg, st)
        kwargs["action_fn"] = lambda st, t: np.full(st.n_uav, HOVER)
    res = trainer.run_episode(cfg, policies, None, 0, mode=mode, keep_steps=True,
                              stream_key=args.episode_key, **kwargs)
    trainer.write_trace(out / "trace.jsonl", cfg, 0, res.steps)
    summary = {"team_reward": res.team_reward, "connected_prop": res.connected_prop,
               "avg_rate_mbps": res.avg_rate / 1e6, "available_ratio": res.available}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    _write_manifest(out, cfg, True, "simulate", policy=args.policy, steps=args.steps)
    print(json.dumps(summary))
    return 0


def cmd_export(args) -> int:
    run = Path(args.run)
    traces = sorted((run / "traces").glob("*.jsonl")) if (run / "traces").is_dir() else sorted(run.glob("trace*.jsonl"))
    if not traces:
        raise CliError(f"no traces found under {run}", EXIT_CONFIG)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if args.gzip else open
    name = "traces.jsonl.gz" if args.gzip else "traces.jsonl"
    rows_out = []
    with opener(out / name, "wt", encoding="utf-8") as f:
        for path in traces:
            header, rows = trainer.read_trace(path)
            f.write(json.dumps(header) + "\n")
            for r in rows:
                f.write(json.dumps(r) + "\n")
            m = trainer.metrics_from_trace(header, rows)
            rows_out.append({"trace": path.name, "episode": header["episode"], **m})
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["trace", "episode", *METRIC_NAMES[:-1], "team_reward"])
        w.writeheader()
        for r in rows_out:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    print(f"exported {len(traces)} traces to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavmesh", description="UAV mesh MARL training and simulation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config (defaults apply when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. training.seed=7")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--deterministic", action="store_true", help="synchronous advisor, single worker")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("train", help="train policies")
    common(sp)
    sp.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint in --out")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="greedy (or random) evaluation episodes")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", help="checkpoint file or run/checkpoints directory")
    sp.add_argument("--random", action="store_true", help="uniform random policy baseline")
    sp.add_argument("--episodes", type=int, default=5)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("simulate", help="one headless episode with a fixed policy, full trace")
    common(sp)
    sp.add_argument("--policy", choices=("random", "greedy", "heuristic-advisor-snap"), default="random")
    sp.add_argument("--checkpoint")
    sp.add_argument("--steps", type=int, default=400)
    sp.add_argument("--episode-key", type=int, default=0, help="selects the random streams")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("export", help="bundle traces and recompute per-episode metrics")
    sp.add_argument("--run", required=True, help="run or simulate output directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gzip", action="store_true")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
