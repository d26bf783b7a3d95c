"""Command-line entry point: ``rsp gen-data | train | eval | rmse | ablate | latency``.

Every command reads an optional flat config file (``key = value`` lines with
dotted keys such as ``relabel.K = 32``; ``#`` starts a comment) and then
applies command-line flags, which win. The resolved configuration is written
next to the outputs as a config file that reproduces the run, with derived
values such as the relabel horizons added as comments. Quantitative results go
to files; stdout gets one summary line.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analysis import (
    GoalTask,
    ablation_grid,
    evaluate,
    latency_by_depth,
    rollout_rmse,
    train_bundle,
    write_ablation_csv,
    write_latency_csv,
    write_rmse_csv,
)
from .dataset import RelabelSpec, fit_normalizer, horizons, read_dataset, relabel_dataset, write_dataset
from .envs import Controller, make_maze, scripted_collect
from .errors import ConfigError, LayoutError
from .learner import Bundle, TrainConfig, load_bundle, save_bundle, train_rsp
from .planner import PlannerConfig

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# Every key a command accepts, with its default. Flags map onto the same keys.
_TRAIN_KEYS = {
    "train.preset": "desk",
    "train.total_steps": 10_000,
    "train.batch_size": None,
    "train.lr_max": 1e-3,
    "train.dropout": None,
    "train.hidden": None,
    "train.seed": 0,
}
KEYS = {
    "gen-data": {
        "env": "corridor",
        "style": "diverse",
        "n_traj": 64,
        "max_len": 1000,
        "seed": 0,
        "noise": Controller.noise,
        "out": "data.rspd",
    },
    "train": {
        "data": None,
        "relabel.K": 32,
        "relabel.N": 1,
        "relabel.goal_mode": "final_state",
        "gcsl": False,
        **_TRAIN_KEYS,
        "out": "bundle.rspb",
    },
    "eval": {
        "bundle": None,
        "env": None,
        "task.mode": "designated",
        "task.radius": 0.5,
        "episodes": 100,
        "seeds": 10,
        "planner.max_steps": 1000,
        "planner.replan_every": 1,
        "out": "eval.json",
    },
    "rmse": {
        "bundle": None,
        "data": None,
        "h_max": 256,
        "stride": 16,
        "out": "rmse_curves.csv",
    },
    "ablate": {
        "data": None,
        "env": None,
        "configs": "8x1,8x2,8x3",
        "gcsl": False,
        "seeds": 3,
        "episodes": 100,
        "task.mode": "designated",
        "task.radius": 0.5,
        "planner.max_steps": 1000,
        "planner.replan_every": 1,
        "h_max": None,
        "rmse_data": None,
        "stride": 16,
        **_TRAIN_KEYS,
        "out_dir": "ablation",
    },
    "latency": {
        "depths": "1,2,3,4",
        "k": 8,
        "hidden": "1024,1024",
        "decisions": 10_000,
        "warmup": 500,
        "seed": 0,
        "out": "latency.csv",
    },
}


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        return text


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file. Values are JSON where possible, else strings."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = _parse_value(value)
    return out


def format_config(cfg: dict, derived: dict | None = None) -> str:
    lines = [f"{k} = {json.dumps(v)}" for k, v in cfg.items()]
    lines += [f"# {k} = {json.dumps(v)}" for k, v in (derived or {}).items()]
    return "\n".join(lines) + "\n"


def resolve(command: str, file_cfg: dict, flags: dict) -> dict:
    known = KEYS[command]
    unknown = sorted(set(file_cfg) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = dict(known)
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def _need(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def _int_list(v) -> list:
    if isinstance(v, int):
        return [v]
    if isinstance(v, str):
        v = [p for p in v.replace(" ", "").split(",") if p]
    try:
        return [int(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigError(f"expected a list of integers, got {v!r}") from None


def _seeds(v) -> list:
    """An integer ``n`` means seeds ``0..n-1``; a list is taken as given."""
    if isinstance(v, int):
        if v < 1:
            raise ConfigError("seeds must be >= 1")
        return list(range(v))
    return _int_list(v)


def _specs(v, goal_mode="final_state") -> list:
    items = v.split(",") if isinstance(v, str) else v
    out = []
    for it in items:
        try:
            K, N = (int(x) for x in (it.split("x") if isinstance(it, str) else it))
        except (TypeError, ValueError):
            raise ConfigError(f"bad relabel config {it!r}; use 'KxN' such as '32x1'") from None
        out.append(RelabelSpec(K, N, goal_mode))
    return out


def _train_config(cfg) -> TrainConfig:
    preset = cfg["train.preset"]
    if preset not in ("desk", "full"):
        raise ConfigError(f"unknown train preset {preset!r}; choose desk or full")
    kw = dict(total_steps=int(cfg["train.total_steps"]), lr_max=float(cfg["train.lr_max"]),
              seed=int(cfg["train.seed"]))
    if cfg["train.dropout"] is not None:
        kw["dropout"] = float(cfg["train.dropout"])
    if cfg["train.batch_size"] is not None:
        kw["batch_size"] = int(cfg["train.batch_size"])
    if cfg["train.hidden"] is not None:
        kw["hidden"] = tuple(_int_list(cfg["train.hidden"]))
    return TrainConfig.desk(**kw) if preset == "desk" else TrainConfig(**kw)


def _planner(cfg) -> PlannerConfig:
    return PlannerConfig(max_steps=int(cfg["planner.max_steps"]), replan_every=int(cfg["planner.replan_every"]))


def _task(cfg) -> GoalTask:
    return GoalTask(str(cfg["task.mode"]), float(cfg["task.radius"]))


def _write_echo(out_path: Path, cfg: dict, derived: dict | None = None) -> Path:
    echo = out_path.with_name(out_path.name + ".config")
    echo.write_text(format_config(cfg, derived))
    return echo


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# --- commands ------------------------------------------------------------------


def cmd_gen_data(cfg) -> str:
    maze = make_maze(str(cfg["env"]))
    trajs = scripted_collect(maze, str(cfg["style"]), int(cfg["n_traj"]), int(cfg["max_len"]), int(cfg["seed"]),
                             controller=Controller(noise=float(cfg["noise"])))
    norm = fit_normalizer(trajs)
    out = Path(cfg["out"])
    write_dataset(out, trajs, norm)
    lengths = [len(t) for t in trajs]
    _write_echo(out, cfg)
    _write_json(out.with_name(out.name + ".json"), {
        "config": cfg,
        "n_traj": len(trajs),
        "lengths": lengths,
        "samples": int(sum(lengths)),
        "mean_length": float(np.mean(lengths)),
        "norm": norm.to_dict(),
    })
    return f"wrote {len(trajs)} trajectories ({sum(lengths)} states) to {out}"


def cmd_train(cfg) -> str:
    trajs, norm = read_dataset(_need(cfg, "data"))
    tc = _train_config(cfg)
    out = Path(cfg["out"])
    if cfg["gcsl"]:
        bundle = train_bundle(trajs, None, tc, norm)
        derived = {"relabel.horizons": None}
    else:
        spec = RelabelSpec(int(cfg["relabel.K"]), int(cfg["relabel.N"]), str(cfg["relabel.goal_mode"]))
        derived = {"relabel.horizons": horizons(spec)}
        data = relabel_dataset(trajs, spec, np.random.default_rng([tc.seed, 5]))
        stack, pol, trace = train_rsp(data, tc, norm, spec)
        bundle = Bundle(stack, pol, spec, norm, {"train": asdict(tc)})
        trace.to_csv(out.with_name(out.name + ".loss.csv"))
    save_bundle(out, bundle)
    derived["train.resolved"] = asdict(tc)
    _write_echo(out, cfg, derived)
    _write_json(out.with_name(out.name + ".json"), {"config": cfg, **derived, "kind": bundle.kind})
    label = "gcsl" if cfg["gcsl"] else bundle.spec.label
    return f"trained {label} bundle ({tc.total_steps} steps) -> {out}"


def cmd_eval(cfg) -> str:
    bundle = load_bundle(_need(cfg, "bundle"))
    maze = make_maze(str(_need(cfg, "env")))
    seeds = _seeds(cfg["seeds"])
    rep = evaluate(bundle, maze, _task(cfg), int(cfg["episodes"]), seeds, _planner(cfg))
    out = Path(cfg["out"])
    episodes = [{"seed": seeds[i // int(cfg["episodes"])], "success": s, "length": n}
                for i, (s, n) in enumerate(zip(rep.successes, rep.lengths))]
    _write_echo(out, cfg)
    _write_json(out, {"config": cfg, "summary": rep.summary(), "episodes": episodes})
    return f"success {rep.success_rate:.3f} +/- {rep.stderr:.3f} over {rep.episodes} episodes"


def cmd_rmse(cfg) -> str:
    bundle = load_bundle(_need(cfg, "bundle"))
    if bundle.stack is None:
        raise ConfigError("rmse needs an RSP bundle with a dynamics stack")
    trajs, _ = read_dataset(_need(cfg, "data"))
    curve = rollout_rmse(bundle.stack, trajs, int(cfg["h_max"]), int(cfg["stride"]))
    out = Path(cfg["out"])
    write_rmse_csv([curve], out)
    _write_echo(out, cfg, {"relabel.horizons": horizons(bundle.spec)})
    _write_json(out.with_name(out.name + ".json"), {"config": cfg, "label": curve.label,
                                                   "n_rollouts": curve.n_rollouts,
                                                   "rmse": dict(zip(map(int, curve.offsets), curve.rmse))})
    return f"{curve.label} rmse@{int(cfg['h_max'])} = {curve.rmse[-1]:.4f} over {curve.n_rollouts} rollouts"


def cmd_ablate(cfg) -> str:
    trajs, norm = read_dataset(_need(cfg, "data"))
    specs = _specs(cfg["configs"])
    maze = make_maze(str(cfg["env"])) if cfg["env"] else None
    h_max = None if cfg["h_max"] is None else int(cfg["h_max"])
    rmse_trajs = read_dataset(cfg["rmse_data"])[0] if cfg["rmse_data"] else None
    if maze is None and h_max is None:
        raise ConfigError("ablate needs env (success rates), h_max (rmse curves) or both")
    seeds = _seeds(cfg["seeds"])
    cells = ablation_grid(specs, trajs, _train_config(cfg), seeds, maze, _task(cfg), int(cfg["episodes"]),
                          _planner(cfg), rmse_trajs, h_max, norm, bool(cfg["gcsl"]), int(cfg["stride"]))
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if maze is not None:
        write_ablation_csv(cells, out / "ablation.csv")
    curves = [c.rmse for c in cells if c.rmse is not None]
    if curves:
        write_rmse_csv(curves, out / "rmse_curves.csv")
    _write_echo(out / "ablate", cfg, {"labels": [c.label for c in cells]})
    _write_json(out / "summary.json", {
        "config": cfg,
        "cells": [{
            "label": c.label,
            "error": c.error,
            "report": None if c.report is None else c.report.summary(),
            "rmse": None if c.rmse is None else dict(zip(map(int, c.rmse.offsets), c.rmse.rmse)),
        } for c in cells],
    })
    failed = sum(c.error is not None for c in cells)
    parts = []
    for c in cells:
        if c.report is not None:
            parts.append(f"{c.label}={c.report.success_rate:.2f}")
        elif c.rmse is not None:
            parts.append(f"{c.label}={c.rmse.rmse[-1]:.3f}")
    msg = f"{len(cells)} cells ({failed} failed): " + " ".join(parts)
    if failed == len(cells):
        raise RuntimeError(msg)
    return msg


def cmd_latency(cfg) -> str:
    stats = latency_by_depth(tuple(_int_list(cfg["depths"])), int(cfg["k"]), tuple(_int_list(cfg["hidden"])),
                             int(cfg["decisions"]), int(cfg["warmup"]), int(cfg["seed"]))
    out = Path(cfg["out"])
    write_latency_csv(stats, out)
    _write_echo(out, cfg)
    _write_json(out.with_name(out.name + ".json"), {"config": cfg, "stats": [asdict(s) for s in stats]})
    return " ".join(f"N={s.depth}:{s.mean_us:.0f}us" for s in stats)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rmse": cmd_rmse,
    "ablate": cmd_ablate,
    "latency": cmd_latency,
}

# flag name -> config key, per command
FLAGS = {
    "gen-data": {"env": "env", "style": "style", "n-traj": "n_traj", "max-len": "max_len", "seed": "seed",
                 "noise": "noise", "out": "out"},
    "train": {"data": "data", "K": "relabel.K", "N": "relabel.N", "goal-mode": "relabel.goal_mode",
              "steps": "train.total_steps", "batch-size": "train.batch_size", "lr": "train.lr_max",
              "dropout": "train.dropout", "hidden": "train.hidden", "seed": "train.seed", "preset": "train.preset",
              "out": "out"},
    "eval": {"bundle": "bundle", "env": "env", "episodes": "episodes", "seeds": "seeds", "mode": "task.mode",
             "radius": "task.radius", "max-steps": "planner.max_steps", "replan-every": "planner.replan_every",
             "out": "out"},
    "rmse": {"bundle": "bundle", "data": "data", "h-max": "h_max", "stride": "stride", "out": "out"},
    "ablate": {"data": "data", "env": "env", "configs": "configs", "seeds": "seeds", "episodes": "episodes",
               "mode": "task.mode", "max-steps": "planner.max_steps", "h-max": "h_max", "rmse-data": "rmse_data",
               "steps": "train.total_steps", "preset": "train.preset", "seed": "train.seed", "out-dir": "out_dir"},
    "latency": {"depths": "depths", "k": "k", "hidden": "hidden", "decisions": "decisions", "warmup": "warmup",
                "out": "out"},
}
SWITCHES = {"train": {"gcsl": "gcsl"}, "ablate": {"gcsl": "gcsl"}}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsp", description="Recursive skip-step planning toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        for flag, key in FLAGS[name].items():
            sp.add_argument(f"--{flag}", dest=key, type=_parse_value, default=None)
        for flag, key in SWITCHES.get(name, {}).items():
            sp.add_argument(f"--{flag}", dest=key, action="store_const", const=True, default=None)
    return p


def _thread_limit():
    n = os.environ.get("RSP_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(limits=int(n))
    except ValueError:
        raise ConfigError(f"RSP_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_cfg = read_config(args.config) if args.config else {}
        cfg = resolve(args.command, file_cfg, flags)
        with _thread_limit():
            msg = COMMANDS[args.command](cfg)
    except (ConfigError, LayoutError) as exc:
        print(f"rsp {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any other failure is a runtime error
        print(f"rsp {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(msg)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
