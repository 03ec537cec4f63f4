"""Command-line interface.

Verbs: gen-data, train, eval, ablate, bench, inspect. Flags are
long-form kebab-case. Exit codes: 0 success, 1 usage error, 2 runtime
failure. The HYBRID_SEED environment variable overrides any configured
seed (useful for CI).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridact",
                     description="Hybrid diffusion + autoregressive action policy "
                                 "on a synthetic manipulation world.")
    parser.add_argument("--version", action="version", version=f"hybridact {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate an expert demonstration dataset")
    p.add_argument("--tasks", required=True,
                   help="comma-separated task names (reach, pick_place, rotate_align, dual_lift_place)")
    p.add_argument("--n-per-task", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="nominal")
    p.add_argument("--out", required=True, help="output dataset file")

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", help="flat key=value config file (TrainConfig keys)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output checkpoint file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")

    p = sub.add_parser("eval", help="closed-loop rollout evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--mode", choices=["dif", "ar", "ensemble"], default="ensemble")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="nominal")
    p.add_argument("--denoise-steps", type=int, default=4)
    p.add_argument("--theta", type=float, default=0.96)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="eval_out")

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", required=True,
                   choices=["layouts", "ex_table", "threshold", "steps"])
    p.add_argument("--config", help="base train config file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="trained checkpoint (threshold/steps suites)")
    p.add_argument("--tasks", help="eval task subset, default: dataset tasks")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--out-dir", default="ablate_out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("bench", help="KV-cache speed benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-actions", type=int, default=30)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="print checkpoint or dataset header")
    p.add_argument("path")
    return parser


def _train_config(args):
    from .evaluate import env_seed_override
    from .trainer import TrainConfig, parse_config_file

    cfg = parse_config_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got '{item}'")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if overrides:
        from dataclasses import asdict, fields
        types = {f.name: f.type for f in fields(TrainConfig)}
        merged = asdict(cfg)
        for key, val in overrides.items():
            if key not in types:
                raise ValueError(f"unknown config key '{key}'")
            kind = types[key]
            if kind == "bool":
                merged[key] = val.lower() in ("true", "1", "yes")
            elif kind == "int":
                merged[key] = int(val)
            elif kind == "float":
                merged[key] = float(val)
            else:
                merged[key] = val
        cfg = TrainConfig(**merged)
    cfg.seed = env_seed_override(cfg.seed)
    return cfg


def _cmd_gen_data(args) -> int:
    from .evaluate import env_seed_override
    from .simworld import generate_dataset

    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    seed = env_seed_override(args.seed)
    ds = generate_dataset(tasks, n_per_task=args.n_per_task, seed=seed,
                          variant=args.variant, out_path=args.out)
    n_steps = sum(e.n_steps for e in ds.episodes)
    print(f"wrote {args.out}: {len(ds.episodes)} episodes, {n_steps} steps, seed {seed}")
    return 0


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)

    def log(record):
        print(f"epoch {record['epoch']:4d}  loss {record['loss_total']:.4f}  "
              f"(dif {record['loss_dif']:.4f}, ce {record['loss_ce']:.4f})  "
              f"{record['seconds']:.0f}s", flush=True)

    train(cfg, args.dataset, out_path=args.out, log=log)
    print(f"wrote checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import env_seed_override, rollout_eval, write_report

    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    seed = env_seed_override(args.seed)
    report = rollout_eval(args.checkpoint, tasks, args.mode, episodes=args.episodes,
                          seed=seed, variant=args.variant, n_steps=args.denoise_steps,
                          theta=args.theta, workers=args.workers)
    csv_path, txt_path = write_report(report, args.out_dir,
                                      name=f"eval_{args.mode}_{args.variant}")
    print(txt_path.read_text(), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def _cmd_ablate(args) -> int:
    from .evaluate import ablate

    cfg = _train_config(args)
    tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks else None
    path = ablate(args.suite, cfg, args.dataset, args.out_dir, tasks=tasks,
                  episodes=args.episodes, checkpoint_path=args.checkpoint)
    print(f"wrote {path}")
    return 0


def _cmd_bench(args) -> int:
    from .evaluate import bench_speed

    import numpy as np

    cached = bench_speed(args.checkpoint, use_cache=True, n_actions=args.n_actions,
                         warmup=args.warmup, seed=args.seed)
    uncached = bench_speed(args.checkpoint, use_cache=False, n_actions=args.n_actions,
                           warmup=args.warmup, seed=args.seed)
    diff = float(np.abs(cached.poses - uncached.poses).max())
    print(f"cached:   {cached.actions_per_second:6.2f} actions/s")
    print(f"uncached: {uncached.actions_per_second:6.2f} actions/s")
    print(f"speedup:  {cached.actions_per_second / uncached.actions_per_second:.2f}x")
    print(f"max action diff cached vs uncached: {diff:.2e}")
    return 0


def _cmd_inspect(args) -> int:
    from . import checkpoint
    from .simworld.dataset import MAGIC as DS_MAGIC

    raw = open(args.path, "rb").read(4)
    if raw == DS_MAGIC:
        from .simworld.dataset import load_dataset
        ds = load_dataset(args.path)
        print(json.dumps(ds.meta, indent=2, sort_keys=True))
        print(f"norm_low:  {ds.stats.low.tolist()}")
        print(f"norm_high: {ds.stats.high.tolist()}")
        return 0
    ck = checkpoint.load(args.path)
    info = {"config": ck.model_config, "config_hash": ck.config_hash,
            "schedule": ck.schedule, "meta": ck.meta,
            "n_tensors": len(ck.params),
            "n_parameters": int(sum(v.size for v in ck.params.values()))}
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


_COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval,
             "ablate": _cmd_ablate, "bench": _cmd_bench, "inspect": _cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"hybridact {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
