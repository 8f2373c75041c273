"""Command-line entry point: ``ghpmdp {train,eval,toy-demo,summarize}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import MODES, ExperimentConfig, config_schema, load_config


def _base_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for key in ("seed", "mode", "family"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.out is not None:
        overrides["out"] = args.out
    return config.with_overrides(**overrides)


def _out_dir(config: ExperimentConfig) -> Path:
    return Path(config.out)


def cmd_train(args) -> int:
    from .training import run_training, transfer_return

    config = _base_config(args)
    result = run_training(config, _out_dir(config))
    if config.train_rounds > 1:
        print(f"mean MPC training return: {transfer_return(result.rows):.3f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import run_adaptation_eval

    out = Path(args.out) if args.out else Path(ExperimentConfig().out)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.ckpt"
    overrides = {}
    if args.config:
        # eval-time knobs only; the architecture always comes from the checkpoint
        cfg = load_config(args.config)
        overrides = {
            k: getattr(cfg, k)
            for k in ("eval_episodes", "svi_every", "svi_iterations", "svi_lr_multiplier", "population", "horizon",
                      "cem_iterations", "particles", "alpha", "elite_frac", "episode_length")
        }
    if args.seed is not None:
        overrides["seed"] = args.seed
    rows = run_adaptation_eval(checkpoint, args.split, out, overrides)
    by_episode: dict[int, list[float]] = {}
    for r in rows:
        by_episode.setdefault(r.episode, []).append(r.episode_return)
    for ep in sorted(by_episode):
        vals = by_episode[ep]
        print(f"{args.split} episode {ep}: mean return {sum(vals) / len(vals):.3f} over {len(vals)} tasks")
    return 0


def cmd_toy(args) -> int:
    from .toy import run_toy_demo

    config = _base_config(args).with_overrides(family="cartpole")
    result = run_toy_demo(config, _out_dir(config))
    for tid, dists in result.distances.items():
        line = ", ".join(f"ep{e}={d:.3f}" for e, d in sorted(dists.items()))
        print(f"{tid} mean distance to goal: {line}")
    return 0


def cmd_summarize(args) -> int:
    from .metrics import summarize

    out = Path(args.out) if args.out else Path(ExperimentConfig().out)
    paths = sorted(p for p in out.rglob("metrics*.csv"))
    if not paths:
        print(f"no metrics files under {out}", file=sys.stderr)
        return 1
    table = summarize(paths, out / "summary.csv")
    for mode, phase, ep, n, mean, lo, hi in table:
        print(f"{mode:14s} {phase:7s} ep {ep:2d}  n={n}  mean={mean:9.3f}  95% CI [{lo:9.3f}, {hi:9.3f}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    schema = "\n".join(f"  {k} ({t}, default {d})" for k, t, d in config_schema())
    parser = argparse.ArgumentParser(
        prog="ghpmdp",
        description="Latent-variable model-based RL experiments.",
        epilog="config file keys (flat 'key = value'):\n" + schema,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory")
        if with_mode:
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--family", choices=("cartpole", "pointrobot"))

    p = sub.add_parser("train", help="multi-task training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-time adaptation on held-out tasks")
    common(p)
    p.add_argument("--split", choices=("weak", "strong"), required=True)
    p.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.ckpt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy-demo", help="latent inference on the hidden-parameter cartpole")
    common(p)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("summarize", help="bootstrap summary of every metrics file under --out")
    p.add_argument("--out", help="directory searched recursively for metrics*.csv")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
