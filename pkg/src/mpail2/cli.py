"""Command-line surface: gen-demos, train, eval, transfer, plan-trace.

Exit code 0 on success; otherwise a single machine-parseable line
``<category>: <message>`` goes to stderr and the category picks the exit
code. ``MPAIL2_THREADS`` caps planner parallelism.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer
from .checkpoint import CheckpointError
from .config import ABLATIONS, ConfigError, TrainConfig
from .envs import ENV_NAMES, make_env
from .experience import DemoFormatError
from .models import ModelBundle
from .nets import DimensionError
from .planner import plan

_EXIT_CODES = {
    "config-error": 2,
    "demo-error": 3,
    "env-error": 4,
    "dim-error": 5,
    "checkpoint-error": 6,
    "runtime-halt": 7,
    "internal-error": 1,
}


def _categorize(exc) -> str:
    if isinstance(exc, ConfigError):
        return "config-error"
    if isinstance(exc, DemoFormatError):
        return "demo-error"
    if isinstance(exc, DimensionError):
        return "dim-error"
    if isinstance(exc, CheckpointError):
        return "checkpoint-error"
    if isinstance(exc, trainer.TrainingHalted):
        return "runtime-halt"
    if isinstance(exc, (ValueError, RuntimeError)):
        return "env-error" if "environment" in str(exc) else "config-error"
    return "internal-error"


def _add_train_overrides(p):
    p.add_argument("--config", type=str, default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--env", type=str, default=None, choices=ENV_NAMES)
    p.add_argument("--demos", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None, dest="checkpoint_every")
    p.add_argument("--ablation", type=str, default=None, choices=ABLATIONS)


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    return cfg.with_overrides(
        seed=args.seed, env=args.env, demos=args.demos, out=args.out,
        episodes=args.episodes, checkpoint_every=args.checkpoint_every,
        ablation=args.ablation,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpail2")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="collect observation-only scripted demos")
    p.add_argument("--env", type=str, default="push2d", choices=ENV_NAMES)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run the training loop")
    _add_train_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--env", type=str, required=True, choices=ENV_NAMES)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default=None, help="optional per-episode CSV")

    p = sub.add_parser("transfer", help="initialize from a checkpoint, train on new demos")
    _add_train_overrides(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--transfer-mode", type=str, default="full",
                   choices=trainer.TRANSFER_MODES, dest="transfer_mode")

    p = sub.add_parser("plan-trace", help="dump per-iteration plan scores for one call")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--env", type=str, required=True, choices=ENV_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    return parser


def _cmd_gen_demos(args):
    demos = trainer.gen_demos(args.env, args.episodes, args.out, args.seed)
    print(f"wrote {len(demos.episodes)} demo episodes "
          f"({demos.n_pairs()} observation pairs) to {args.out}")


def _cmd_train(args):
    cfg = _load_config(args)
    result = trainer.train(cfg)
    print(f"trained {result.episodes_run} episodes, {result.successes} successes; "
          f"checkpoint: {result.checkpoint_dir}")


def _cmd_eval(args):
    pct, _ = trainer.evaluate(args.checkpoint, args.env, args.episodes, args.seed,
                              out_csv=args.out)
    print(f"success: {pct:.1f}% over {args.episodes} episodes")


def _cmd_transfer(args):
    cfg = _load_config(args)
    if cfg.demos is None:
        raise ConfigError("transfer needs --demos (the new task's demos)")
    result = trainer.transfer(args.checkpoint, cfg.demos, cfg, mode=args.transfer_mode)
    print(f"transferred and trained {result.episodes_run} episodes, "
          f"{result.successes} successes; checkpoint: {result.checkpoint_dir}")


def _cmd_plan_trace(args):
    bundle, meta = ModelBundle.from_checkpoint(args.checkpoint)
    env = make_env(args.env)
    from .planner import PlannerConfig

    pcfg = PlannerConfig(horizon=bundle.horizon, gamma=meta.get("gamma", 0.99),
                         **meta.get("planner", {}))
    rng = np.random.default_rng(args.seed)
    obs = env.reset(rng)
    res = plan(obs, None, bundle, pcfg, rng, mode="mean", want_trace=True)
    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "plan_index", "return", "elite"])
        for row in res.trace:
            writer.writerow([row[0], row[1], f"{row[2]:.9g}", int(row[3])])
    print(f"wrote {len(res.trace)} trace rows to {args.out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-demos": _cmd_gen_demos,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "transfer": _cmd_transfer,
        "plan-trace": _cmd_plan_trace,
    }
    try:
        handlers[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        category = _categorize(exc)
        print(f"{category}: {exc}", file=sys.stderr)
        return _EXIT_CODES[category]
    return 0


if __name__ == "__main__":
    sys.exit(main())
