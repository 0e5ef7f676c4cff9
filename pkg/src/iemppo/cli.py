"""Command line entry point: ``iemppo train | sweep | eval``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .envs import ENVS, make_env
from .errors import CheckpointError, ConfigError
from .harness import RunConfig, evaluate, expand_sweep, load_checkpoint, run, sweep, write_summary
from .ppo import ALGOS


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iemppo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent")
    t.add_argument("--config", help="JSON file with RunConfig fields")
    t.add_argument("--env", choices=sorted(ENVS))
    t.add_argument("--algo", choices=ALGOS)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, dest="total_env_steps")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--c1", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--sigma-init", type=float, dest="sigma_init")

    s = sub.add_parser("sweep", help="run a grid of configs and summarize")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int, help="parallel runs (overrides the file)")
    s.add_argument("--summary", help="summary CSV path (default <out>/summary.csv)")

    e = sub.add_parser("eval", help="noise-free rollouts of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    return p


def _train(args) -> int:
    fields = _load_json(args.config) if args.config else {}
    for name in ("env", "algo", "seed", "total_env_steps", "out_dir", "c1", "beta", "sigma_init"):
        v = getattr(args, name)
        if v is not None:
            fields[name] = v
    cfg = RunConfig.from_dict(fields)
    if cfg.total_env_steps < cfg.steps_per_iteration:
        # short smoke runs: shrink the batch rather than reject the request
        cfg.steps_per_iteration = cfg.total_env_steps
    res = run(cfg)
    last = res.rows[-1]
    print(f"{cfg.env} {cfg.algo} seed={cfg.seed}: {len(res.rows)} iterations, "
          f"{last.env_steps} steps, final-window mean return {res.final_mean:.2f}, "
          f"sigma {res.final_sigma:.3f}")
    if cfg.out_dir:
        print(f"metrics written to {Path(cfg.out_dir) / 'metrics.csv'}")
    return 0


def _sweep(args) -> int:
    doc = _load_json(args.config)
    configs = expand_sweep(doc)
    workers = args.workers or int(doc.get("workers", 1))
    table = sweep(configs, workers=workers)
    print(f"{'env':<12}{'algo':<9}{'setting':<14}{'runs':>5}{'mean':>12}{'variance':>12}{'seconds':>10}")
    for r in table:
        print(f"{r.env:<12}{r.algo:<9}{r.setting:<14}{r.runs:>5}{r.mean:>12.2f}{r.variance:>12.2f}{r.seconds:>10.1f}")
        for f in r.failures:
            print(f"    failed: {f}")
    summary = args.summary or (str(Path(doc["out"]) / "summary.csv") if doc.get("out") else None)
    if summary:
        Path(summary).parent.mkdir(parents=True, exist_ok=True)
        write_summary(summary, table)
    return 0


def _eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    returns = evaluate(ckpt.policy, make_env(ckpt.env), args.episodes, seed=args.seed)
    print(f"{ckpt.env} {ckpt.algo} iter {ckpt.iteration}: mean return {np.mean(returns):.2f} "
          f"over {len(returns)} episodes (sigma=0)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return {"train": _train, "sweep": _sweep, "eval": _eval}[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
