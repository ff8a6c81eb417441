"""Command-line driver: ``latent-shield {train,eval,compare,monitor,render,selfcheck}``.

Exit codes: 0 ok, 2 configuration or usage error, 3 numeric abort,
4 violation found (``monitor``) or failed self-check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checks, config
from . import numerics as nx
from .envs import write_ppm
from .scltl import Monitor, ParseError, Status, UnknownPropositionError, monitor_step, parse, read_trace
from .shield import epsilon_at
from .trainer import (EVAL_HEADER, INTERFERENCE_HEADER, METRICS_HEADER, Agent, EvalResult, collect_episode,
                      evaluate, train, write_csv)

log = logging.getLogger("latent_shield")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 0, 2, 3, 4
COMPARE_HEADER = ["environment", "condition", "test_reward_mean", "test_reward_std", "test_violations_mean",
                  "test_violations_std", "train_violations_mean", "train_violations_std", "seeds"]
CONDITIONS = ("latent", "none", "oracle")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> dict:
    cfg = config.load(args.config)
    return config.apply_overrides(cfg, args.set or [])


def _load_agent(path, mc, ac, tc, seed: int) -> Agent:
    agent = Agent(mc, ac, tc.model_lr, seed)
    try:
        agent.load(nx.load_checkpoint(path))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from exc
    return agent


def _final_epsilon(tc) -> float:
    return epsilon_at(tc.epsilon, tc.total_episodes)


def eval_rows(result: EvalResult) -> list:
    """Per-episode rows followed by ``mean`` and ``std`` summary rows."""
    summary = result.summary()
    n = len(result.rows)
    return list(result.rows) + [
        ("mean", n, summary["test_reward_mean"], summary["test_violations_mean"]),
        ("std", n, summary["test_reward_std"], summary["test_violations_std"]),
    ]


def run_training(cfg: dict, seed: int, run_dir: Path | None = None) -> dict:
    """Train and evaluate one seed; optionally write the run directory. Returns a summary."""
    env, mc, ac, tc = config.build(cfg)
    result = train(env, mc, ac, tc, seed)
    ev = evaluate(env, result.agent, tc.eval_episodes, shield_mode=tc.shield_mode, shield_cfg=tc.shield,
                  epsilon=_final_epsilon(tc), run_seed=seed, oracle_draws=tc.oracle_draws)
    summary = {
        "seed": seed, "condition": tc.shield_mode, "environment": cfg["env"]["name"],
        "train_violations": result.train_violations,
        "train_reward_mean": float(np.mean([r["train_reward"] for r in result.metrics])),
        **ev.summary(),
    }
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        write_csv(run_dir / "metrics.csv", METRICS_HEADER, result.metrics)
        write_csv(run_dir / "interference.csv", INTERFERENCE_HEADER, result.events)
        write_csv(run_dir / "eval.csv", EVAL_HEADER, eval_rows(ev))
        nx.save_checkpoint(run_dir / "checkpoint.bin", result.agent.tensors())
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.out) if args.out else config.output_root(cfg) / f"{Path(args.config).stem}-seed{args.seed}"
    summary = run_training(cfg, args.seed, run_dir)
    print(f"run directory: {run_dir}")
    print(f"training violations {summary['train_violations']}, test reward {summary['test_reward_mean']:.2f}, "
          f"test violations {summary['test_violations_mean']:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    env, mc, ac, tc = config.build(cfg)
    agent = _load_agent(args.checkpoint, mc, ac, tc, args.seed)
    shield = args.shield if args.shield is not None else tc.shield_mode
    ev = evaluate(env, agent, args.episodes, shield_mode=shield, shield_cfg=tc.shield,
                  epsilon=_final_epsilon(tc), run_seed=args.seed, oracle_draws=tc.oracle_draws)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval-{shield}.csv")
    write_csv(out, EVAL_HEADER, eval_rows(ev))
    s = ev.summary()
    print(f"{out}: reward {s['test_reward_mean']:.2f} ({s['test_reward_std']:.2f}), "
          f"violations {s['test_violations_mean']:.2f} ({s['test_violations_std']:.2f})")
    return EXIT_OK


def compare(cfg: dict, seeds, out_dir: Path | None = None, conditions=CONDITIONS) -> list:
    """Train every condition on every seed; one row per condition."""
    rows = []
    for cond in conditions:
        c = config.apply_overrides(cfg, [f"shield.mode={cond}"])
        per_seed = []
        for s in seeds:
            run_dir = out_dir / f"{cond}-seed{s}" if out_dir is not None else None
            per_seed.append(run_training(c, s, run_dir))
            log.info("%s seed %d done: %s", cond, s, per_seed[-1])
        col = lambda k: np.array([p[k] for p in per_seed], dtype=float)
        rows.append({
            "environment": cfg["env"]["name"], "condition": cond,
            "test_reward_mean": col("test_reward_mean").mean(), "test_reward_std": col("test_reward_mean").std(),
            "test_violations_mean": col("test_violations_mean").mean(),
            "test_violations_std": col("test_violations_mean").std(),
            "train_violations_mean": col("train_violations").mean(),
            "train_violations_std": col("train_violations").std(),
            "seeds": " ".join(str(s) for s in seeds),
        })
    return rows


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out) if args.out else config.output_root(cfg) / f"{Path(args.config).stem}-compare"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = compare(cfg, args.seeds, out_dir)
    write_csv(out_dir / "comparison.csv", COMPARE_HEADER, rows)
    for r in rows:
        print(f"{r['condition']:>7}: test reward {r['test_reward_mean']:.1f} ({r['test_reward_std']:.1f}), "
              f"test violations {r['test_violations_mean']:.2f} ({r['test_violations_std']:.2f}), "
              f"training violations {r['train_violations_mean']:.1f} ({r['train_violations_std']:.1f})")
    print(f"wrote {out_dir / 'comparison.csv'}")
    return EXIT_OK


def cmd_monitor(args) -> int:
    alphabet = args.alphabet.split(",") if args.alphabet else None
    try:
        formula = parse(args.spec, alphabet)
    except (ParseError, UnknownPropositionError) as exc:
        raise UsageError(f"spec: {exc}") from exc
    with open(args.trace, encoding="utf-8") as fh:
        try:
            trace = list(read_trace(fh, alphabet))
        except ValueError as exc:
            raise UsageError(f"{args.trace}: {exc}") from exc
    if not trace:
        raise UsageError(f"{args.trace}: empty trace")
    m = Monitor.start(formula)
    for i, v in enumerate(trace):
        m = monitor_step(m, v)
        print(f"{i}\t{m.status.value}")
        if m.status is Status.UNSAFE:
            return EXIT_VIOLATION
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _load_config(args)
    env, mc, ac, tc = config.build(cfg)
    if len(env.observation_shape) != 3:
        raise UsageError(f"environment {cfg['env']['name']!r} has no image observations")
    agent = _load_agent(args.checkpoint, mc, ac, tc, args.seed) if args.checkpoint else None
    ep, stats = collect_episode(env, agent, args.seed, random_policy=agent is None, explore=False,
                                r_punish=None, rng=np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = ep.obs[: args.frames + 1] if args.frames is not None else ep.obs
    for i, frame in enumerate(frames):
        write_ppm(out / f"frame_{i:04d}.ppm", frame.astype(np.float64) / 255.0)
    print(f"wrote {len(frames)} frames to {out} (reward {stats.reward:.1f}, violations {stats.violations})")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    corrupt = None
    if args.corrupt:
        target = args.corrupt

        def corrupt(name, y):
            # scales the gradient but not the value
            return y + 0.5 * (y - y.detach()) if name == target else y

    reports = [checks.numeric_sweep(args.seeds, corrupt=corrupt), checks.shield_checks()]
    if not args.quick:
        reports.append(checks.progression_sweep())
    for r in reports:
        for line in checks.iter_lines(r):
            print(line)
    failed = [type(r).__name__ for r in reports if not r.ok]
    print("selfcheck: " + ("FAILED " + ", ".join(failed) if failed else "all checks passed"))
    return EXIT_VIOLATION if failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-shield", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 is bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="JSON config file or preset name (vgw_desk, cd_desk, vgw_full, cd_full)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    t = sub.add_parser("train", help="train one seed and write a run directory")
    with_config(t)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="run directory (default: <output root>/<config>-seed<N>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    with_config(e)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--shield", choices=CONDITIONS, help="default: the config's shield.mode")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="evaluation CSV path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="latent vs unshielded vs oracle over several seeds")
    with_config(c)
    c.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("monitor", help="monitor a trace file against a spec")
    m.add_argument("spec")
    m.add_argument("trace")
    m.add_argument("--alphabet", help="comma-separated allowed propositions")
    m.set_defaults(func=cmd_monitor)

    r = sub.add_parser("render", help="write PPM frames of one episode")
    with_config(r)
    r.add_argument("--checkpoint", help="act greedily with this agent (default: random policy)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--frames", type=int, help="stop after this many steps")
    r.add_argument("--out", default="frames")
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("selfcheck", help="gradient, KL, progression and shield checks")
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--quick", action="store_true", help="skip the exhaustive progression sweep")
    s.add_argument("--corrupt", metavar="PRIMITIVE", help="test hook: break one primitive's gradient")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (config.ConfigError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
