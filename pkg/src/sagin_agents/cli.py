"""Command-line entry point.

Every verb writes into ``--out`` only, and leaves a ``manifest.json`` there
together with a copy of the scenario config it ran on.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, caching, cost, market, rl, sim, verify
from .domain import (ConfigFormatError, DomainError, ScenarioConfig, default_config,
                     dumps_config, load_config, validate_config)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4

CHECKPOINT_NAME = "checkpoint.dqn"


class ConfigError(Exception):
    def __init__(self, problems: Sequence[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def _split(text: str | None) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()] if text else []


def _load(args) -> ScenarioConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except ConfigFormatError as exc:
            raise ConfigError([str(exc)]) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError([f"{type(exc).__name__}: {exc}"]) from exc
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    else:
        cfg = default_config(seed=args.seed or 0)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _policies(args) -> list[str]:
    names = _split(args.policy) or ["least_aot"]
    bad = [p for p in names if p not in caching.POLICIES]
    if bad:
        raise ConfigError([f"unknown policy {p!r} (choose from {', '.join(caching.POLICIES)})"
                           for p in bad])
    return names


def _versions() -> dict[str, str]:
    return {"sagin_agents": __version__, "python": platform.python_version(),
            "numpy": np.__version__}


def _manifest(out: Path, verb: str, args, cfg: ScenarioConfig | None, outputs: list[Path],
              extra: dict | None = None) -> None:
    record = {
        "verb": verb,
        "seed": None if cfg is None else cfg.rng_seed,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")},
        "versions": _versions(),
    }
    if cfg is not None:
        text = dumps_config(cfg)
        (out / "config.ini").write_text(text)
        record["config_sha256"] = hashlib.sha256(text.encode()).hexdigest()
        outputs = outputs + [out / "config.ini"]
    record["outputs"] = sorted(p.name for p in outputs)
    if extra:
        record.update(extra)
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# verbs


def cmd_simulate(args, out: Path) -> int:
    cfg = _load(args)
    policies = _policies(args)
    written: list[Path] = []
    summary = {}
    for policy in policies:
        res = sim.run_scenario(cfg, policy)
        ground = res.ground_ids
        per_slot = [(tr.slot, "ground_mean", policy,
                     sum((tr.costs[n] for n in ground), cost.CostBreakdown()).scaled(1 / len(ground)))
                    for tr in res.traces]
        paths = (out / f"costs_{policy}.csv", out / f"operator_costs_{policy}.csv",
                 out / f"events_{policy}.csv")
        cost.write_cost_log(paths[0], per_slot)
        cost.write_cost_log(paths[1], sim.slot_rows(res))
        caching.write_event_log(paths[2], res.events())
        written.extend(paths)
        summary[policy] = res.mean_total_cost
        print(f"{policy}: mean total cost {res.mean_total_cost:.6g} over {len(res.traces)} slots")
    _manifest(out, "simulate", args, cfg, written, {"mean_total_cost": summary})
    return EXIT_OK


def cmd_sweep(args, out: Path) -> int:
    policies = _policies(args)
    if args.config:
        cfg = _load(args)
        source = cfg
    else:
        cfg = default_config(seed=args.seed or 0)
        source = sim.DefaultBuilder()
    try:
        values = [int(v) for v in _split(args.values)] or list(DEFAULT_SWEEP[args.axis])
    except ValueError as exc:
        raise ConfigError([f"--values: {exc}"]) from exc
    rows = sim.sweep(source, args.axis, values, policies, replicates=args.replicates,
                     base_seed=cfg.rng_seed, workers=args.workers)
    path = out / "sweep.csv"
    sim.write_sweep(path, rows)
    for (v, p), m in sorted(sim.sweep_means(rows).items()):
        print(f"{args.axis}={v} {p}: {m:.6g}")
    _manifest(out, "sweep", args, cfg, [path])
    return EXIT_OK


DEFAULT_SWEEP = {"gpus": (8, 16, 24, 32), "users": (5, 10, 15, 20),
                 "services": (6, 10, 14, 18), "slots": (25, 50, 100)}


def cmd_train(args, out: Path) -> int:
    cfg = _load(args)
    tc = rl.TrainConfig(episodes=args.episodes) if args.episodes else rl.TrainConfig()
    result = sim.run_scenario(cfg, "least_aot")
    env = sim.market_episode_source(cfg, result=result)
    agent = rl.DqnAgent(len(cfg.operators), tc, seed=cfg.rng_seed)
    traces = rl.train(env, agent)
    ckpt, curve = out / CHECKPOINT_NAME, out / "curve.csv"
    rl.save_checkpoint(agent.net, ckpt)
    rl.write_curve(curve, traces, tc.action_count)
    curve_vals = [t.mean_surplus for t in traces]
    slope = rl.curve_slope(curve_vals) if len(curve_vals) >= 2 else math.nan
    print(f"trained {len(traces)} episodes; final mean surplus {curve_vals[-1]:.6g}; "
          f"relative slope over last 50 episodes {slope:.3g}")
    _manifest(out, "auction-train", args, cfg, [ckpt, curve], {"final_slope": slope})
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    cfg = _load(args)
    mechanisms = _split(args.mechanism) or list(rl.MECHANISMS)
    bad = [m for m in mechanisms if m not in rl.MECHANISMS]
    if bad:
        raise ConfigError([f"unknown mechanism {m!r} (choose from {', '.join(rl.MECHANISMS)})"
                           for m in bad])
    pricer = None
    if "dqmsb" in mechanisms:
        net = rl.load_checkpoint(Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME)
        if net.layer_sizes[0] != len(cfg.operators):
            raise rl.CheckpointError(f"checkpoint expects {net.layer_sizes[0]} bidders, "
                                     f"scenario has {len(cfg.operators)}")
        pricer = rl.GreedyPricer(net)
    rounds, rho = sim.evaluation_rounds(cfg, args.rounds)
    rows = rl.evaluate_mechanisms(rounds, pricer, rho, mechanisms=mechanisms)
    path = out / "rounds.csv"
    market.write_rounds(path, [r for m in mechanisms for r in rows[m]])
    means = {m: rl.mean_surplus(rows[m]) for m in mechanisms}
    for m in mechanisms:
        print(f"{m}: mean total surplus {means[m]:.6g}")
    _manifest(out, "auction-eval", args, cfg, [path], {"mean_total_surplus": means,
                                                       "optimal_rho": rho})
    return EXIT_OK


def cmd_verify(args, out: Path) -> int:
    names = _split(args.suite) or None
    try:
        reports = verify.run_suites(names, args.trials, args.seed or 0, args.workers)
    except KeyError as exc:
        raise ConfigError([f"{exc.args[0]} (choose from {', '.join(verify.SUITES)})"]) from exc
    summary, details = verify.write_reports(out, reports)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.suite}: {r.cases} cases, {r.skipped} skipped, "
              f"{len(r.violations)} violations")
    _manifest(out, "verify", args, None, [summary, details],
              {"passed": all(r.passed for r in reports)})
    if not all(r.passed for r in reports):
        print(f"violations written to {details}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_report(args, out: Path) -> int:
    from . import report
    files = report.build_report(out)
    if not files:
        print(f"no result files found in {out}", file=sys.stderr)
        return EXIT_IO
    for f in files:
        print(f)
    _manifest(out, "report", args, None, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="results", help="output directory (default: results)")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    scenario = argparse.ArgumentParser(add_help=False)
    scenario.add_argument("--config", help="scenario config file (default: reference scenario)")

    parser = argparse.ArgumentParser(prog="sagin-agents",
                                     description="LLM-agent provisioning simulator and market")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("simulate", parents=[common, scenario], help="run caching policies")
    p.add_argument("--policy", help="comma list of least_aot, fifo, lfu")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common, scenario], help="sweep one resource axis")
    p.add_argument("--policy", default="least_aot,fifo,lfu")
    p.add_argument("--axis", choices=sim.AXES, default="gpus")
    p.add_argument("--values", help="comma list of axis values")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("auction-train", parents=[common, scenario], help="train the pricing network")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("auction-eval", parents=[common, scenario], help="compare mechanisms")
    p.add_argument("--mechanism", help="comma list of " + ", ".join(rl.MECHANISMS))
    p.add_argument("--checkpoint", help=f"network checkpoint (default: OUT/{CHECKPOINT_NAME})")
    p.add_argument("--rounds", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    p.add_argument("--suite", help="comma list of " + ", ".join(verify.SUITES))
    p.add_argument("--trials", type=int, help="cases per suite")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", parents=[common], help="summarise a results directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, out)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_CONFIG
    except rl.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
