"""Command-line entry point: ``invrec simulate|analytic|sa|train|eval|sweep``.

Exit codes: 0 success, 1 bad usage or configuration, 2 a requested check
failed, 3 only training divergences occurred.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analytic, harness, nn, sa
from .env import EnvConfig, Env, JointAction, config_from_dict, fmt, trajectory_rows, write_trajectory_csv
from .errors import ConfigError, DomainError
from .marl import Trainer, evaluate_policy, joint_actions, split_networks

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_DIVERGED = 0, 1, 2, 3


def parse_seeds(text: str) -> tuple:
    """``"3"``, ``"0-19"`` or ``"0,4,7"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError("seeds", f"no seeds in {text!r}")
    return tuple(seeds)


def _read_json(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


EXPERIMENT_KEYS = {"env", "trainer", "seeds", "scenario", "algorithm", "perturbations", "name", "warm_start"}


def env_from_file(path) -> EnvConfig:
    """Environment config from either a bare env file or an experiment file."""
    data = _read_json(path)
    if EXPERIMENT_KEYS & set(data):
        data = data.get("env", {})
    return config_from_dict(data)


def experiment_from_args(args, seeds=None) -> harness.ExperimentSpec:
    data = _read_json(args.config)
    if data and not EXPERIMENT_KEYS & set(data):
        data = {"env": data}
    if args.scenario:
        data["scenario"] = args.scenario
    if args.algorithm:
        data["algorithm"] = args.algorithm
    if getattr(args, "iterations", None):
        data.setdefault("trainer", {})["iterations"] = args.iterations
    if seeds is not None:
        data["seeds"] = list(seeds)
    return harness.ExperimentSpec.from_dict(data)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = env_from_file(args.config)
    agents = None
    if args.checkpoint:
        agents, _ = split_networks(nn.load_checkpoint(args.checkpoint)[0])
    rows = []
    for seed in parse_seeds(args.seeds):
        for ep in range(args.episodes):
            env = Env(cfg, np.random.SeedSequence([seed, ep]))
            obs = env.reset()
            act_rng = np.random.default_rng([seed, ep])
            while not env.done:
                if agents:
                    _, _, orders, recs = joint_actions(agents, obs[None], cfg, act_rng, True)
                    action = JointAction(orders[0], recs[0])
                else:
                    action = JointAction(np.full(cfg.num_products, float(args.order)),
                                         np.full((cfg.num_products, cfg.num_customers), float(args.rec)))
                t = env.state.t
                out = env.step(action)
                rows.extend(trajectory_rows(seed, ep, t, out))
                obs = env.observe()
    write_trajectory_csv(rows, args.out)
    return EXIT_OK


def cmd_analytic(args) -> int:
    base = analytic.SinglePeriodInstance(args.p, args.h, args.b, args.r, args.cap, (args.r0, args.r0))
    rme = np.linspace(args.rme_min, args.rme_max, args.points)
    rmp = np.linspace(0.0, base.critical, args.points)
    rows = analytic.regime_map(base, rme, rmp, args.step)
    header = list(rows[0])
    _write_rows(args.out, header, [[row[k] for k in header] for row in rows])
    if not args.checks:
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    report, failed = [], 0
    for k in range(args.checks):
        inst = analytic.TwoPeriodInstance(p=rng.uniform(1, 60), h=rng.uniform(0.05, 2), b=rng.uniform(0, 1),
                                          r=rng.uniform(0, 1), decay=rng.uniform(0.1, 0.95),
                                          cap=rng.uniform(0.5, 4), r0=0.0)
        inst = replace(inst, r0=rng.uniform(0, inst.cap))
        for budget in (1, 2):
            c = analytic.smoothing_monotonicity_check(inst, budget, args.step)
            report.append([k, f"smoothing_budget_{budget}", int(c.applicable), int(c.passed), c.reason])
            failed += c.applicable and not c.passed
        c = analytic.adaptive_ordering_check(inst, rng.uniform(0, 2 * inst.cap))
        report.append([k, "adaptive_ordering", int(c.applicable), int(c.passed), c.reason])
        failed += c.applicable and not c.passed
    _write_rows(Path(args.out).with_suffix(".checks.csv"), ["instance", "check", "applicable", "passed", "reason"],
                report)
    return EXIT_CHECK if failed else EXIT_OK


def cmd_sa(args) -> int:
    inst = analytic.SinglePeriodInstance(args.p, args.h, args.b, args.r, args.cap, tuple(args.r0), args.q_max)
    fast = sa.StepSchedule(args.eps_fast, args.p_fast, args.iterations)
    slow = sa.StepSchedule(args.eps_slow, args.p_slow, args.iterations)
    state = sa.run_sa(inst, fast, slow, args.iterations, args.batch, args.seed, args.record_every)
    _write_rows(args.out, sa.TRACE_COLUMNS, state.trace)
    return EXIT_OK


def cmd_train(args) -> int:
    seed = parse_seeds(args.seed)[0]
    spec = experiment_from_args(args, [seed])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    trainer = Trainer(spec.env, spec.trainer, seed, spec.perturbations, harness._load_warm_start(spec.warm_start))
    result = trainer.train()
    rows = [[p.iteration, *harness.aggregate_ci(p.metrics.total_profit)] for p in result.evals]
    _write_rows(out / "learning_curve.csv", ("iteration", "mean_eval_profit", "ci_low", "ci_high"), rows)
    trainer.save(out / "checkpoint")
    manifest = {"config": spec.to_dict(), "config_hash": harness.content_hash(spec.to_dict()), "seed": seed,
                "wall_time": time.perf_counter() - start, "diverged": result.diverged,
                "divergence": result.divergence, "iterations_done": result.iterations_done}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if result.diverged:
        print(f"training diverged: {result.divergence}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    networks, meta = nn.load_checkpoint(args.checkpoint)
    agents, _ = split_networks(networks)
    env_cfg = env_from_file(args.config)
    rows = []
    for seed in parse_seeds(args.seeds):
        m = evaluate_policy(env_cfg, agents, args.episodes, not args.stochastic, seed)
        for ep in range(args.episodes):
            rows.append([seed, ep, m.total_profit[ep], m.inventory_cost[ep], m.marketing_revenue[ep]])
    _write_rows(args.out, ("seed", "episode", "total_profit", "inventory_cost", "marketing_revenue"), rows)
    return EXIT_OK


def cmd_sweep(args) -> int:
    seeds = parse_seeds(args.seeds)
    algorithms = args.algorithms.split(",") if args.algorithms else [args.algorithm or "MTMA"]
    scenarios = args.scenarios.split(",") if args.scenarios else [args.scenario or "cooperative"]
    results = {}
    for alg in algorithms:
        for sc in scenarios:
            args.algorithm, args.scenario = alg, sc
            spec = experiment_from_args(args, seeds)
            results[(alg, sc)] = harness.run_experiment(spec)
    harness.export(list(results.values()), args.out)
    diverged = any(r.divergences for r in results.values())
    if args.check:
        main = results.get(("MTMA", "cooperative"))
        if main is None:
            raise ConfigError("check", "checks need the MTMA cooperative sweep")
        checks = harness.efficacy_checks(main, results.get(("STMA_S", "cooperative")),
                                         results.get(("MTMA", "isolated")))
        for c in checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
        if not all(c.passed for c in checks):
            return EXIT_CHECK
    return EXIT_DIVERGED if diverged else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds_default="0"):
        p.add_argument("--config", help="JSON config (environment, or experiment with env/trainer keys)")
        p.add_argument("--seeds", "--seed", dest="seeds", default=seeds_default, help="e.g. 3, 0-19 or 0,4,7")
        p.add_argument("--out", required=True, help="output file or directory")

    p = sub.add_parser("simulate", help="roll out a fixed or checkpointed policy and dump a trajectory CSV")
    common(p)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--checkpoint", help="checkpoint directory; default is a constant policy")
    p.add_argument("--order", type=float, default=1.0, help="constant order per product")
    p.add_argument("--rec", type=float, default=0.0, help="constant recommendation intensity")
    p.set_defaults(func=cmd_simulate)

    def instance(p):
        p.add_argument("--p", type=float, default=2.0)
        p.add_argument("--h", type=float, default=0.5)
        p.add_argument("--b", type=float, default=0.5)
        p.add_argument("--r", type=float, default=0.2)
        p.add_argument("--cap", type=float, default=4.0)

    p = sub.add_parser("analytic", help="regime map over (RME, RMP) and optional structural checks")
    instance(p)
    p.add_argument("--r0", type=float, default=0.0, help="product 1 initial willingness")
    p.add_argument("--rme-min", type=float, default=-2.0)
    p.add_argument("--rme-max", type=float, default=2.0)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--checks", type=int, default=0, help="number of random two-period instances to check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("sa", help="two-timescale stochastic approximation trace")
    instance(p)
    p.add_argument("--r0", type=float, nargs=2, default=(1.0, -1.0))
    p.add_argument("--q-max", type=float, default=2.0)
    p.add_argument("--eps-fast", type=float, default=0.05)
    p.add_argument("--p-fast", type=float, default=0.7)
    p.add_argument("--eps-slow", type=float, default=0.01)
    p.add_argument("--p-slow", type=float, default=0.9)
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--record-every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sa)

    def training(p):
        p.add_argument("--scenario")
        p.add_argument("--algorithm")
        p.add_argument("--iterations", type=int)

    p = sub.add_parser("train", help="train one seed; writes curve, checkpoint and manifest")
    p.add_argument("--config")
    p.add_argument("--seed", default="0")
    p.add_argument("--out", required=True)
    training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="replicate over seeds, algorithms and scenarios; export CSVs")
    common(p, "0-19")
    training(p)
    p.add_argument("--algorithms", help="comma list, overrides --algorithm")
    p.add_argument("--scenarios", help="comma list, overrides --scenario")
    p.add_argument("--check", action="store_true", help="apply the directional training checks")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
