"""Experiment orchestration: replications, aggregation, probes and export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, nn
from .env import EnvConfig, Env, JointAction, Perturbation, StepOutcome, config_from_dict, config_to_dict, fmt, observe
from .errors import ConfigError
from .marl import (ALGORITHMS, SCENARIOS, EvalMetrics, Trainer, TrainerConfig, agent_channels, joint_actions,
                   reward_channels, trainer_config_from_dict, trainer_config_to_dict)

WORKERS_ENV = "INVREC_WORKERS"

METRICS_COLUMNS = ("run_id", "seed", "scenario", "algorithm", "iteration", "total_profit", "inventory_cost",
                   "marketing_revenue")
CURVE_COLUMNS = ("run_id", "seed", "scenario", "algorithm", "iteration", "mean_eval_profit", "ci_low", "ci_high")
SUMMARY_COLUMNS = ("scenario", "algorithm", "metric", "mean", "ci_low", "ci_high", "replications", "diverged")


@dataclass
class ExperimentSpec:
    scenario: str = "cooperative"
    algorithm: str = "MTMA"
    env: EnvConfig = field(default_factory=EnvConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    perturbations: tuple = ()
    seeds: tuple = tuple(range(20))
    warm_start: str | None = None
    name: str = ""

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"must be one of {SCENARIOS}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds", "must be a non-empty list of distinct integers")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.trainer = replace(self.trainer, scenario=self.scenario, algorithm=self.algorithm)
        self.perturbations = tuple(self.perturbations)

    @property
    def label(self) -> str:
        return self.name or f"{self.algorithm}-{self.scenario}"

    def to_dict(self) -> dict:
        return {
            "name": self.name, "scenario": self.scenario, "algorithm": self.algorithm,
            "env": config_to_dict(self.env), "trainer": trainer_config_to_dict(self.trainer),
            "perturbations": [asdict(p) for p in self.perturbations], "seeds": list(self.seeds),
            "warm_start": self.warm_start,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        env = config_from_dict(data.pop("env", {}))
        trainer = trainer_config_from_dict(data.pop("trainer", {}))
        perts = tuple(Perturbation(**p) for p in data.pop("perturbations", []))
        seeds = tuple(data.pop("seeds", range(20)))
        known = {"name", "scenario", "algorithm", "warm_start"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown experiment key")
        return cls(env=env, trainer=trainer, perturbations=perts, seeds=seeds, **data)


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    scenario: str
    algorithm: str
    iteration: int
    total_profit: float
    inventory_cost: float
    marketing_revenue: float


@dataclass
class RunRecord:
    run_id: str
    seed: int
    scenario: str
    algorithm: str
    evals: list            # (iteration, EvalMetrics)
    diverged: bool
    divergence: str
    wall_time: float
    networks: dict = field(default_factory=dict)

    @property
    def final(self) -> EvalMetrics:
        return self.evals[-1][1]

    def eval_at(self, iteration: int) -> EvalMetrics:
        for it, m in self.evals:
            if it == iteration:
                return m
        raise KeyError(iteration)


@dataclass
class RunSummary:
    metric: str
    mean: float
    low: float
    high: float
    replications: int


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list
    summaries: list

    @property
    def divergences(self) -> list:
        return [(r.seed, r.divergence) for r in self.records if r.diverged]


# ---------------------------------------------------------------------------
# Rewards and statistics


def departmental_reward(outcome: StepOutcome, scenario: str, agent: str, econ) -> float:
    """Reward stream that ``agent`` ("q" or "alpha") optimizes under ``scenario``."""
    if scenario not in SCENARIOS:
        raise ConfigError("scenario", f"unknown scenario {scenario!r}")
    channel = agent_channels(scenario, [agent])[agent]
    return reward_channels(outcome, econ)[channel]


def aggregate_ci(values) -> tuple:
    """Mean with a normal-approximation 95% interval (sample standard deviation)."""
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty sample")
    mean = float(v.mean())
    if v.size == 1:
        return mean, mean, mean
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean, mean - half, mean + half


def pearson(x, y) -> tuple:
    """Correlation and a flag that is True when either series is constant (value 0 then)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        return 0.0, True
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0)), False


def correlation_block(a: np.ndarray, b: np.ndarray) -> tuple:
    """Pairwise correlations between the columns of ``a`` and ``b``."""
    out = np.zeros((a.shape[1], b.shape[1]))
    flags = np.zeros_like(out, dtype=bool)
    for i in range(a.shape[1]):
        for k in range(b.shape[1]):
            out[i, k], flags[i, k] = pearson(a[:, i], b[:, k])
    return out, flags


@dataclass
class PeriodRecord:
    t: int
    before: object          # EnvState at decision time
    orders: np.ndarray
    recs: np.ndarray
    outcome: StepOutcome


def rollout_trajectory(env_config: EnvConfig, agents: dict, seed: int = 0,
                       perturbations: Sequence[Perturbation] = (), deterministic: bool = True) -> list:
    """One episode under the given agents, kept period by period."""
    env = Env(env_config, seed, perturbations)
    obs = env.reset()
    rng = np.random.default_rng(seed)
    records = []
    while not env.done:
        before = env.state
        _, _, orders, recs = joint_actions(agents, obs[None, :], env_config, rng, deterministic)
        out = env.step(JointAction(orders[0], recs[0]))
        records.append(PeriodRecord(before.t, before, orders[0], recs[0], out))
        obs = observe(out.new_state, env_config)
    return records


@dataclass
class BehaviorReport:
    net_inventory: np.ndarray      # (T, N)
    rec_intensity: np.ndarray      # (T, N)
    inv_inv: np.ndarray
    rec_rec: np.ndarray
    inv_rec: np.ndarray
    constant_flags: dict
    rme: np.ndarray                # (T, N, M)
    rmp: np.ndarray                # (T, N)


def behavioral_stats(records: Sequence[PeriodRecord], willingness_cap: float) -> BehaviorReport:
    """Net inventory and recommendation intensity series with their correlations."""
    if len(records) < 2:
        raise ValueError("need at least two periods")
    net = np.array([r.outcome.new_state.on_hand + r.outcome.new_state.pipeline.sum(axis=1)
                    - r.outcome.new_state.backlog for r in records])
    rec = np.array([r.recs.sum(axis=1) for r in records])
    ii, fi = correlation_block(net, net)
    rr, fr = correlation_block(rec, rec)
    ir, fx = correlation_block(net, rec)
    for block, flags in ((ii, fi), (rr, fr)):
        for k in range(block.shape[0]):
            if not flags[k, k]:
                block[k, k] = 1.0
    gap = np.array([willingness_cap - r.before.willingness for r in records])       # (T, N, M)
    rme = gap - (gap.sum(axis=1, keepdims=True) - gap)
    stock = np.array([r.before.on_hand for r in records])                           # (T, N)
    rmp = stock - (stock.sum(axis=1, keepdims=True) - stock)
    return BehaviorReport(net, rec, ii, rr, ir, {"inv_inv": fi, "rec_rec": fr, "inv_rec": fx}, rme, rmp)


@dataclass
class ProbeReport:
    target: str
    lags: np.ndarray
    correlations: np.ndarray       # averaged over products, one per lag
    extreme: float                 # most negative (demand) or most positive (willingness)
    constant: bool
    warnings: list = field(default_factory=list)


def lagged_correlations(signal: np.ndarray, response: np.ndarray, max_lag: int) -> tuple:
    """corr(signal[t], response[t + k]) for k = 0..max_lag, averaged over columns."""
    lags = np.arange(max_lag + 1)
    out = np.zeros(len(lags))
    constant = False
    T = signal.shape[0]
    for k in lags:
        vals = []
        for i in range(signal.shape[1]):
            c, flag = pearson(signal[: T - k, i], response[k:, i])
            constant |= flag
            vals.append(c)
        out[k] = float(np.mean(vals))
    return lags, out, constant


def perturbation_probe(env_config: EnvConfig, agents: dict, pert: Perturbation, periods: int = 200,
                       burn_in: int = 20, seed: int = 0, max_lag: int | None = None,
                       trained: bool = True) -> ProbeReport:
    """Response of a deterministic policy to a sinusoidal shock.

    Demand shocks are compared with recommendation intensity; willingness
    shocks with the orders placed over the following lead-time window.
    """
    notes = []
    if not trained:
        notes.append("probe run on an untrained policy")
        warnings.warn(notes[-1])
    cfg = replace(env_config, horizon=burn_in + periods)
    records = rollout_trajectory(cfg, agents, seed, [pert], deterministic=True)
    n = cfg.num_products
    signal = np.array([[pert.signal(r.t, i) for i in range(n)] for r in records])
    if pert.target == "demand":
        response = np.array([r.recs.sum(axis=1) for r in records])
    else:
        orders = np.array([r.orders for r in records])
        window = max(cfg.lead_time, 1)
        start = 1 if cfg.lead_time > 0 else 0
        response = np.zeros_like(orders)
        for t in range(len(orders)):
            response[t] = orders[t + start: t + start + window].sum(axis=0)
    signal, response = signal[burn_in:], response[burn_in:]
    max_lag = pert.period_len if max_lag is None else max_lag
    lags, corr, constant = lagged_correlations(signal, response, max_lag)
    extreme = float(corr.min() if pert.target == "demand" else corr.max())
    return ProbeReport(pert.target, lags, corr, extreme, constant, notes)


# ---------------------------------------------------------------------------
# Running experiments


def _load_warm_start(path):
    if not path:
        return None
    networks, _ = nn.load_checkpoint(path)
    return networks


def run_replication(spec: ExperimentSpec, seed: int, keep_networks: bool = False) -> RunRecord:
    start = time.perf_counter()
    trainer = Trainer(spec.env, spec.trainer, seed, spec.perturbations, _load_warm_start(spec.warm_start))
    result = trainer.train()
    evals = [(p.iteration, p.metrics) for p in result.evals]
    networks = trainer.networks() if keep_networks else {}
    return RunRecord(f"{spec.label}-s{seed}", seed, spec.scenario, spec.algorithm, evals, result.diverged,
                     result.divergence, time.perf_counter() - start, networks)


def _replicate(args):
    spec, seed, keep = args
    return run_replication(spec, seed, keep)


def worker_count(default: int = 1) -> int:
    value = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(value)) if value else default
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"must be an integer, got {value!r}")


def summarize(records: Sequence[RunRecord]) -> list:
    """Aggregate final metrics over replications in seed order."""
    ordered = sorted(records, key=lambda r: r.seed)
    out = []
    for metric in ("total_profit", "inventory_cost", "marketing_revenue"):
        values = [float(np.mean(getattr(r.final, metric))) for r in ordered]
        mean, low, high = aggregate_ci(values)
        out.append(RunSummary(metric, mean, low, high, len(values)))
    return out


def run_experiment(spec: ExperimentSpec, workers: int | None = None, keep_networks: bool = False) -> ExperimentResult:
    """Train every seed of ``spec`` and aggregate; divergent runs are kept and reported."""
    workers = worker_count() if workers is None else workers
    jobs = [(spec, s, keep_networks) for s in spec.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate, jobs))
    else:
        records = [_replicate(j) for j in jobs]
    records.sort(key=lambda r: r.seed)
    return ExperimentResult(spec, records, summarize(records))


# ---------------------------------------------------------------------------
# Export


def content_hash(data: dict) -> str:
    """Git blob hash of the canonical JSON text of ``data``."""
    body = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def metrics_rows(result: ExperimentResult) -> list:
    rows = []
    for rec in result.records:
        for it, m in rec.evals:
            rows.append(MetricsRow(rec.run_id, rec.seed, rec.scenario, rec.algorithm, it,
                                   float(np.mean(m.total_profit)), float(np.mean(m.inventory_cost)),
                                   float(np.mean(m.marketing_revenue))))
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def export(results: Sequence[ExperimentResult], out_dir) -> dict:
    """Write metrics, learning curves, summaries and a manifest; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric_rows, curve_rows, summary_rows = [], [], []
    for res in results:
        for r in metrics_rows(res):
            metric_rows.append([r.run_id, r.seed, r.scenario, r.algorithm, r.iteration, r.total_profit,
                                r.inventory_cost, r.marketing_revenue])
        for rec in res.records:
            for it, m in rec.evals:
                mean, low, high = aggregate_ci(m.total_profit)
                curve_rows.append([rec.run_id, rec.seed, rec.scenario, rec.algorithm, it, mean, low, high])
        n_div = len(res.divergences)
        for s in res.summaries:
            summary_rows.append([res.spec.scenario, res.spec.algorithm, s.metric, s.mean, s.low, s.high,
                                 s.replications, n_div])
    paths = {"metrics": out / "metrics.csv", "curves": out / "learning_curves.csv",
             "summary": out / "summary.csv", "manifest": out / "manifest.json"}
    _write_csv(paths["metrics"], METRICS_COLUMNS, metric_rows)
    _write_csv(paths["curves"], CURVE_COLUMNS, curve_rows)
    _write_csv(paths["summary"], SUMMARY_COLUMNS, summary_rows)
    configs = [res.spec.to_dict() for res in results]
    manifest = {
        "experiments": configs,
        "config_hash": content_hash({"experiments": configs}),
        "seeds": sorted({s for res in results for s in res.spec.seeds}),
        "divergences": {res.spec.label: res.divergences for res in results},
        "versions": {"invrec": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Directional checks


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    detail: str


def early_mean(result: ExperimentResult, first: int = 10) -> float:
    """Mean evaluation profit over iterations 0..first-1, across seeds."""
    values = [m.mean_profit for r in result.records for it, m in r.evals if it < first]
    return float(np.mean(values))


def final_means(result: ExperimentResult) -> dict:
    return {r.seed: r.final.mean_profit for r in result.records}


def efficacy_checks(main: ExperimentResult, single_timescale: ExperimentResult | None = None,
                    isolated: ExperimentResult | None = None, improvement: float = 0.5,
                    paired_share: float = 0.8) -> list:
    """Learning, timescale and coordination orderings for a set of sweeps."""
    out = []
    start = early_mean(main)
    final = float(np.mean(list(final_means(main).values())))
    need = start + improvement * abs(start)
    out.append(CheckOutcome("improvement", final >= need,
                            f"final {final:.3f} vs early {start:.3f} (needs >= {need:.3f})"))
    if single_timescale is not None:
        a, b = final_means(main), final_means(single_timescale)
        seeds = sorted(set(a) & set(b))
        wins = sum(a[s] >= b[s] for s in seeds)
        need_wins = math.ceil(paired_share * len(seeds))
        out.append(CheckOutcome("paired_timescale", wins >= need_wins,
                                f"{wins}/{len(seeds)} paired seeds (needs {need_wins})"))
    if isolated is not None:
        coop = float(np.mean(list(final_means(main).values())))
        iso = float(np.mean(list(final_means(isolated).values())))
        out.append(CheckOutcome("coordination", coop > iso, f"cooperative {coop:.3f} vs isolated {iso:.3f}"))
    return out
