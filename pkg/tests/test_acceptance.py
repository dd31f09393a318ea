"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (10 to 12) share one set of sweeps built once per
session. On a single core they take a few hours; set INVREC_WORKERS to spread
replications over processes.
"""

import math
import time
import warnings

import numpy as np
import pytest

from conftest import record_verdict
from invrec import harness, nn
from invrec.analytic import (ORDER_LATTICE, SinglePeriodInstance, TwoPeriodInstance, adaptive_ordering_check,
                             choice_probs, exact_expected_profit_sp, grid_argmax_sp, optimal_alpha_given_q,
                             optimal_q_given_alpha, r_plus, relative_metrics, smoothing_monotonicity_check,
                             two_period_enumeration, two_period_expected_profit)
from invrec.env import DemandModel, Economics, EnvConfig, JointAction, Perturbation, choice_probabilities
from invrec.env import reset as env_reset
from invrec.env import step as env_step
from invrec.harness import ExperimentSpec, efficacy_checks, export, perturbation_probe, run_experiment
from invrec.marl import TrainerConfig, clipped_surrogate_grad, gae, reweight_advantage
from invrec.sa import StepSchedule, draw_demand, lr_grad_alpha, pathwise_grad_q, realized_profit, run_sa
from oracles import gae_reference, network_gradient_error

GRID = 1e-3
SA_FIXTURE = SinglePeriodInstance(p=2.0, h=0.5, b=0.5, r=0.2, cap=4.0, r0=(1.0, -1.0), q_max=2.0)
SEEDS = tuple(range(20))
ITERATIONS = 300


def random_sp(rng, q_max=1.5):
    cap = rng.uniform(1, 5)
    return SinglePeriodInstance(rng.uniform(0.5, 4), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.01, 1.5),
                                cap, tuple(rng.uniform(-2, cap * 0.9, 2)), q_max=q_max)


def advantaged_metrics(inst, q):
    """Relative metrics seen from the product with the profitability edge."""
    m = relative_metrics(inst, q)
    if m.rmp >= 0:
        return m
    return relative_metrics(inst.mirrored(), np.asarray(q)[::-1])


# ---------------------------------------------------------------------------
# 1-3: exact single- and two-period benchmarks


def test_criterion_01_closed_form_matches_grid():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, misses, zero_cases, zero_bad = 0.0, 0, 0, 0
    for _ in range(200):
        inst = random_sp(rng)
        q = rng.uniform(0, 1.5, 2)
        alpha, _ = optimal_alpha_given_q(inst, q, GRID)
        grid, _ = grid_argmax_sp(inst, q, GRID)
        gap = float(np.max(np.abs(alpha - grid)))
        worst = max(worst, gap)
        misses += gap > GRID + 1e-12
        m = advantaged_metrics(inst, q)
        if m.rmp <= 4 * m.zeta:
            zero_cases += 1
            zero_bad += not (alpha[0] == 0.0 and alpha[1] == 0.0)
    elapsed = time.perf_counter() - start
    ok = misses == 0 and zero_bad == 0 and zero_cases > 0 and elapsed < 30
    record_verdict(1, ok, f"200 instances, max |closed form - grid| {worst:.2e} ({misses} beyond one step); "
                          f"{zero_cases} no-recommendation cases, {zero_bad} non-zero; {elapsed:.1f}s")
    assert ok


def _exhaustive_orders(inst, alpha):
    values = {q: float(exact_expected_profit_sp(inst, q, alpha)) for q in [(0, 0), (0, 1), (1, 0), (1, 1)]}
    best = max(values.values())
    ties = [q for q, v in values.items() if v >= best - 1e-12 * max(1.0, abs(best))]
    return max(ties, key=sum)


def test_criterion_02_fractile_matches_exhaustive():
    rng = np.random.default_rng(2)
    agree = 0
    for _ in range(200):
        inst = random_sp(rng, q_max=1.0)
        alpha = rng.uniform(0, 1, 2)
        q = optimal_q_given_alpha(inst, alpha)
        agree += tuple(int(x) for x in q) == _exhaustive_orders(inst, alpha)
    record_verdict(2, agree == 200, f"{agree}/200 instances agree with exhaustive search")
    assert agree == 200


def test_criterion_03_two_period_formula_and_structure():
    rng = np.random.default_rng(3)
    worst = 0.0
    smooth_applied = smooth_failed = adapt_applied = adapt_failed = 0
    for _ in range(500):
        cap, b, h = rng.uniform(0.2, 3), rng.uniform(0, 1), rng.uniform(0, 1)
        p = max(b * math.exp(cap) - h, 0.0) + rng.uniform(-0.5, 3)
        inst = TwoPeriodInstance(max(p, 0.0), h, b, rng.uniform(0, 2), rng.uniform(0.1, 0.95), cap,
                                 rng.uniform(-3, cap))
        q = ORDER_LATTICE[int(rng.integers(len(ORDER_LATTICE)))]
        alpha = rng.uniform(0, 1, 2)
        worst = max(worst, abs(two_period_expected_profit(inst, q, alpha) - two_period_enumeration(inst, q, alpha)))
        budget = int(rng.integers(1, 3))
        rep = smoothing_monotonicity_check(inst, budget, GRID)
        smooth_applied += rep.applicable
        smooth_failed += rep.applicable and not rep.passed
        if h > 0:
            total = 2 * r_plus(inst.p, h, b) + rng.uniform(-1, 6) if inst.p >= h + b * b / h else 0.0
            rep = adaptive_ordering_check(inst, total)
            adapt_applied += rep.applicable
            adapt_failed += rep.applicable and not rep.passed
    ok = worst <= 1e-10 and smooth_failed == 0 and adapt_failed == 0 and smooth_applied > 0 and adapt_applied > 0
    record_verdict(3, ok, f"max |indicator - enumeration| {worst:.1e} on 500; smoothing {smooth_failed} failed of "
                          f"{smooth_applied} applicable; adaptive ordering {adapt_failed} failed of {adapt_applied}")
    assert ok


# ---------------------------------------------------------------------------
# 4-5: stochastic approximation


def test_criterion_04_estimators_unbiased():
    rng = np.random.default_rng(4)
    fd = 1e-5
    checks = worst = 0
    failures = []
    for k in range(20):
        inst = random_sp(rng, q_max=1.0)
        q = rng.uniform(0.05, 0.95, 2)
        alpha = rng.uniform(0.05, 0.95, 2)
        r0 = np.asarray(inst.r0)
        gamma = choice_probs(r0 + (inst.cap - r0) * alpha)
        d = draw_demand(gamma, 100_000, rng)
        gq = pathwise_grad_q(d, q, inst)
        ga = lr_grad_alpha(d, gamma, realized_profit(d, q, inst), inst)
        for i in range(2):
            e = np.eye(2)[i] * fd
            dq = (exact_expected_profit_sp(inst, q + e, alpha) - exact_expected_profit_sp(inst, q - e, alpha)) / (2 * fd)
            da = (exact_expected_profit_sp(inst, q, alpha + e) - exact_expected_profit_sp(inst, q, alpha - e)) / (2 * fd)
            for name, samples, target in (("q", gq[:, i], dq), ("alpha", ga[:, i], da)):
                se = samples.std(ddof=1) / math.sqrt(len(samples))
                z = abs(samples.mean() - target) / max(se, 1e-12)
                worst = max(worst, z)
                checks += 1
                if abs(samples.mean() - target) > 3 * se + 1e-9:
                    failures.append((k, name, i, round(z, 2)))
    record_verdict(4, not failures, f"{checks - len(failures)}/{checks} means within 3 SE, worst {worst:.2f} SE")
    assert not failures


def test_criterion_05_two_timescale_converges():
    n = 20_000
    start = time.perf_counter()
    state = run_sa(SA_FIXTURE, StepSchedule(0.05, 0.7, n), StepSchedule(0.01, 0.9, n), n, batch=16, seed=0)
    elapsed = time.perf_counter() - start
    response = optimal_q_given_alpha(SA_FIXTURE, state.alpha)
    alpha_star, _ = optimal_alpha_given_q(SA_FIXTURE, response)
    alpha_gap = float(np.max(np.abs(state.alpha - alpha_star)))
    q_gap = float(np.max(np.abs(state.q - response)))
    ok = alpha_gap <= 0.02 and q_gap <= 0.05 and elapsed < 60
    record_verdict(5, ok, f"alpha {np.round(state.alpha, 4)} vs optimum {np.round(alpha_star, 4)} "
                          f"(gap {alpha_gap:.4f}); q {np.round(state.q, 4)} vs fractile {response} "
                          f"(gap {q_gap:.4f}); {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6-8: networks and the policy update


def test_criterion_06_network_gradients():
    rng = np.random.default_rng(6)
    errors = [network_gradient_error(rng) for _ in range(50)]
    head = nn.init_gaussian_head((2, 3, 1), rng)
    head.log_std[:] = -0.7
    x = rng.standard_normal(2)
    mu = float(nn.predict(head.mean, x)[0])
    sd = math.exp(-0.7)
    grid = np.linspace(mu - 12 * sd, mu + 12 * sd, 200_001)
    dens = np.exp(nn.gaussian_logprob(head, np.repeat(x[None], len(grid), 0), grid[:, None]))
    mass = float(np.sum((dens[1:] + dens[:-1]) / 2 * np.diff(grid)))
    ok = max(errors) <= 1e-4 and abs(mass - 1) <= 1e-6
    record_verdict(6, ok, f"max relative gradient error {max(errors):.1e} over 50 nets; "
                          f"density mass {mass:.9f}")
    assert ok


def test_criterion_07_advantage_identities():
    rng = np.random.default_rng(7)
    worst = {"td": 0.0, "telescope": 0.0, "reference": 0.0}
    for _ in range(100):
        T = int(rng.integers(2, 40))
        r, v = rng.standard_normal(T), rng.standard_normal(T)
        d = rng.random(T) < 0.1
        d[-1] = True
        disc, lam = rng.uniform(0.5, 1), rng.uniform(0, 1)
        nxt = np.where(d, 0.0, np.append(v[1:], 0.0))
        worst["td"] = max(worst["td"], np.max(np.abs(gae(r, v, d, disc, 0.0)[0] - (r + disc * nxt - v))))
        ret, run = np.zeros(T), 0.0
        for k in range(T - 1, -1, -1):
            run = r[k] + (0.0 if d[k] else disc * run)
            ret[k] = run
        worst["telescope"] = max(worst["telescope"], np.max(np.abs(gae(r, v, d, disc, 1.0)[0] - (ret - v))))
        worst["reference"] = max(worst["reference"],
                                 np.max(np.abs(gae(r, v, d, disc, lam)[0] - gae_reference(r, v, d, disc, lam))))
    ok = max(worst.values()) <= 1e-12
    record_verdict(7, ok, "max deviations " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_criterion_08_clip_and_reweight():
    rng = np.random.default_rng(8)
    head = nn.init_gaussian_head((4, 6, 2), rng)
    obs, raw = rng.standard_normal((4, 4)), rng.standard_normal((4, 2))
    logp = nn.gaussian_logprob(head, obs, raw)
    # ratio above 1+eps with positive advantage and below 1-eps with negative
    # advantage are clipped; the mirrored cases are not
    logp_old = logp - np.log([1.5, 0.5, 1.5, 0.5])
    adv = np.array([1.0, -1.0, -1.0, 1.0])
    _, active = clipped_surrogate_grad(head, obs, raw, adv, logp_old, 0.2)
    singles = []
    for k in range(4):
        g, _ = clipped_surrogate_grad(head, obs[k:k + 1], raw[k:k + 1], adv[k:k + 1], logp_old[k:k + 1], 0.2)
        singles.append(all(not a.any() for a in g.arrays()))
    clip_ok = active.tolist() == [False, False, True, True] and singles == [True, True, False, False]
    a = rng.standard_normal(50)
    lp = rng.standard_normal(50)
    neutral_ok = np.array_equal(reweight_advantage(a, lp, lp), a)
    ok = clip_ok and neutral_ok
    record_verdict(8, ok, f"clip active flags {active.tolist()}, zero-gradient singles {singles}; "
                          f"ratio-one reweighting {'unchanged' if neutral_ok else 'changed'}")
    assert ok


# ---------------------------------------------------------------------------
# 9: simulator invariants


def test_criterion_09_environment_invariants():
    rng = np.random.default_rng(9)
    steps = capped = 0
    bad = {"complementarity": 0, "net_inventory": 0, "willingness": 0, "softmax": 0, "lost_sales": 0}
    variants = ("softmax_categorical", "multinomial", "poisson", "exponential")
    while steps < 100_000:
        cfg = EnvConfig(num_products=int(rng.integers(1, 5)), num_customers=int(rng.integers(1, 9)), horizon=50,
                        lead_time=int(rng.integers(0, 4)), decay=rng.uniform(0.05, 0.99),
                        willingness_cap=rng.uniform(0.5, 8),
                        demand_model=DemandModel(variants[int(rng.integers(4))], rng.uniform(0.2, 3),
                                                 int(rng.integers(1, 4))),
                        fulfillment="lost_sales" if rng.random() < 0.5 else "backlog",
                        econ=Economics())
        state = env_reset(cfg, rng)
        n, m = cfg.num_products, cfg.num_customers
        for _ in range(cfg.horizon):
            action = JointAction(rng.uniform(0, cfg.order_cap, n), rng.random((n, m)))
            out = env_step(cfg, state, action, rng)
            new = out.new_state
            bad["complementarity"] += bool(np.any(new.on_hand * new.backlog != 0))
            expected = state.on_hand - state.backlog + out.arrived - out.demand
            if cfg.fulfillment == "backlog":
                # unmet demand beyond the backlog ceiling is dropped
                owed = np.minimum(np.maximum(-expected, 0.0), cfg.backlog_cap)
                capped += bool(np.any(-expected > cfg.backlog_cap))
                bad["net_inventory"] += not np.allclose(new.on_hand - new.backlog,
                                                        np.maximum(expected, 0.0) - owed, atol=1e-9)
            else:
                bad["net_inventory"] += not np.allclose(new.on_hand, np.maximum(expected, 0.0), atol=1e-9)
                bad["lost_sales"] += bool(np.any(new.backlog != 0))
            bad["willingness"] += bool(np.any(new.willingness < 0) or np.any(new.willingness > cfg.willingness_cap))
            bad["softmax"] += not np.allclose(choice_probabilities(new.willingness).sum(axis=0), 1.0, atol=1e-12)
            state = new
            steps += 1
    ok = not any(bad.values())
    record_verdict(9, ok, f"{steps} steps ({capped} at the backlog ceiling), violations "
                          + ", ".join(f"{k} {v}" for k, v in bad.items()))
    assert ok


# ---------------------------------------------------------------------------
# 10-12: training sweeps


def _sweep_specs():
    env = EnvConfig(num_products=2, num_customers=5, horizon=50)
    trainer = TrainerConfig(iterations=ITERATIONS)
    return {
        "main": ExperimentSpec("cooperative", "MTMA", env, trainer, seeds=SEEDS),
        "single": ExperimentSpec("cooperative", "STMA_S", env, trainer, seeds=SEEDS),
        "isolated": ExperimentSpec("isolated", "MTMA", env, trainer, seeds=SEEDS),
    }


def _run_sweeps(keep_networks):
    start = time.perf_counter()
    results = {k: run_experiment(spec, keep_networks=keep_networks and k == "main")
               for k, spec in _sweep_specs().items()}
    return results, time.perf_counter() - start


@pytest.fixture(scope="session")
def sweeps():
    return _run_sweeps(keep_networks=True)


@pytest.mark.slow
def test_criterion_10_training_efficacy(sweeps):
    results, elapsed = sweeps
    checks = efficacy_checks(results["main"], results["single"], results["isolated"])
    divergences = {k: r.divergences for k, r in results.items() if r.divergences}
    ok = all(c.passed for c in checks)
    detail = "; ".join(f"{c.name} {'ok' if c.passed else 'failed'} ({c.detail})" for c in checks)
    record_verdict(10, ok, f"{detail}; divergences {divergences or 'none'}; {elapsed / 60:.1f} min for "
                           f"{3 * len(SEEDS)} runs on {harness.worker_count()} worker(s)")
    assert ok


@pytest.mark.slow
def test_criterion_11_behavioral_probes(sweeps):
    results, _ = sweeps
    record = results["main"].records[0]
    agents = {k: v for k, v in record.networks.items() if not k.startswith("critic_")}
    env = results["main"].spec.env
    demand = perturbation_probe(env, agents, Perturbation("demand", 2.0, 10), seed=0)
    willing = perturbation_probe(env, agents, Perturbation("willingness", 2.0, 10), seed=0)
    ok = demand.extreme <= -0.2 and willing.extreme >= 0.2
    detail = (f"seed {record.seed} checkpoint: demand shock min lagged corr {demand.extreme:+.3f} (want <= -0.2), "
              f"willingness shock max lagged corr {willing.extreme:+.3f} (want >= +0.2)")
    record_verdict(11, ok, detail, soft=True)
    if not ok:
        warnings.warn(f"behavioral probe outside the expected direction: {detail}")


@pytest.mark.slow
def test_criterion_12_determinism(sweeps, tmp_path):
    first, _ = sweeps
    second, elapsed = _run_sweeps(keep_networks=False)
    a = export(list(first.values()), tmp_path / "first")["metrics"].read_bytes()
    b = export(list(second.values()), tmp_path / "second")["metrics"].read_bytes()
    ok = a == b
    record_verdict(12, ok, f"metrics CSV {len(a)} bytes, repeat {'identical' if ok else 'differs'} "
                           f"({elapsed / 60:.1f} min)")
    assert ok
