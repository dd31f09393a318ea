"""Exact benchmarks for the small coordination models.

Two toy models have exact solutions:

* one period, two products, one customer who buys exactly one unit of one
  product (``SinglePeriodInstance``);
* one product, two periods, a customer who buys at most one unit per period
  (``TwoPeriodInstance``).

The enumeration oracles in this module (``exact_expected_profit_sp``,
``two_period_enumeration``) are used as ground truth throughout the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateError, DomainError

REGIMES = ("no_rec_insufficient_rmp", "no_rec_inefficient", "rec_product_1",
           "rec_product_2", "boundary_numeric")

# (q1, q2) order pairs with at most one order per unit of possible demand
ORDER_LATTICE = ((0, 0), (0, 1), (0, 2), (1, 0), (1, 1))

ARTANH_CLIP = 1.0 - 1e-15


@dataclass(frozen=True)
class SinglePeriodInstance:
    p: float
    h: float
    b: float
    r: float
    cap: float
    r0: tuple
    q_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "r0", tuple(float(x) for x in self.r0))
        if len(self.r0) != 2:
            raise DomainError("r0 must have two entries")
        if min(self.p, self.h, self.b, self.r) < 0:
            raise DomainError("p, h, b, r must be non-negative")
        if self.cap <= 0 or self.q_max <= 0:
            raise DomainError("cap and q_max must be positive")
        if max(self.r0) > self.cap:
            raise DomainError("initial willingness cannot exceed the cap")

    @property
    def critical(self) -> float:
        return self.p + self.h + self.b

    def mirrored(self) -> "SinglePeriodInstance":
        return replace(self, r0=self.r0[::-1])


@dataclass(frozen=True)
class RelativeMetrics:
    rme: float
    rmp: float
    zeta: float


@dataclass(frozen=True)
class TwoPeriodInstance:
    p: float
    h: float
    b: float
    r: float
    decay: float
    cap: float
    r0: float

    def __post_init__(self):
        if min(self.p, self.h, self.b, self.r) < 0:
            raise DomainError("p, h, b, r must be non-negative")
        if not 0 < self.decay < 1:
            raise DomainError("decay must lie in (0, 1)")
        if self.cap <= 0:
            raise DomainError("cap must be positive")


@dataclass
class CheckReport:
    """Outcome of a structural check on one instance."""

    applicable: bool
    passed: bool
    reason: str = ""
    witnesses: list = field(default_factory=list)


def artanh(x: float) -> float:
    x = min(x, ARTANH_CLIP)
    return 0.5 * math.log((1.0 + x) / (1.0 - x))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# Single period, two products


def choice_probs(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    z = np.exp(r - r.max())
    return z / z.sum()


def _check_box(q, alpha, q_max):
    q = np.asarray(q, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(q < 0) or np.any(q > q_max):
        raise DomainError("orders must lie in [0, q_max]")
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise DomainError("recommendation intensities must lie in [0, 1]")
    return q, alpha


def exact_expected_profit_sp(inst: SinglePeriodInstance, q, alpha):
    """Expected profit by enumerating which product the customer buys.

    ``q`` and ``alpha`` have a trailing axis of length 2 and may carry extra
    leading axes, which are broadcast.
    """
    q, alpha = _check_box(q, alpha, inst.q_max)
    r0 = np.asarray(inst.r0)
    will = r0 + (inst.cap - r0) * alpha
    # probability that the customer picks product 1
    g1 = sigmoid(will[..., 0] - will[..., 1])
    probs = (g1, 1.0 - g1)
    total = 0.0
    for k in range(2):
        outcome = 0.0
        for i in range(2):
            d = 1.0 if i == k else 0.0
            qi = q[..., i]
            sold = np.minimum(d, qi)
            left = np.maximum(qi - sold, 0.0)
            short = np.maximum(d - sold, 0.0)
            outcome = outcome + inst.p * sold - inst.h * left - inst.b * short
        total = total + probs[k] * outcome
    return total - inst.r * (alpha[..., 0] + alpha[..., 1])


def optimal_q_given_alpha(inst: SinglePeriodInstance, alpha) -> np.ndarray:
    """Critical fractile orders; the larger quantity wins ties."""
    if inst.critical == 0:
        raise DegenerateError("p + h + b = 0 leaves the fractile undefined")
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise DomainError("recommendation intensities must lie in [0, 1]")
    if inst.h == 0:
        return np.full(2, float(inst.q_max))
    r0 = np.asarray(inst.r0)
    gamma = choice_probs(r0 + (inst.cap - r0) * alpha)
    ratio = inst.h / inst.critical
    return np.where(gamma >= ratio, min(1.0, inst.q_max), 0.0)


def relative_metrics(inst: SinglePeriodInstance, q) -> RelativeMetrics:
    if inst.r0[0] >= inst.cap:
        raise DegenerateError("product 1 willingness already at the cap; efficiency undefined")
    q = np.asarray(q, dtype=float)
    rme = inst.r0[1] - inst.r0[0]
    rmp = inst.critical * (max(1.0 - q[1], 0.0) - max(1.0 - q[0], 0.0))
    zeta = inst.r / (inst.cap - inst.r0[0])
    return RelativeMetrics(rme, rmp, zeta)


def _alpha_grid_argmax(inst, q, step):
    """Best intensity for product 1 on a grid, product 2 held at zero."""
    grid = _alpha_grid(step)
    alphas = np.stack([grid, np.zeros_like(grid)], axis=-1)
    values = exact_expected_profit_sp(inst, np.asarray(q, float), alphas)
    k = int(np.argmax(values))
    return float(grid[k]), float(values[k])


def _alpha_product_1(inst: SinglePeriodInstance, q, step: float):
    """Optimal intensities when product 1 has the profitability edge (RMP >= 0)."""
    m = relative_metrics(inst, q)
    if m.rmp <= 4.0 * m.zeta:
        return np.zeros(2), "no_rec_insufficient_rmp"
    sensitivity = m.rmp * math.exp(m.rme) / (1.0 + math.exp(m.rme)) ** 2
    span = inst.cap - inst.r0[0]
    # stationary point of rmp * sigmoid(x) - r * alpha, x the willingness gap
    root = math.sqrt(max(1.0 - 4.0 * m.zeta / m.rmp, 0.0))
    stationary = min((2.0 * artanh(root) + m.rme) / span, 1.0)
    if sensitivity > m.zeta:
        return np.array([stationary, 0.0]), "rec_product_1"
    if m.rme <= 0:
        return np.zeros(2), "no_rec_inefficient"
    # two local maxima (no recommendation and the stationary point): compare
    # them together with a grid scan
    grid_alpha, grid_value = _alpha_grid_argmax(inst, q, step)
    candidates = [(grid_value, grid_alpha)]
    for a in (0.0, stationary):
        v = float(exact_expected_profit_sp(inst, q, (a, 0.0)))
        candidates.append((v, a))
    best_value = max(v for v, _ in candidates)
    best_alpha = min(a for v, a in candidates if v == best_value)
    return np.array([best_alpha, 0.0]), "boundary_numeric"


def optimal_alpha_given_q(inst: SinglePeriodInstance, q, step: float = 1e-3):
    """Optimal recommendation intensities for fixed orders and the regime label."""
    q = np.asarray(q, dtype=float)
    m = relative_metrics(inst, q)
    if m.rmp >= 0:
        return _alpha_product_1(inst, q, step)
    mirror = inst.mirrored()
    alpha, regime = _alpha_product_1(mirror, q[::-1], step)
    if regime == "rec_product_1":
        regime = "rec_product_2"
    return alpha[::-1].copy(), regime


def grid_argmax_sp(inst: SinglePeriodInstance, q, step: float = 1e-3):
    """Brute-force best (alpha1, alpha2) on a square grid; ties go to the smallest pair."""
    grid = _alpha_grid(step)
    a1, a2 = np.meshgrid(grid, grid, indexing="ij")
    alphas = np.stack([a1, a2], axis=-1)
    values = exact_expected_profit_sp(inst, np.asarray(q, float), alphas)
    k = int(np.argmax(values))
    i, j = np.unravel_index(k, values.shape)
    return np.array([grid[i], grid[j]]), float(values[i, j])


# ---------------------------------------------------------------------------
# Two periods, one product


def two_period_willingness(inst: TwoPeriodInstance, alpha):
    alpha = np.asarray(alpha, dtype=float)
    r1 = inst.decay * inst.r0 + (inst.cap - inst.decay * inst.r0) * alpha[..., 0]
    r2 = inst.decay * r1 + (inst.cap - inst.decay * r1) * alpha[..., 1]
    return r1, r2


def _check_lattice(q):
    key = (int(q[0]), int(q[1]))
    if key not in ORDER_LATTICE or key[0] != q[0] or key[1] != q[1]:
        raise DomainError(f"orders {tuple(q)} are outside the lattice {ORDER_LATTICE}")
    return key


def lattice_profit_from_probs(p, h, b, q, g1, g2):
    """Indicator-form expected profit (before recommendation cost) given purchase probabilities."""
    q1, q2 = q
    none = 1.0 if q1 + q2 == 0 else 0.0
    one = 1.0 if q1 + q2 == 1 else 0.0
    first_empty = 1.0 if q1 == 0 else 0.0
    c = p + h + b
    return (g1 * (p + 2 * h - (h + b) * first_empty - c * none)
            + g2 * ((p + h) - c * none)
            - g1 * g2 * c * one
            - 2 * h * q1 - h * q2)


def two_period_expected_profit(inst: TwoPeriodInstance, q, alpha):
    """Closed indicator form of the two-period expected profit."""
    q = _check_lattice(q)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise DomainError("recommendation intensities must lie in [0, 1]")
    r1, r2 = two_period_willingness(inst, alpha)
    g1, g2 = sigmoid(r1), sigmoid(r2)
    gross = lattice_profit_from_probs(inst.p, inst.h, inst.b, q, g1, g2)
    return gross - inst.r * (alpha[..., 0] + alpha[..., 1])


def two_period_enumeration(inst: TwoPeriodInstance, q, alpha):
    """Same quantity by summing over the four demand outcomes with explicit backlog bookkeeping."""
    q1, q2 = _check_lattice(q)
    alpha = np.asarray(alpha, dtype=float)
    r1, r2 = two_period_willingness(inst, alpha)
    g1, g2 = sigmoid(r1), sigmoid(r2)
    total = 0.0
    for d1 in (0, 1):
        for d2 in (0, 1):
            prob = (g1 if d1 else 1 - g1) * (g2 if d2 else 1 - g2)
            on_hand, backlog, profit = 0.0, 0.0, 0.0
            for order, d in ((q1, d1), (q2, d2)):
                owed = d + backlog
                available = on_hand + order
                sold = min(owed, available)
                on_hand = available - sold
                backlog = owed - sold
                profit += inst.p * sold - inst.h * on_hand - inst.b * backlog
            total = total + prob * profit
    return total - inst.r * (alpha[..., 0] + alpha[..., 1])


def _alpha_grid(step: float) -> np.ndarray:
    return np.minimum(np.round(np.arange(0.0, 1.0 + step / 2, step), 12), 1.0)


def best_alpha_two_period(inst: TwoPeriodInstance, q, step: float = 1e-3):
    """Grid maximizer over (alpha1, alpha2) for fixed lattice orders."""
    grid = _alpha_grid(step)
    a1, a2 = np.meshgrid(grid, grid, indexing="ij")
    values = two_period_expected_profit(inst, q, np.stack([a1, a2], axis=-1))
    k = int(np.argmax(values))
    i, j = np.unravel_index(k, values.shape)
    return np.array([grid[i], grid[j]]), float(values[i, j])


def two_period_optimum(inst: TwoPeriodInstance, step: float = 1e-3):
    """Exhaustive search over the order lattice and an intensity grid.

    Ties are broken toward the lexicographically smallest (q, alpha).
    """
    if not 0 < step <= 0.1:
        raise DomainError("grid step must lie in (0, 0.1]")
    best = None
    for q in ORDER_LATTICE:
        alpha, value = best_alpha_two_period(inst, q, step)
        if best is None or value > best[2]:
            best = (np.array(q, dtype=float), alpha, value)
    return best


def two_period_monte_carlo(inst: TwoPeriodInstance, q, alpha, samples: int, rng):
    """Sample mean and standard error of the two-period profit."""
    q1, q2 = _check_lattice(q)
    r1, r2 = two_period_willingness(inst, alpha)
    d1 = (rng.random(samples) < sigmoid(r1)).astype(float)
    d2 = (rng.random(samples) < sigmoid(r2)).astype(float)
    on_hand = np.zeros(samples)
    backlog = np.zeros(samples)
    profit = np.zeros(samples)
    for order, d in ((q1, d1), (q2, d2)):
        owed = d + backlog
        available = on_hand + order
        sold = np.minimum(owed, available)
        on_hand = available - sold
        backlog = owed - sold
        profit += inst.p * sold - inst.h * on_hand - inst.b * backlog
    profit -= inst.r * (alpha[0] + alpha[1])
    return float(profit.mean()), float(profit.std(ddof=1) / math.sqrt(samples))


def safe_ratio(num: float, den: float) -> float:
    """Ratio with 0/0 = 1, 0/x = 0 and x/0 = inf."""
    if num == 0 and den == 0:
        return 1.0
    if den == 0:
        return math.inf
    return num / den


def smoothing_monotonicity_check(inst: TwoPeriodInstance, budget: int, step: float = 1e-3) -> CheckReport:
    """Shifting orders to the first period should not lower the alpha1/alpha2 ratio."""
    if budget not in (1, 2):
        raise DomainError("budget must be 1 or 2")
    if inst.p < inst.b * math.exp(inst.cap) - inst.h:
        return CheckReport(False, True, "precondition p >= b*exp(cap) - h not met")
    pairs = ((0, 1), (1, 0)) if budget == 1 else ((0, 2), (1, 1))
    ratios = []
    for q in pairs:
        alpha, value = best_alpha_two_period(inst, q, step)
        ratio = 1.0 if alpha[0] == 0 and alpha[1] == 0 else alpha[0] / max(alpha[1], step)
        ratios.append(ratio)
    witnesses = [(pairs[k], ratios[k]) for k in range(2)]
    return CheckReport(True, ratios[1] >= ratios[0], "", witnesses)


def early_ordering_threshold(inst) -> float:
    """Purchase probability above which ordering in period one beats period two."""
    return inst.h / (inst.h + inst.b)


def r_plus(p: float, h: float, b: float) -> float:
    return -math.log(math.sqrt((p + h + b) / h) - 1.0)


def best_orders_given_willingness(inst: TwoPeriodInstance, r1: float, r2: float):
    """Best lattice orders when the willingness path is fixed."""
    g1, g2 = float(sigmoid(r1)), float(sigmoid(r2))
    best_q, best_v = None, -math.inf
    for q in ORDER_LATTICE:
        v = lattice_profit_from_probs(inst.p, inst.h, inst.b, q, g1, g2)
        if v > best_v:
            best_q, best_v = q, v
    return best_q, best_v


def adaptive_ordering_check(inst: TwoPeriodInstance, willingness_sum: float, points: int = 401,
                            span: float = 20.0) -> CheckReport:
    """Moving willingness toward period one should not lower the q1/q2 ratio."""
    p, h, b = inst.p, inst.h, inst.b
    if h <= 0:
        return CheckReport(False, True, "holding cost must be positive")
    if p < h + b * b / h:
        return CheckReport(False, True, "precondition p >= h + b^2/h not met")
    threshold = 2.0 * r_plus(p, h, b)
    if willingness_sum < threshold:
        return CheckReport(False, True, f"willingness sum below 2R+ = {threshold:.6g}")
    path = []
    for r1 in np.linspace(willingness_sum / 2 - span, willingness_sum / 2 + span, points):
        q, _ = best_orders_given_willingness(inst, float(r1), float(willingness_sum - r1))
        path.append((float(r1), q, safe_ratio(q[0], q[1])))
    ok = all(path[k + 1][2] >= path[k][2] for k in range(len(path) - 1))
    witnesses = [] if ok else [(path[k], path[k + 1]) for k in range(len(path) - 1)
                               if path[k + 1][2] < path[k][2]]
    return CheckReport(True, ok, "", witnesses or path[:: max(1, points // 8)])


# ---------------------------------------------------------------------------
# Regime map for reports


def regime_map(base: SinglePeriodInstance, rme_values, rmp_values, step: float = 1e-3):
    """Optimal intensities over a lattice of (RME, RMP) pairs.

    RME is set through product 2's initial willingness and RMP through the
    order of product 2, with product 1 ordered up to one unit.
    """
    rows = []
    for rme in rme_values:
        for rmp in rmp_values:
            gap = rmp / base.critical
            if not 0 <= gap <= 1:
                raise DomainError("RMP must lie in [0, p+h+b] for the regime map")
            inst = replace(base, r0=(base.r0[0], base.r0[0] + rme), q_max=max(base.q_max, 1.0))
            q = np.array([1.0, 1.0 - gap])
            alpha, regime = optimal_alpha_given_q(inst, q, step)
            value = float(exact_expected_profit_sp(inst, q, alpha))
            rows.append(dict(p=inst.p, h=inst.h, b=inst.b, r=inst.r, cap=inst.cap,
                             r0_1=inst.r0[0], r0_2=inst.r0[1], q1=q[0], q2=q[1],
                             rme=rme, rmp=rmp, regime=regime,
                             alpha_star_1=alpha[0], alpha_star_2=alpha[1], oracle_value=value))
    return rows
