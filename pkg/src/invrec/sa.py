"""Two-timescale projected stochastic approximation for the single-period model.

Orders move on the fast timescale using a pathwise derivative; recommendation
intensities move on the slow timescale using a likelihood-ratio (score
function) estimator. Both are projected back onto their boxes every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytic import SinglePeriodInstance, choice_probs, exact_expected_profit_sp
from .errors import DegenerateError, DomainError

TRACE_COLUMNS = ("n", "q1", "q2", "a1", "a2", "eps1", "eps2", "oracle_value")


@dataclass(frozen=True)
class StepSchedule:
    """Diminishing step size.

    ``kind="finite"`` gives ``eps * (0.1 H / (n + 0.1 H)) ** decay`` for a run
    of ``horizon`` iterations H; ``kind="power"`` gives ``eps / (1 + n) ** decay``.
    """

    eps: float
    decay: float
    horizon: int
    kind: str = "finite"

    def __post_init__(self):
        if self.eps < 0:
            raise DomainError("eps must be non-negative")
        if not 0.5 < self.decay <= 1:
            raise DomainError("decay exponent must lie in (0.5, 1]")
        if self.horizon < 1:
            raise DomainError("horizon must be positive")
        if self.kind not in ("finite", "power"):
            raise DomainError(f"unknown schedule kind {self.kind!r}")

    def __call__(self, n) -> float:
        return schedule_eval(self, n)


def schedule_eval(s: StepSchedule, n) -> float:
    if n < 0:
        raise DomainError("iteration index must be non-negative")
    if s.kind == "power":
        return s.eps / (1.0 + n) ** s.decay
    warm = 0.1 * s.horizon
    return s.eps * (warm / (n + warm)) ** s.decay


@dataclass
class GradientEstimate:
    q_grad: np.ndarray
    alpha_grad: np.ndarray
    batch: int


@dataclass
class SAState:
    n: int
    q: np.ndarray
    alpha: np.ndarray
    trace: list = field(default_factory=list)


def pathwise_grad_q(demand, q, inst: SinglePeriodInstance) -> np.ndarray:
    """Derivative of realized profit in the order quantity; D == q counts as D > q."""
    demand = np.asarray(demand, dtype=float)
    q = np.asarray(q, dtype=float)
    return np.where(demand >= q, inst.p + inst.b, -inst.h)


def realized_profit(demand, q, inst: SinglePeriodInstance):
    """Profit summed over products for each demand draw (recommendation cost excluded)."""
    demand = np.asarray(demand, dtype=float)
    sold = np.minimum(demand, q)
    return np.sum(inst.p * sold - inst.h * (q - sold) - inst.b * (demand - sold), axis=-1)


def lr_grad_alpha(demand, gamma, profit, inst: SinglePeriodInstance) -> np.ndarray:
    """Score-function estimate of the intensity gradient for each draw."""
    demand = np.asarray(demand, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise DegenerateError("choice probability is zero; score undefined")
    picked = np.sum(demand * gamma, axis=-1)
    if np.any(picked <= 0):
        raise DegenerateError("observed an outcome of probability zero")
    span = inst.cap - np.asarray(inst.r0)
    return np.asarray(profit)[..., None] * (demand - gamma) * span - inst.r


def draw_demand(gamma, batch: int, rng: np.random.Generator) -> np.ndarray:
    """One-hot purchases of a single customer, shape (batch, 2)."""
    first = rng.random(batch) < gamma[0]
    return np.stack([first, ~first], axis=1).astype(float)


def estimate_gradients(inst: SinglePeriodInstance, q, alpha, batch: int, rng) -> GradientEstimate:
    r0 = np.asarray(inst.r0)
    gamma = choice_probs(r0 + (inst.cap - r0) * alpha)
    demand = draw_demand(gamma, batch, rng)
    q_grad = pathwise_grad_q(demand, q, inst).mean(axis=0)
    profit = realized_profit(demand, q, inst)
    alpha_grad = lr_grad_alpha(demand, gamma, profit, inst).mean(axis=0)
    return GradientEstimate(q_grad, alpha_grad, batch)


def exact_gradients(inst: SinglePeriodInstance, q, alpha) -> GradientEstimate:
    """Expected values of both estimators, in closed form."""
    q = np.asarray(q, dtype=float)
    r0 = np.asarray(inst.r0)
    gamma = choice_probs(r0 + (inst.cap - r0) * np.asarray(alpha, dtype=float))
    # P(D >= q) for unit demand
    tail = np.where(q <= 0.0, 1.0, np.where(q <= 1.0, gamma, 0.0))
    q_grad = (inst.p + inst.b) * tail - inst.h * (1.0 - tail)
    served = np.minimum(q, 1.0)
    edge = inst.critical * (served - served[::-1])
    alpha_grad = edge * (inst.cap - r0) * gamma[0] * gamma[1] - inst.r
    return GradientEstimate(q_grad, alpha_grad, 0)


def two_timescale_step(state: SAState, est: GradientEstimate, fast: StepSchedule, slow: StepSchedule,
                       q_max: float) -> SAState:
    eps_fast, eps_slow = fast(state.n), slow(state.n)
    q = np.clip(state.q + eps_fast * est.q_grad, 0.0, q_max)
    alpha = np.clip(state.alpha + eps_slow * est.alpha_grad, 0.0, 1.0)
    return SAState(state.n + 1, q, alpha, state.trace)


def _record(state: SAState, inst, fast, slow):
    value = float(exact_expected_profit_sp(inst, state.q, state.alpha))
    state.trace.append((state.n, *state.q, *state.alpha, fast(state.n), slow(state.n), value))


def run_sa(inst: SinglePeriodInstance, fast: StepSchedule, slow: StepSchedule, iterations: int,
           batch: int = 16, seed: int = 0, record_every: int = 100, q0=None, alpha0=None,
           exact: bool = False) -> SAState:
    """Run the projected recursion; ``exact=True`` replaces estimates by expectations."""
    if iterations < 1:
        raise DomainError("iterations must be at least 1")
    rng = np.random.default_rng(seed)
    q = np.zeros(2) if q0 is None else np.asarray(q0, dtype=float).copy()
    alpha = np.zeros(2) if alpha0 is None else np.asarray(alpha0, dtype=float).copy()
    state = SAState(0, q, alpha)
    _record(state, inst, fast, slow)
    for _ in range(iterations):
        if exact:
            est = exact_gradients(inst, state.q, state.alpha)
        else:
            est = estimate_gradients(inst, state.q, state.alpha, batch, rng)
        state = two_timescale_step(state, est, fast, slow, inst.q_max)
        if state.n % record_every == 0 or state.n == iterations:
            _record(state, inst, fast, slow)
    return state


def timescale_report(inst, fast, slow, iterations, batch=16, seed=0):
    """Final iterates with the designed and the swapped schedule assignment."""
    designed = run_sa(inst, fast, slow, iterations, batch, seed)
    swapped = run_sa(inst, slow, fast, iterations, batch, seed)
    return {
        "designed": (designed.q.copy(), designed.alpha.copy()),
        "swapped": (swapped.q.copy(), swapped.alpha.copy()),
    }
