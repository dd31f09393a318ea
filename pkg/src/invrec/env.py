"""Simulation of the coupled inventory and recommendation system.

Each period the platform places replenishment orders for ``N`` products and
chooses a recommendation intensity for every (product, customer) pair.
Recommendations raise purchase willingness, willingness drives a discrete
choice demand model, and demand is served from on-hand stock with either
backlogging or lost sales.

State arrays use the following shapes::

    on_hand, backlog      (N,)
    pipeline              (N, L)   column l holds the order placed l+1 periods ago
    willingness           (N, M)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, LifecycleError

DEMAND_VARIANTS = ("softmax_categorical", "multinomial", "poisson", "exponential")
FULFILLMENT_MODES = ("backlog", "lost_sales")
PERTURBATION_TARGETS = ("demand", "willingness")

TRAJECTORY_COLUMNS = (
    "seed", "episode", "t", "product", "I", "U", "arrived", "D", "S",
    "sum_alpha", "P", "reward",
)


@dataclass(frozen=True)
class Economics:
    sell_price: float = 2.0
    buy_price: float = 1.0
    holding_cost: float = 0.1
    backlog_cost: float = 0.5
    rec_unit_cost: float = 0.025

    def __post_init__(self):
        for name in ("sell_price", "buy_price", "holding_cost", "backlog_cost", "rec_unit_cost"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"econ.{name}", f"must be a finite non-negative number, got {value!r}")


@dataclass(frozen=True)
class DemandModel:
    """Per-customer demand distribution.

    ``scale`` is the mean number of units a customer requests per period for
    the poisson and exponential variants, split across products by the choice
    probabilities. ``trials`` is the number of units each customer buys under
    the multinomial variant.
    """

    variant: str = "softmax_categorical"
    scale: float = 1.0
    trials: int = 1

    def __post_init__(self):
        if self.variant not in DEMAND_VARIANTS:
            raise ConfigError("demand_model.variant", f"must be one of {DEMAND_VARIANTS}, got {self.variant!r}")
        if not math.isfinite(self.scale) or self.scale < 0:
            raise ConfigError("demand_model.scale", f"must be non-negative, got {self.scale!r}")
        if int(self.trials) != self.trials or self.trials < 0:
            raise ConfigError("demand_model.trials", f"must be a non-negative integer, got {self.trials!r}")


@dataclass(frozen=True)
class Perturbation:
    """Sinusoidal shock added to demand or willingness of each product."""

    target: str
    amplitude: float
    period_len: int
    phases: tuple = ()
    rounding: bool = True

    def __post_init__(self):
        if self.target not in PERTURBATION_TARGETS:
            raise ConfigError("perturbation.target", f"must be one of {PERTURBATION_TARGETS}")
        if self.amplitude < 0:
            raise ConfigError("perturbation.amplitude", "must be non-negative")
        if int(self.period_len) != self.period_len or self.period_len < 1:
            raise ConfigError("perturbation.period_len", "must be a positive integer")
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))
        for p in self.phases:
            if not 0 <= p < self.period_len:
                raise ConfigError("perturbation.phases", "each phase must lie in [0, period_len)")

    def phase(self, product: int) -> float:
        return self.phases[product] if self.phases else 0.0

    def signal(self, t: int, product: int) -> float:
        """Raw shock value before it is added to a base quantity."""
        return self.amplitude * math.sin(2.0 * math.pi * (t + self.phase(product)) / self.period_len)


@dataclass(frozen=True)
class EnvConfig:
    num_products: int = 2
    num_customers: int = 5
    horizon: int = 50
    lead_time: int = 2
    decay: float = 0.9
    willingness_cap: float = 5.0
    econ: Economics = field(default_factory=Economics)
    demand_model: DemandModel = field(default_factory=DemandModel)
    fulfillment: str = "backlog"
    capacity: float | None = None
    discount: float = 0.99
    max_lead_time: int = 10

    def __post_init__(self):
        for name in ("num_products", "num_customers", "horizon"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if int(self.lead_time) != self.lead_time or self.lead_time < 0:
            raise ConfigError("lead_time", f"must be a non-negative integer, got {self.lead_time!r}")
        if self.lead_time > self.max_lead_time:
            raise ConfigError("lead_time", f"exceeds max_lead_time={self.max_lead_time}")
        if not 0 < self.decay < 1:
            raise ConfigError("decay", f"must lie in (0, 1), got {self.decay!r}")
        if not (math.isfinite(self.willingness_cap) and self.willingness_cap > 0):
            raise ConfigError("willingness_cap", f"must be positive, got {self.willingness_cap!r}")
        if self.fulfillment not in FULFILLMENT_MODES:
            raise ConfigError("fulfillment", f"must be one of {FULFILLMENT_MODES}, got {self.fulfillment!r}")
        if self.capacity is not None and not (math.isfinite(self.capacity) and self.capacity > 0):
            raise ConfigError("capacity", f"must be positive, got {self.capacity!r}")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount", f"must lie in (0, 1], got {self.discount!r}")
        if not isinstance(self.econ, Economics):
            raise ConfigError("econ", "must be an Economics instance")
        if not isinstance(self.demand_model, DemandModel):
            raise ConfigError("demand_model", "must be a DemandModel instance")

    @property
    def order_cap(self) -> float:
        """Per-product order cap; defaults to the number of customers."""
        return float(self.num_customers if self.capacity is None else self.capacity)

    @property
    def backlog_cap(self) -> float:
        return float(self.num_customers * self.horizon)

    @property
    def obs_dim(self) -> int:
        n = self.num_products
        return n + n * self.lead_time + n * self.num_customers

    @property
    def rec_dim(self) -> int:
        return self.num_products * self.num_customers


@dataclass
class EnvState:
    t: int
    on_hand: np.ndarray
    backlog: np.ndarray
    pipeline: np.ndarray
    willingness: np.ndarray

    def copy(self) -> "EnvState":
        return EnvState(self.t, self.on_hand.copy(), self.backlog.copy(),
                        self.pipeline.copy(), self.willingness.copy())


@dataclass
class JointAction:
    orders: np.ndarray
    recs: np.ndarray


@dataclass
class StepOutcome:
    sales: np.ndarray
    demand: np.ndarray
    profit: np.ndarray
    rec_cost: float
    reward: float
    new_state: EnvState
    arrived: np.ndarray
    orders: np.ndarray
    recs: np.ndarray


# ---------------------------------------------------------------------------
# Pure building blocks


def choice_probabilities(willingness: np.ndarray) -> np.ndarray:
    """Softmax over products (axis 0) for every customer column."""
    z = willingness - willingness.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def advance_willingness(willingness, recs, decay: float, cap: float) -> np.ndarray:
    """Decay willingness and move it toward ``cap`` in proportion to ``recs``."""
    recs = np.asarray(recs, dtype=float)
    if np.any(recs < 0) or np.any(recs > 1) or not np.all(np.isfinite(recs)):
        raise DomainError("recommendation intensities must lie in [0, 1]")
    decayed = decay * np.asarray(willingness, dtype=float)
    return decayed + (cap - decayed) * recs


def sample_demand(willingness: np.ndarray, model: DemandModel, rng: np.random.Generator) -> np.ndarray:
    """Draw per (product, customer) demand given willingness."""
    gamma = choice_probabilities(willingness)
    n, m = gamma.shape
    if model.variant == "softmax_categorical":
        cum = np.cumsum(gamma, axis=0)
        u = rng.random(m)
        picks = np.minimum((u[None, :] >= cum).sum(axis=0), n - 1)
        d = np.zeros((n, m))
        d[picks, np.arange(m)] = 1.0
        return d
    if model.variant == "multinomial":
        d = np.empty((n, m))
        for j in range(m):
            d[:, j] = rng.multinomial(int(model.trials), gamma[:, j])
        return d
    if model.variant == "poisson":
        return rng.poisson(model.scale * gamma).astype(float)
    # exponential: continuous order sizes with mean scale * gamma
    return rng.exponential(1.0, size=gamma.shape) * (model.scale * gamma)


def fulfill(on_hand, backlog, arrived, demand, mode: str = "backlog"):
    """Serve demand from available stock; returns (sales, on_hand, backlog)."""
    on_hand = np.asarray(on_hand, dtype=float)
    backlog = np.asarray(backlog, dtype=float)
    arrived = np.asarray(arrived, dtype=float)
    demand = np.asarray(demand, dtype=float)
    for name, arr in (("on_hand", on_hand), ("backlog", backlog), ("arrived", arrived), ("demand", demand)):
        if np.any(arr < 0):
            raise DomainError(f"{name} must be non-negative")
    if mode == "lost_sales":
        owed = demand
    elif mode == "backlog":
        owed = demand + backlog
    else:
        raise DomainError(f"unknown fulfillment mode {mode!r}")
    available = on_hand + arrived
    # both stocks come from one net position so that at most one is non-zero
    net = available - owed
    sales = np.minimum(owed, available)
    new_on_hand = np.maximum(net, 0.0)
    if mode == "lost_sales":
        new_backlog = np.zeros_like(sales)
    else:
        new_backlog = np.maximum(-net, 0.0)
    return sales, new_on_hand, new_backlog


def period_profit(sales, orders, on_hand, backlog, recs, econ: Economics):
    """Per-product profit, total recommendation cost and the scalar reward."""
    profit = (econ.sell_price * np.asarray(sales) - econ.buy_price * np.asarray(orders)
              - econ.holding_cost * np.asarray(on_hand) - econ.backlog_cost * np.asarray(backlog))
    rec_cost = econ.rec_unit_cost * float(np.sum(recs))
    reward = float(np.sum(profit)) - rec_cost
    return profit, rec_cost, reward


def apply_perturbation(base: float, pert: Perturbation, t: int, product: int,
                       lower: float = 0.0, upper: float = math.inf) -> float:
    """Shift ``base`` by the shock of ``product`` at period ``t``, clipped to [lower, upper]."""
    value = base + pert.signal(t, product)
    if pert.rounding and pert.target == "demand":
        value = float(np.floor(value + 0.5))
    return float(min(max(value, lower), upper))


# ---------------------------------------------------------------------------
# Episode lifecycle


def reset(config: EnvConfig, seed) -> EnvState:
    """Random initial state; ``seed`` may be an int or a numpy Generator."""
    rng = np.random.default_rng(seed)
    n, m = config.num_products, config.num_customers
    on_hand = rng.integers(0, m // 2 + 1, size=n).astype(float)
    willingness = rng.uniform(0.0, config.willingness_cap / 2.0, size=(n, m))
    return EnvState(0, on_hand, np.zeros(n), np.zeros((n, config.lead_time)), willingness)


def check_action(config: EnvConfig, action: JointAction) -> None:
    n, m = config.num_products, config.num_customers
    q = np.asarray(action.orders)
    a = np.asarray(action.recs)
    if q.shape != (n,) or a.shape != (n, m):
        raise DomainError(f"action shapes {q.shape}, {a.shape} do not match ({n},), ({n}, {m})")
    if np.any(q < 0) or np.any(q > config.order_cap) or not np.all(np.isfinite(q)):
        raise DomainError("orders must lie in [0, capacity]")
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise DomainError("recommendations must lie in [0, 1]")


def step(config: EnvConfig, state: EnvState, action: JointAction, rng: np.random.Generator,
         perturbations: Sequence[Perturbation] = ()) -> StepOutcome:
    """Advance one period. ``state`` is not modified."""
    if state.t >= config.horizon:
        raise LifecycleError(f"episode already finished at t={state.t} (horizon {config.horizon})")
    check_action(config, action)
    orders = np.asarray(action.orders, dtype=float)
    recs = np.asarray(action.recs, dtype=float)
    n = config.num_products

    # the new order enters the pipeline and the oldest slot arrives
    if config.lead_time == 0:
        arrived = orders.copy()
        pipeline = state.pipeline.copy()
    else:
        arrived = state.pipeline[:, -1].copy()
        pipeline = np.concatenate([orders[:, None], state.pipeline[:, :-1]], axis=1)

    cap = config.willingness_cap
    willingness = advance_willingness(state.willingness, recs, config.decay, cap)
    for pert in perturbations:
        if pert.target == "willingness":
            for i in range(n):
                shift = pert.signal(state.t, i)
                willingness[i] = np.clip(willingness[i] + shift, 0.0, cap)

    demand = sample_demand(willingness, config.demand_model, rng).sum(axis=1)
    for pert in perturbations:
        if pert.target == "demand":
            demand = np.array([apply_perturbation(demand[i], pert, state.t, i) for i in range(n)])

    sales, on_hand, backlog = fulfill(state.on_hand, state.backlog, arrived, demand, config.fulfillment)
    backlog = np.minimum(backlog, config.backlog_cap)
    profit, rec_cost, reward = period_profit(sales, orders, on_hand, backlog, recs, config.econ)
    new_state = EnvState(state.t + 1, on_hand, backlog, pipeline, willingness)
    return StepOutcome(sales, demand, profit, rec_cost, reward, new_state, arrived, orders, recs)


def observe(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Normalized observation: net stock, pipeline, then willingness (row-major)."""
    m = float(config.num_customers)
    obs = np.concatenate([
        (state.on_hand - state.backlog) / m,
        state.pipeline.ravel() / m,
        state.willingness.ravel() / config.willingness_cap,
    ])
    return np.clip(obs, -1.0, 1.0)


class Env:
    """Stateful wrapper holding one episode and its own rng stream."""

    def __init__(self, config: EnvConfig, seed=None, perturbations: Sequence[Perturbation] = ()):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.perturbations = tuple(perturbations)
        self.state: EnvState | None = None

    def reset(self) -> np.ndarray:
        self.state = reset(self.config, self.rng)
        return observe(self.state, self.config)

    def step(self, action: JointAction) -> StepOutcome:
        if self.state is None:
            raise LifecycleError("call reset() before step()")
        outcome = step(self.config, self.state, action, self.rng, self.perturbations)
        self.state = outcome.new_state
        return outcome

    def observe(self) -> np.ndarray:
        return observe(self.state, self.config)

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.t >= self.config.horizon


# ---------------------------------------------------------------------------
# Config files and trajectory dumps


def config_to_dict(config: EnvConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> EnvConfig:
    data = dict(data)
    known = set(EnvConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    if "econ" in data:
        econ = data["econ"]
        data["econ"] = econ if isinstance(econ, Economics) else Economics(**econ)
    if "demand_model" in data:
        dm = data["demand_model"]
        data["demand_model"] = dm if isinstance(dm, DemandModel) else DemandModel(**dm)
    return EnvConfig(**data)


def load_config(path) -> EnvConfig:
    with open(path) as fh:
        data = json.load(fh)
    return config_from_dict(data.get("env", data))


def save_config(config: EnvConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")


def perturbation_from_dict(data: dict) -> Perturbation:
    return Perturbation(**data)


def trajectory_rows(seed: int, episode: int, t: int, outcome: StepOutcome) -> list:
    """CSV rows (one per product) for a single period."""
    sum_alpha = outcome.recs.sum(axis=1)
    s = outcome.new_state
    return [
        [seed, episode, t, i, s.on_hand[i], s.backlog[i], outcome.arrived[i], outcome.demand[i],
         outcome.sales[i], sum_alpha[i], outcome.profit[i], outcome.reward]
        for i in range(len(outcome.sales))
    ]


def fmt(x) -> str:
    """Decimal text at 12 significant digits; integers stay integers."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


def write_trajectory_csv(rows: Iterable[list], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def with_horizon(config: EnvConfig, horizon: int) -> EnvConfig:
    return replace(config, horizon=horizon)
