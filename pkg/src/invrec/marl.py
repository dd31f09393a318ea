"""Multi-timescale multi-agent policy optimization.

An inventory agent (orders) and a recommendation agent (intensities) share a
centralized critic and are updated one after the other in a random order
every minibatch. The inventory agent runs on a fast step-size schedule and the
recommendation agent on a slow one. The second agent in the order sees
advantages reweighted by the first agent's policy ratio.

Baselines collapse this loop: STMA puts both agents on one schedule and STSA
merges them into a single agent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .env import EnvConfig, Env, JointAction, Perturbation, StepOutcome, observe
from .errors import ConfigError, TrainingDivergence
from .sa import StepSchedule

ALGORITHMS = ("MTMA", "STMA_F", "STMA_S", "STSA_F", "STSA_S")
SCENARIOS = ("cooperative", "isolated", "isolated_replenishment", "isolated_recommendation")
CHANNELS = ("platform", "inventory", "recommendation")
MAX_LOG_RATIO = 10.0


@dataclass(frozen=True)
class AgentSpec:
    name: str
    kind: str
    action_dim: int
    hidden: tuple
    schedule: str  # "fast" or "slow"


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 300
    minibatches: int = 4
    batch_size: int = 512
    clip: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    critic_schedule: tuple = (1e-3, 0.51)
    fast_schedule: tuple = (1e-3, 0.75)
    slow_schedule: tuple = (2e-5, 0.99)
    episodes: int = 8
    algorithm: str = "MTMA"
    scenario: str = "cooperative"
    inventory_fast: bool = True
    hidden_layers: int = 2
    inventory_width: int = 128
    rec_width: int = 384
    merged_width: int = 512
    critic_width: int = 512
    normalize_advantages: bool = False
    reward_scale: float = 1.0
    policy_out_scale: float = 1.0
    eval_every: int = 10
    eval_dense: int = 10
    eval_episodes: int = 10

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {ALGORITHMS}")
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"must be one of {SCENARIOS}")
        if self.algorithm.startswith("STSA") and self.scenario != "cooperative":
            raise ConfigError("scenario", "a merged single agent only supports the cooperative scenario")
        for name in ("iterations", "minibatches", "batch_size", "episodes", "hidden_layers", "eval_every",
                     "eval_episodes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if not 0 < self.clip < 1:
            raise ConfigError("clip", "must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ConfigError("discount", "must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda", "must lie in [0, 1]")
        (_, p0), (_, p1), (_, p2) = self.critic_schedule, self.fast_schedule, self.slow_schedule
        if not 0.5 < p1 < p2 <= 1:
            raise ConfigError("fast_schedule", "decay exponents must satisfy 0.5 < fast < slow <= 1")
        if p0 > p1:
            raise ConfigError("critic_schedule", "critic step must not decay faster than the fast agent step")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale", "must be positive")

    def schedules(self) -> dict:
        mk = lambda pair: StepSchedule(float(pair[0]), float(pair[1]), self.iterations)
        return {"critic": mk(self.critic_schedule), "fast": mk(self.fast_schedule),
                "slow": mk(self.slow_schedule)}


def agent_specs(env_config: EnvConfig, cfg: TrainerConfig) -> list:
    """Agents for the configured algorithm, with their schedule roles."""
    n = env_config.num_products
    depth = cfg.hidden_layers
    if cfg.algorithm.startswith("STSA"):
        return [make_single_agent(env_config, cfg)]
    if cfg.algorithm == "MTMA":
        q_role, a_role = ("fast", "slow") if cfg.inventory_fast else ("slow", "fast")
    else:
        q_role = a_role = "fast" if cfg.algorithm.endswith("_F") else "slow"
    return [
        AgentSpec("q", "order_integer_box", n, (cfg.inventory_width,) * depth, q_role),
        AgentSpec("alpha", "rec_unit_interval", env_config.rec_dim, (cfg.rec_width,) * depth, a_role),
    ]


def make_single_agent(env_config: EnvConfig, cfg: TrainerConfig | None = None) -> AgentSpec:
    """One agent emitting orders followed by the flattened recommendation matrix."""
    cfg = cfg or TrainerConfig(algorithm="STSA_F")
    role = "slow" if cfg.algorithm == "STSA_S" else "fast"
    dim = env_config.num_products + env_config.rec_dim
    return AgentSpec("joint", "merged", dim, (cfg.merged_width,) * cfg.hidden_layers, role)


def initial_mean(spec: AgentSpec, env_config: EnvConfig) -> np.ndarray:
    """Initial policy mean at the centre of each action box.

    Recommendation outputs are centred at raw 0 (intensity 0.5 after the tanh
    squash); order outputs start at half the order cap, so that the rounding
    squash is not stuck in its flat region at zero.
    """
    mean = np.zeros(spec.action_dim)
    if spec.kind == "order_integer_box":
        mean[:] = env_config.order_cap / 2.0
    elif spec.kind == "merged":
        mean[: env_config.num_products] = env_config.order_cap / 2.0
    return mean


def agent_channels(scenario: str, names: Sequence[str]) -> dict:
    """Reward channel that each agent optimizes."""
    table = {
        "cooperative": {"q": "platform", "alpha": "platform"},
        "isolated": {"q": "inventory", "alpha": "recommendation"},
        "isolated_replenishment": {"q": "inventory", "alpha": "platform"},
        "isolated_recommendation": {"q": "platform", "alpha": "recommendation"},
    }
    if scenario not in table:
        raise ConfigError("scenario", f"unknown scenario {scenario!r}")
    return {name: table[scenario].get(name, "platform") for name in names}


def reward_channels(outcome: StepOutcome, econ) -> dict:
    """Platform reward and its inventory / recommendation departmental parts."""
    s = outcome.new_state
    inventory = -(econ.buy_price * float(np.sum(outcome.orders)) + econ.holding_cost * float(np.sum(s.on_hand))
                  + econ.backlog_cost * float(np.sum(s.backlog)))
    recommendation = econ.sell_price * float(np.sum(outcome.sales)) - outcome.rec_cost
    return {"platform": outcome.reward, "inventory": inventory, "recommendation": recommendation}


# ---------------------------------------------------------------------------
# Acting


def joint_actions(agents: dict, obs: np.ndarray, env_config: EnvConfig, rng, deterministic: bool):
    """Sample every agent for a batch of observations.

    Returns (raw, logp, orders, recs) with raw/logp keyed by agent name.
    """
    n, m = env_config.num_products, env_config.num_customers
    raw, logp = {}, {}
    orders = recs = None
    for name, head in agents.items():
        if name == "q":
            r, act, lp = nn.sample_and_squash(head, obs, rng, "order_integer_box", env_config.order_cap,
                                              deterministic)
            orders = act
        elif name == "alpha":
            r, act, lp = nn.sample_and_squash(head, obs, rng, "rec_unit_interval", deterministic=deterministic)
            recs = act.reshape(-1, n, m)
        else:
            r, act, lp = nn.sample_and_squash(head, obs, rng, "merged", env_config.order_cap, deterministic, n)
            orders = act[:, :n]
            recs = act[:, n:].reshape(-1, n, m)
        raw[name], logp[name] = r, lp
    return raw, logp, orders, recs


# ---------------------------------------------------------------------------
# Rollouts


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    raw: dict
    logp: dict
    rewards: dict
    values: dict
    dones: np.ndarray
    episode_returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.obs.shape[0]


def collect_rollouts(env_config: EnvConfig, agents: dict, critics: dict, episodes: int,
                     rng: np.random.Generator, perturbations: Sequence[Perturbation] = ()) -> RolloutBuffer:
    """Run ``episodes`` full episodes in lockstep with stochastic actions.

    Transitions are stored episode by episode; the last period of each
    episode is flagged terminal.
    """
    T = env_config.horizon
    envs = [Env(env_config, int(rng.integers(2**63)), perturbations) for _ in range(episodes)]
    obs = np.stack([e.reset() for e in envs])
    obs_buf = np.zeros((T, episodes, env_config.obs_dim))
    raw_buf = {name: np.zeros((T, episodes, h.action_dim)) for name, h in agents.items()}
    logp_buf = {name: np.zeros((T, episodes)) for name in agents}
    rew_buf = {ch: np.zeros((T, episodes)) for ch in CHANNELS}
    for t in range(T):
        obs_buf[t] = obs
        raw, logp, orders, recs = joint_actions(agents, obs, env_config, rng, deterministic=False)
        for name in agents:
            raw_buf[name][t] = raw[name]
            logp_buf[name][t] = logp[name]
        for k, e in enumerate(envs):
            outcome = e.step(JointAction(orders[k], recs[k]))
            for ch, value in reward_channels(outcome, env_config.econ).items():
                rew_buf[ch][t, k] = value
            obs[k] = observe(outcome.new_state, env_config)

    def flat(a):  # (T, E, ...) -> (E*T, ...) episode-major
        return np.swapaxes(a, 0, 1).reshape((episodes * T,) + a.shape[2:])

    dones = np.zeros((episodes, T), dtype=bool)
    dones[:, -1] = True
    buffer = RolloutBuffer(
        obs=flat(obs_buf),
        raw={k: flat(v) for k, v in raw_buf.items()},
        logp={k: flat(v) for k, v in logp_buf.items()},
        rewards={k: flat(v) for k, v in rew_buf.items()},
        values={},
        dones=dones.ravel(),
        episode_returns=rew_buf["platform"].sum(axis=0),
    )
    for ch, critic in critics.items():
        buffer.values[ch] = nn.predict(critic, buffer.obs)[:, 0]
    return buffer


# ---------------------------------------------------------------------------
# Advantage estimation


def gae(rewards, values, dones, discount: float, lam: float):
    """Generalized advantage estimates and critic targets.

    ``values[k]`` is the critic at the state where action k was taken; the
    state after a terminal transition is worth zero.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    next_values = np.append(values[1:], 0.0)
    next_values[dones] = 0.0
    delta = rewards + discount * next_values - values
    adv = np.empty_like(delta)
    running = 0.0
    for k in range(len(delta) - 1, -1, -1):
        if dones[k]:
            running = 0.0
        running = delta[k] + discount * lam * running
        adv[k] = running
    return adv, adv + values


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    targets: np.ndarray
    values: np.ndarray


def compute_gae(buffer: RolloutBuffer, critic: nn.MlpParams, discount: float, lam: float,
                channel: str = "platform", reward_scale: float = 1.0) -> AdvantageSet:
    values = nn.predict(critic, buffer.obs)[:, 0]
    adv, targets = gae(reward_scale * buffer.rewards[channel], values, buffer.dones, discount, lam)
    return AdvantageSet(adv, targets, values)


# ---------------------------------------------------------------------------
# Gradients


def clipped_surrogate(head: nn.GaussianHead, obs, raw, advantages, logp_old, clip: float) -> float:
    logp = nn.gaussian_logprob(head, obs, raw)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    return float(np.mean(np.minimum(ratio * advantages, clipped * advantages)))


def clipped_surrogate_grad(head: nn.GaussianHead, obs, raw, advantages, logp_old, clip: float):
    """Gradient of the mean clipped surrogate; also returns the per-sample active mask."""
    advantages = np.asarray(advantages, dtype=float)
    mu, cache = nn.forward(head.mean, obs)
    log_std = nn.clamp_log_std(head.log_std)
    inv_var = np.exp(-2.0 * log_std)
    diff = raw - mu
    logp = np.sum(-0.5 * diff * diff * inv_var - log_std - nn.HALF_LOG_2PI, axis=-1)
    ratio = np.exp(logp - logp_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise TrainingDivergence("non-finite policy ratio", context=f"transition {int(bad[0])}")
    # the unclipped branch is the minimum unless the ratio has left the trust region
    active = ((advantages > 0) & (ratio < 1.0 + clip)) | ((advantages < 0) & (ratio > 1.0 - clip))
    weights = np.where(active, advantages * ratio, 0.0) / len(advantages)
    dmu = weights[:, None] * diff * inv_var
    grads, _ = nn.backward(head.mean, cache, dmu)
    inside = (head.log_std > nn.LOG_STD_MIN) & (head.log_std < nn.LOG_STD_MAX)
    grads.log_std = np.where(inside, (weights[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0), 0.0)
    return grads, active


def reweight_advantage(advantages, logp_old_first, logp_new_first):
    """Scale advantages by the first agent's policy ratio, capped at exp(10)."""
    log_ratio = np.minimum(np.asarray(logp_new_first) - np.asarray(logp_old_first), MAX_LOG_RATIO)
    return np.exp(log_ratio) * np.asarray(advantages)


def critic_grad(critic: nn.MlpParams, obs, targets):
    """Gradient of mean squared error between critic values and targets."""
    v, cache = nn.forward(critic, obs)
    dv = 2.0 * (v[:, 0] - targets) / len(targets)
    grads, _ = nn.backward(critic, cache, dv[:, None])
    return grads


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalMetrics:
    total_profit: np.ndarray
    inventory_cost: np.ndarray
    marketing_revenue: np.ndarray

    @property
    def mean_profit(self) -> float:
        return float(np.mean(self.total_profit))


def evaluate_policy(env_config: EnvConfig, agents: dict, episodes: int, deterministic: bool = True,
                    seed=0, perturbations: Sequence[Perturbation] = ()) -> EvalMetrics:
    """Per-episode total profit with its inventory-cost / revenue split."""
    ss = np.random.SeedSequence(seed)
    envs = [Env(env_config, child, perturbations) for child in ss.spawn(episodes)]
    act_rng = np.random.default_rng(ss.spawn(1)[0] if not deterministic else 0)
    obs = np.stack([e.reset() for e in envs])
    econ = env_config.econ
    profit = np.zeros(episodes)
    cost = np.zeros(episodes)
    revenue = np.zeros(episodes)
    for _ in range(env_config.horizon):
        _, _, orders, recs = joint_actions(agents, obs, env_config, act_rng, deterministic)
        for k, e in enumerate(envs):
            out = e.step(JointAction(orders[k], recs[k]))
            ch = reward_channels(out, econ)
            profit[k] += ch["platform"]
            cost[k] -= ch["inventory"]
            revenue[k] += ch["recommendation"]
            obs[k] = observe(out.new_state, env_config)
    return EvalMetrics(profit, cost, revenue)


# ---------------------------------------------------------------------------
# Trainer


@dataclass
class EvalPoint:
    iteration: int
    metrics: EvalMetrics


@dataclass
class TrainResult:
    agents: dict
    critics: dict
    evals: list
    diverged: bool = False
    divergence: str = ""
    iterations_done: int = 0


class Trainer:
    """Runs the multi-timescale loop for one seed."""

    def __init__(self, env_config: EnvConfig, cfg: TrainerConfig, seed: int,
                 perturbations: Sequence[Perturbation] = (), warm_start: dict | None = None):
        self.env_config = env_config
        self.cfg = cfg
        self.seed = int(seed)
        self.perturbations = tuple(perturbations)
        init_ss, rollout_ss, shuffle_ss, eval_ss = np.random.SeedSequence(self.seed).spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.rollout_rng = np.random.default_rng(rollout_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.eval_seed = int(eval_ss.generate_state(1)[0])
        self.specs = {s.name: s for s in agent_specs(env_config, cfg)}
        obs_dim = env_config.obs_dim
        self.agents = {}
        for name, spec in self.specs.items():
            widths = (obs_dim,) + tuple(spec.hidden) + (spec.action_dim,)
            self.agents[name] = nn.init_gaussian_head(widths, init_rng, cfg.policy_out_scale,
                                                      out_bias=initial_mean(spec, env_config))
        self.channels = agent_channels(cfg.scenario, list(self.specs))
        self.critics = {}
        for ch in sorted(set(self.channels.values())):
            widths = (obs_dim,) + (cfg.critic_width,) * cfg.hidden_layers + (1,)
            self.critics[ch] = nn.init_mlp(widths, init_rng)
        if warm_start:
            for name, params in warm_start.items():
                if name in self.agents:
                    self.agents[name] = params.copy()
                elif name.startswith("critic_") and name[7:] in self.critics:
                    self.critics[name[7:]] = params.copy()
        self.schedules = cfg.schedules()
        self.iteration = 0

    # -- one iteration of the loop
    def train_iteration(self) -> RolloutBuffer:
        cfg = self.cfg
        n = self.iteration
        step = {role: sched(n) for role, sched in self.schedules.items()}
        buffer = collect_rollouts(self.env_config, self.agents, self.critics, cfg.episodes, self.rollout_rng,
                                  self.perturbations)
        order = list(self.specs)
        if len(order) > 1:
            order = [order[k] for k in self.shuffle_rng.permutation(len(order))]
        size = len(buffer)
        batch = min(cfg.batch_size, size)
        for _ in range(cfg.minibatches):
            idx = self.shuffle_rng.choice(size, size=batch, replace=False)
            adv = {}
            for ch, critic in self.critics.items():
                a = compute_gae(buffer, critic, cfg.discount, cfg.gae_lambda, ch, cfg.reward_scale)
                if cfg.normalize_advantages:
                    a.advantages = (a.advantages - a.advantages.mean()) / (a.advantages.std() + 1e-8)
                adv[ch] = a
            obs = buffer.obs[idx]
            first = order[0]
            first_adv = adv[self.channels[first]].advantages[idx]
            self._update_agent(first, obs, buffer, idx, first_adv, step)
            for second in order[1:]:
                a2 = adv[self.channels[second]].advantages[idx]
                if self.channels[second] == self.channels[first]:
                    new_logp = nn.gaussian_logprob(self.agents[first], obs, buffer.raw[first][idx])
                    a2 = reweight_advantage(a2, buffer.logp[first][idx], new_logp)
                self._update_agent(second, obs, buffer, idx, a2, step)
            for ch, critic in self.critics.items():
                g = critic_grad(critic, obs, adv[ch].targets[idx])
                self.critics[ch] = nn.sgd_apply(critic, g, step["critic"], ascent=False)
        self.iteration += 1
        return buffer

    def _update_agent(self, name, obs, buffer, idx, advantages, step):
        head = self.agents[name]
        g, _ = clipped_surrogate_grad(head, obs, buffer.raw[name][idx], advantages, buffer.logp[name][idx],
                                      self.cfg.clip)
        self.agents[name] = nn.sgd_apply(head, g, step[self.specs[name].schedule], ascent=True)

    def evaluate(self, episodes: int | None = None) -> EvalMetrics:
        return evaluate_policy(self.env_config, self.agents, episodes or self.cfg.eval_episodes, True,
                               self.eval_seed, self.perturbations)

    def eval_points(self) -> list:
        cfg = self.cfg
        pts = set(range(min(cfg.eval_dense, cfg.iterations)))
        pts.update(range(0, cfg.iterations + 1, cfg.eval_every))
        pts.add(cfg.iterations)
        return sorted(pts)

    def snapshot(self) -> tuple:
        return ({k: v.copy() for k, v in self.agents.items()},
                {k: v.copy() for k, v in self.critics.items()})

    def train(self, callback=None) -> TrainResult:
        points = set(self.eval_points())
        evals = []
        diverged, message = False, ""
        while True:
            if self.iteration in points:
                evals.append(EvalPoint(self.iteration, self.evaluate()))
                if callback:
                    callback(self, evals[-1])
            if self.iteration >= self.cfg.iterations:
                break
            last = self.snapshot()
            try:
                with np.errstate(over="raise", invalid="raise"):
                    self.train_iteration()
            except (TrainingDivergence, FloatingPointError) as exc:
                self.agents, self.critics = last
                diverged, message = True, f"iteration {self.iteration}: {exc}"
                break
        return TrainResult(self.agents, self.critics, evals, diverged, message, self.iteration)

    def networks(self) -> dict:
        out = dict(self.agents)
        out.update({f"critic_{ch}": c for ch, c in self.critics.items()})
        return out

    def save(self, directory) -> None:
        meta = {"algorithm": self.cfg.algorithm, "scenario": self.cfg.scenario, "seed": self.seed,
                "iteration": self.iteration}
        nn.save_checkpoint(directory, self.networks(), meta)


def split_networks(networks: dict):
    agents = {k: v for k, v in networks.items() if not k.startswith("critic_")}
    critics = {k[7:]: v for k, v in networks.items() if k.startswith("critic_")}
    return agents, critics


def trainer_config_to_dict(cfg: TrainerConfig) -> dict:
    return asdict(cfg)


def trainer_config_from_dict(data: dict) -> TrainerConfig:
    known = set(TrainerConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown trainer key")
    data = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    return TrainerConfig(**data)
