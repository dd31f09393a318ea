import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from invrec.env import (DemandModel, Economics, Env, EnvConfig, JointAction, Perturbation, advance_willingness,
                        apply_perturbation, choice_probabilities, config_from_dict, config_to_dict, fulfill,
                        load_config, observe, period_profit, reset, sample_demand, save_config, step,
                        trajectory_rows, write_trajectory_csv)
from invrec.errors import ConfigError, DomainError, LifecycleError

nonneg = st.floats(0, 50, allow_nan=False)
vec2 = arrays(float, 2, elements=nonneg)


def zero_action(cfg):
    return JointAction(np.zeros(cfg.num_products), np.zeros((cfg.num_products, cfg.num_customers)))


def random_action(cfg, rng):
    return JointAction(rng.integers(0, int(cfg.order_cap) + 1, cfg.num_products).astype(float),
                       rng.random((cfg.num_products, cfg.num_customers)))


class TestConfig:
    def test_defaults(self):
        cfg = EnvConfig()
        assert (cfg.num_products, cfg.num_customers, cfg.horizon, cfg.lead_time) == (2, 5, 50, 2)
        assert cfg.order_cap == 5.0
        assert cfg.backlog_cap == 250.0

    @pytest.mark.parametrize("field,value", [
        ("num_products", 0), ("num_customers", -1), ("horizon", 2.5), ("lead_time", -1),
        ("lead_time", 11), ("decay", 1.0), ("willingness_cap", 0.0), ("fulfillment", "drop"),
        ("capacity", -3.0), ("discount", 0.0),
    ])
    def test_invalid_field_is_named(self, field, value):
        with pytest.raises(ConfigError) as info:
            EnvConfig(**{field: value})
        assert info.value.field == field

    def test_negative_price_rejected(self):
        with pytest.raises(ConfigError, match="econ.holding_cost"):
            Economics(holding_cost=-0.1)

    def test_json_round_trip(self, tmp_path):
        cfg = EnvConfig(num_products=3, lead_time=0, econ=Economics(sell_price=3.0),
                        demand_model=DemandModel("poisson", scale=2.0))
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg
        assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"num_product": 2})


class TestReset:
    def test_same_seed_same_state(self):
        a, b = reset(EnvConfig(), 7), reset(EnvConfig(), 7)
        for x, y in zip((a.on_hand, a.willingness), (b.on_hand, b.willingness)):
            assert np.array_equal(x, y)

    def test_initial_ranges(self):
        cfg = EnvConfig(num_customers=20, willingness_cap=5.0)
        rng = np.random.default_rng(0)
        stock, will = [], []
        for _ in range(10_000):
            s = reset(cfg, rng)
            stock.append(s.on_hand)
            will.append(s.willingness)
        stock, will = np.array(stock), np.array(will)
        assert set(np.unique(stock)) == set(range(11))
        assert will.min() >= 0 and will.max() <= 2.5
        st0 = reset(cfg, 0)
        assert st0.t == 0 and not st0.backlog.any() and not st0.pipeline.any()


class TestWillingness:
    def test_examples(self):
        assert advance_willingness(np.array([1.0]), np.array([0.0]), 0.9, 5.0)[0] == pytest.approx(0.9)
        assert advance_willingness(np.array([3.3]), np.array([1.0]), 0.9, 5.0)[0] == pytest.approx(5.0)
        assert advance_willingness(np.array([2.0]), np.array([0.5]), 0.9, 5.0)[0] == pytest.approx(3.4)

    def test_bad_intensity(self):
        with pytest.raises(DomainError):
            advance_willingness(np.ones(2), np.array([0.5, 1.2]), 0.9, 5.0)

    @given(arrays(float, (2, 3), elements=st.floats(0, 5)), arrays(float, (2, 3), elements=st.floats(0, 1)),
           st.floats(0.01, 0.99))
    def test_confined(self, r, a, eta):
        out = advance_willingness(r, a, eta, 5.0)
        assert np.all(out >= 0) and np.all(out <= 5.0 + 1e-12)


class TestDemand:
    def test_softmax_symmetry_and_normalization(self):
        assert np.allclose(choice_probabilities(np.full((4, 3), 2.0)), 0.25)
        g = choice_probabilities(np.random.default_rng(1).uniform(0, 5, (3, 7)))
        assert np.all(np.abs(g.sum(axis=0) - 1) <= 1e-12)

    def test_one_unit_per_customer(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d = sample_demand(rng.uniform(0, 5, (3, 4)), DemandModel(), rng)
            assert np.array_equal(d.sum(axis=0), np.ones(4))

    def test_frequencies_match_probabilities(self):
        rng = np.random.default_rng(3)
        r = np.array([[0.0, 2.0], [1.0, 0.5], [2.5, 0.0]])
        g = choice_probabilities(r)
        n = 100_000
        total = np.zeros_like(g)
        for _ in range(n // 1000):
            draws = [sample_demand(r, DemandModel(), rng) for _ in range(1000)]
            total += np.sum(draws, axis=0)
        freq = total / n
        se = np.sqrt(g * (1 - g) / n)
        assert np.all(np.abs(freq - g) <= 3 * se + 1e-12)

    @pytest.mark.parametrize("model", [DemandModel("multinomial", trials=3), DemandModel("poisson", scale=2.0),
                                       DemandModel("exponential", scale=2.0)])
    def test_variant_means(self, model):
        rng = np.random.default_rng(5)
        r = np.array([[1.0, 0.0], [0.0, 2.0]])
        g = choice_probabilities(r)
        mean = model.trials * g if model.variant == "multinomial" else model.scale * g
        draws = np.array([sample_demand(r, model, rng) for _ in range(20_000)])
        assert np.all(draws >= 0)
        assert np.allclose(draws.mean(axis=0), mean, atol=0.05)


class TestFulfill:
    def test_hand_trace(self):
        s, i, u = fulfill([2.0], [1.0], [1.0], [3.0])
        assert (s[0], u[0], i[0]) == (3.0, 1.0, 0.0)

    def test_no_demand(self):
        s, i, u = fulfill([2.0], [0.0], [1.0], [0.0])
        assert (s[0], i[0], u[0]) == (0.0, 3.0, 0.0)

    def test_negative_input(self):
        with pytest.raises(DomainError):
            fulfill([-1.0], [0.0], [0.0], [0.0])

    @given(vec2, vec2, vec2, vec2)
    def test_backlog_identities(self, i0, u0, arr, d):
        s, i1, u1 = fulfill(i0, u0, arr, d)
        assert np.all(i1 * u1 == 0)
        assert np.allclose(i1 - u1, i0 + arr - d - u0, atol=1e-9)
        assert np.all(s <= d + u0 + 1e-9) and np.all(s <= i0 + arr + 1e-9)

    @given(vec2, vec2, vec2, vec2)
    def test_lost_sales_drops_backlog(self, i0, u0, arr, d):
        s, i1, u1 = fulfill(i0, u0, arr, d, "lost_sales")
        assert not u1.any()
        assert np.all(s <= d + 1e-12)


class TestProfit:
    def test_zero(self):
        z = np.zeros(2)
        _, c, r = period_profit(z, z, z, z, np.zeros((2, 3)), Economics())
        assert c == 0 and r == 0

    def test_examples(self):
        econ = Economics(sell_price=2.0, buy_price=1.0, holding_cost=0.1, backlog_cost=0.5, rec_unit_cost=0.025)
        _, _, r = period_profit([1, 0], [0, 0], [0, 0], [0, 1], np.zeros((2, 3)), econ)
        assert r == pytest.approx(1.5)
        _, c, _ = period_profit(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), np.ones((2, 3)), econ)
        assert c == pytest.approx(0.15)


class TestPerturbation:
    def test_amplitude_zero(self):
        p = Perturbation("demand", 0.0, 8)
        assert apply_perturbation(2.0, p, 3, 0) == 2.0

    def test_peak(self):
        p = Perturbation("willingness", 1.4, 8, rounding=False)
        assert apply_perturbation(2.0, p, 2, 0) == pytest.approx(3.4)
        assert apply_perturbation(2.0, Perturbation("demand", 1.4, 8), 2, 0) == 3.0

    def test_clipped_to_range(self):
        assert apply_perturbation(0.0, Perturbation("demand", 3.0, 4), 3, 0) == 0.0

    def test_phase_validation(self):
        with pytest.raises(ConfigError):
            Perturbation("demand", 1.0, 4, phases=(0.0, 4.0))


class TestStep:
    def test_lead_time_one(self):
        cfg = EnvConfig(lead_time=1)
        s = reset(cfg, 0)
        rng = np.random.default_rng(0)
        act = JointAction(np.array([3.0, 0.0]), np.zeros((2, 5)))
        out = step(cfg, s, act, rng)
        assert not out.arrived.any()
        out2 = step(cfg, out.new_state, zero_action(cfg), rng)
        assert out2.arrived[0] == 3.0

    def test_lead_time_zero_arrives_now(self):
        cfg = EnvConfig(lead_time=0)
        out = step(cfg, reset(cfg, 0), JointAction(np.array([2.0, 1.0]), np.zeros((2, 5))),
                   np.random.default_rng(0))
        assert np.array_equal(out.arrived, [2.0, 1.0])

    def test_zero_demand_only_decays(self):
        cfg = EnvConfig(demand_model=DemandModel("poisson", scale=0.0))
        s = reset(cfg, 1)
        out = step(cfg, s, zero_action(cfg), np.random.default_rng(0))
        ns = out.new_state
        assert ns.t == 1
        assert np.array_equal(ns.on_hand, s.on_hand) and np.array_equal(ns.backlog, s.backlog)
        assert np.allclose(ns.willingness, 0.9 * s.willingness)

    def test_reward_reconciles(self):
        cfg = EnvConfig()
        env = Env(cfg, 4)
        env.reset()
        rng = np.random.default_rng(1)
        while not env.done:
            out = env.step(random_action(cfg, rng))
            assert out.reward == pytest.approx(out.profit.sum() - out.rec_cost, abs=1e-12)

    def test_beyond_horizon(self):
        cfg = EnvConfig(horizon=1)
        env = Env(cfg, 0)
        env.reset()
        env.step(zero_action(cfg))
        with pytest.raises(LifecycleError):
            env.step(zero_action(cfg))

    def test_step_before_reset(self):
        with pytest.raises(LifecycleError):
            Env(EnvConfig(), 0).step(zero_action(EnvConfig()))

    def test_infeasible_action(self):
        cfg = EnvConfig()
        with pytest.raises(DomainError):
            step(cfg, reset(cfg, 0), JointAction(np.array([6.0, 0.0]), np.zeros((2, 5))), np.random.default_rng(0))

    def test_episode_net_flow(self):
        cfg = EnvConfig(lead_time=2)
        rng = np.random.default_rng(11)
        for ep in range(100):
            env = Env(cfg, ep)
            env.reset()
            s0 = env.state
            arrived = sold = demanded = 0.0
            while not env.done:
                out = env.step(random_action(cfg, rng))
                arrived += out.arrived
                sold += out.sales
                demanded += out.demand
            end = env.state
            # sales clear backlog too, so stock alone balances against sales
            assert np.allclose(end.on_hand, s0.on_hand + arrived - sold, atol=1e-9)
            assert np.allclose(end.on_hand - end.backlog, s0.on_hand + arrived - demanded, atol=1e-9)

    def test_reproducible(self):
        cfg = EnvConfig()
        acts = [random_action(cfg, np.random.default_rng(k)) for k in range(cfg.horizon)]

        def run():
            env = Env(cfg, 9)
            env.reset()
            return [env.step(a) for a in acts]

        for a, b in zip(run(), run()):
            assert np.array_equal(a.sales, b.sales) and a.reward == b.reward
            assert np.array_equal(a.new_state.willingness, b.new_state.willingness)


class TestObserve:
    def test_layout(self):
        cfg = EnvConfig(num_products=2, num_customers=3, lead_time=2)
        s = reset(cfg, 0)
        s.on_hand[:] = 0
        obs = observe(s, cfg)
        assert obs.shape == (12,) == (cfg.obs_dim,)
        assert not obs[:2].any()

    def test_range_audit(self):
        cfg = EnvConfig()
        rng = np.random.default_rng(2)
        for ep in range(20):
            env = Env(cfg, ep)
            env.reset()
            while not env.done:
                # ordering nothing drives the backlog as high as it can go
                act = zero_action(cfg) if ep % 2 else random_action(cfg, rng)
                env.step(act)
                o = env.observe()
                assert np.all(o >= -1) and np.all(o <= 1)


class TestTrajectoryCsv:
    def test_columns(self, tmp_path):
        cfg = EnvConfig()
        env = Env(cfg, 0)
        env.reset()
        out = env.step(zero_action(cfg))
        path = tmp_path / "t.csv"
        write_trajectory_csv(trajectory_rows(0, 0, 0, out), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "seed,episode,t,product,I,U,arrived,D,S,sum_alpha,P,reward"
        assert len(lines) == 3
