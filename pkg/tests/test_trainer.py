import math

import numpy as np
import pytest

from tvfl.bounds import LatencyConfig, empirical_v
from tvfl.channel import draw_fading_power, exp_integral_e1
from tvfl.errors import ConfigError, DimensionMismatchError, StaleCacheError
from tvfl.scenario import ScenarioConfig, generate_dataset
from tvfl.splitnn import NetSpec, backward, forward, init_split_net, sgd_step
from tvfl.trainer import (
    RoundMetrics,
    StaleCache,
    TrainConfig,
    build_net,
    evaluate,
    read_metrics_csv,
    round_to_levels,
    run_round,
    schedule_round,
    su_channel,
    train,
    write_metrics_csv,
)

from oracles import nets_identical


@pytest.fixture(scope="module")
def data():
    return generate_dataset(ScenarioConfig(num_samples=60, train_count=40, minislots_per_slot=16, rng_seed=1))


def small_spec(act="relu"):
    return NetSpec((19, 6, 2), (8, 10, 8), 4, act)


def setup_round(data, seed=0):
    net = init_split_net(small_spec(), np.random.default_rng(seed))
    xs, y = data.inputs("train"), data.targets("train")
    cache = StaleCache(4, len(y), 2)
    return net, xs, y, np.arange(len(y)), cache


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(eta=-1.0), dict(eta=math.nan), dict(batch_size=0),
                                    dict(activation_ratio=0.0), dict(eval_every=0),
                                    dict(output_bias="zero"), dict(stop_at_target=True)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestSchedule:
    def test_round_zero_all_active(self):
        assert schedule_round(np.zeros(3), np.full(3, 5.0), 0).all()

    def test_tiny_threshold_all_active(self):
        assert schedule_round(np.array([1e-9, 0.2, 3.0]), np.full(3, 1e-300), 4).all()

    def test_huge_threshold_none_active(self):
        assert not schedule_round(np.array([1e-9, 0.2, 30.0]), np.full(3, np.inf), 4).any()

    def test_boundary_is_active(self):
        assert schedule_round(np.array([0.5]), np.array([0.5]), 1)[0]

    def test_activation_frequency(self):
        g = np.array([0.1, 0.3, 0.5])
        rng = np.random.default_rng(2)
        hits = np.zeros(3)
        rounds = 10_000
        for t in range(1, rounds + 1):
            hits += schedule_round(draw_fading_power(rng, 3), g, t)
        assert np.all(np.abs(hits / rounds / np.exp(-g) - 1) < 0.02)


class TestCache:
    def test_cold_read(self):
        with pytest.raises(StaleCacheError):
            StaleCache(2, 5, 3).read(1, [0, 4])

    def test_write_read(self):
        c = StaleCache(2, 5, 3)
        c.write(0, [1, 3], np.ones((2, 3)), 7)
        assert np.array_equal(c.read(0, [1, 3]), np.ones((2, 3)))
        assert c.refreshed[0, 1] == 7 and c.refreshed[0, 0] == -1
        assert not c.is_warm()


class TestRunRound:
    def test_all_active_is_standard_step(self, data):
        net, xs, y, idx, cache = setup_round(data)
        ref = net.copy()
        run_round(net, xs, y, idx, np.ones(4, bool), cache, 0.01, 0)
        g = backward(ref, forward(ref, xs), y)
        ref.central = sgd_step(ref.central, g[0], 0.01)
        ref.local = [sgd_step(t, gk, 0.01) for t, gk in zip(ref.local, g[1:])]
        assert nets_identical(net, ref)
        assert cache.is_warm()

    def test_empty_set_updates_only_central(self, data):
        net, xs, y, idx, cache = setup_round(data)
        run_round(net, xs, y, idx, np.ones(4, bool), cache, 0.01, 0)
        before, stored = net.copy(), cache.values.copy()
        run_round(net, xs, y, idx, np.zeros(4, bool), cache, 0.01, 1)
        assert all(np.array_equal(a[0], b[0]) for ta, tb in zip(net.local, before.local) for a, b in zip(ta, tb))
        assert not np.array_equal(net.central[0][0], before.central[0][0])
        assert np.array_equal(cache.values, stored)
        assert np.all(cache.refreshed == 0)

    def test_coherent_cache_matches_all_active(self, data):
        net, xs, y, idx, cache = setup_round(data)
        for k in range(4):
            cache.write(k, idx, forward(net, xs).local_outputs[k], 0)
        a, b = net.copy(), net.copy()
        mse_a, _ = run_round(a, xs, y, idx, np.ones(4, bool), cache, 0.01, 1)
        mse_b, _ = run_round(b, xs, y, idx, np.array([True, False, True, True]), cache, 0.01, 1)
        assert mse_a == mse_b
        assert nets_identical(type(a)(a.spec, a.central, [a.local[0], net.local[1], *a.local[2:]]), b)

    def test_cold_cache_for_silenced_su(self, data):
        net, xs, y, idx, cache = setup_round(data)
        with pytest.raises(StaleCacheError):
            run_round(net, xs, y, idx, np.array([True, False, True, True]), cache, 0.01, 1)

    def test_v_decomposition(self, data):
        net, xs, y, idx, cache = setup_round(data)
        run_round(net, xs, y, idx, np.ones(4, bool), cache, 0.01, 0)
        active = np.array([False, True, False, True])
        _, w = run_round(net, xs, y, idx, active, cache, 0.01, 1, track_v=True)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        m = RoundMetrics(1, active, 0.0, block_weights=w)
        assert abs(empirical_v([m]).v_t[0] - (w[0] + w[2] + w[4])) < 1e-12


class TestTrain:
    def channel(self, data):
        return su_channel(data.config, data.config.rng_seed)

    def test_zero_step_constant_loss(self, data):
        cfg = TrainConfig(eta=0.0, rounds=15, activation_ratio=0.4, eval_every=5)
        res = train(data, build_net(small_spec(), data, cfg), cfg, self.channel(data))
        assert len({m.train_mse for m in res.metrics}) == 1

    def test_deterministic(self, data, tmp_path):
        cfg = TrainConfig(eta=1e-3, rounds=20, activation_ratio=0.3, eval_every=4, seed=9)
        logs = []
        for i in range(2):
            res = train(data, build_net(small_spec(), data, cfg), cfg, self.channel(data))
            write_metrics_csv(res.metrics, tmp_path / f"m{i}.csv")
            logs.append((tmp_path / f"m{i}.csv").read_bytes())
        assert logs[0] == logs[1]

    def test_silenced_su_never_changes(self, data):
        cfg = TrainConfig(eta=1e-2, rounds=12, activation_ratio=0.2, eval_every=3, seed=4)
        net = build_net(small_spec(), data, cfg)
        state = {"prev": net.copy()}

        def check(m):
            for k in np.flatnonzero(~m.active):
                assert all(np.array_equal(W, W0) for (W, _), (W0, _) in zip(net.local[k], state["prev"].local[k]))
            state["prev"] = net.copy()

        res = train(data, net, cfg, self.channel(data), on_round=check)
        assert any(not m.active.all() for m in res.metrics)

    def test_metrics_invariants(self, data):
        cfg = TrainConfig(eta=1e-3, rounds=20, activation_ratio=0.5, eval_every=5)
        res = train(data, build_net(small_spec(), data, cfg), cfg, self.channel(data))
        t_cum = [m.t_cum for m in res.metrics]
        assert np.all(np.diff(t_cum) > 0)
        assert res.metrics[0].active.all()
        logged = [m for m in res.metrics if m.block_weights is not None]
        assert len(logged) == 4
        assert all(0 <= m.v_measured <= 1 + 1e-12 for m in logged)
        assert len(res.evaluated()) == 4

    def test_metrics_csv_round_trip(self, data, tmp_path):
        cfg = TrainConfig(eta=1e-3, rounds=9, activation_ratio=0.3, eval_every=3)
        res = train(data, build_net(small_spec(), data, cfg), cfg, self.channel(data))
        write_metrics_csv(res.metrics, tmp_path / "m.csv")
        header = (tmp_path / "m.csv").read_text().splitlines()[0]
        assert header == "round,active_set,train_mse,test_mse,v0,v_measured,t_comm_s,t_comp_s,t_cum_s,v_blocks"
        back = read_metrics_csv(tmp_path / "m.csv", 4)
        for a, b in zip(res.metrics, back):
            assert np.array_equal(a.active, b.active) and a.train_mse == b.train_mse and a.t_cum == b.t_cum
            assert (a.block_weights is None) == (b.block_weights is None)
            if a.block_weights is not None:
                assert np.array_equal(a.block_weights, b.block_weights) and a.v_measured == b.v_measured

    def test_dimension_mismatch(self, data):
        cfg = TrainConfig(rounds=1)
        net = init_split_net(NetSpec((19, 2), (6, 8), 3), np.random.default_rng(0))
        with pytest.raises(DimensionMismatchError):
            train(data, net, cfg, self.channel(data))

    def test_stop_at_target(self, data):
        cfg = TrainConfig(eta=1e-3, rounds=50, eval_every=2, target_mse=1e9, stop_at_target=True)
        res = train(data, build_net(small_spec(), data, cfg), cfg, self.channel(data))
        assert res.rounds_to_target == 2 and len(res.metrics) == 2
        assert res.latency_to_target == res.metrics[-1].t_cum

    def test_minibatch_keeps_cache_coherent(self, data):
        cfg = TrainConfig(eta=1e-3, rounds=10, batch_size=8, activation_ratio=0.2, eval_every=5)
        res = train(data, build_net(small_spec(), data, cfg), cfg, self.channel(data))
        assert all(math.isfinite(m.train_mse) for m in res.metrics)

    def test_latency_matches_weakest_su(self, data):
        ch = self.channel(data)
        cfg = TrainConfig(rounds=3, activation_ratio=0.5)
        lat = LatencyConfig.from_spec(small_spec(), data.train_count)
        res = train(data, build_net(small_spec(), data, cfg), cfg, ch, lat)
        weakest = int(np.argmin(ch.rho))
        assert exp_integral_e1(res.thresholds[weakest]) == pytest.approx(0.5, rel=1e-10)
        prx = ch.rho * ch.power_budget / exp_integral_e1(res.thresholds)
        assert np.allclose(prx, prx[0], rtol=1e-10)


class TestEvaluate:
    def test_perfect(self):
        y = np.array([[1.0, 2.0, 5, 5, 5, 6, 6, 6]])
        ev = evaluate(*lookup(y), y)
        assert ev.mse == 0 and np.all(ev.power_accuracy == 1) and np.all(ev.location_error == 0)

    def test_unit_shift(self):
        y = np.array([[1.0, 2.0, 5, 5, 5, 6, 6, 6], [2.0, 1.0, 1, 2, 3, 4, 5, 6]])
        shift = np.zeros(8)
        shift[0] = 1.0
        ev = evaluate(*lookup(y + shift), y)
        assert ev.mse == 1.0
        assert ev.power_accuracy[0] == 0.0 and ev.power_accuracy[1] == 1.0

    def test_level_three_shift_still_rounds_to_three(self):
        y = np.array([[3.0, 2.0, 5, 5, 5, 6, 6, 6]])
        ev = evaluate(*lookup(y + np.eye(8)[0]), y)
        assert ev.power_accuracy[0] == 1.0

    def test_location_error(self):
        y = np.zeros((1, 8))
        pred = y.copy()
        pred[0, 2:5] = (3.0, 4.0, 12.0)
        ev = evaluate(*lookup(pred), y)
        assert ev.location_error[0].tolist() == [13.0, 0.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(lookup(np.zeros((1, 8)))[0], [np.zeros((0, 19))] * 4, np.zeros((0, 8)))

    def test_round_to_levels(self):
        assert round_to_levels([0.2, 1.4, 1.6, 9.0]).tolist() == [1.0, 1.0, 2.0, 3.0]


def lookup(rows):
    """Linear net mapping a one-hot sample index on SU 1 to a fixed output row (at most two rows)."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    net = init_split_net(NetSpec((19, 2), (8, 8), 4, "linear"), np.random.default_rng(0))
    W1 = np.zeros((19, 2))
    W1[:2, :2] = np.eye(2)
    net.local = [[(W1, np.zeros(2))]] + [[(np.zeros((19, 2)), np.zeros(2))] for _ in range(3)]
    W0 = np.zeros((8, 8))
    W0[:n] = rows
    net.central = [(W0, np.zeros(8))]
    xs = [np.zeros((n, 19)) for _ in range(4)]
    xs[0][np.arange(n), np.arange(n)] = 1.0
    return net, xs
