import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    MonolithicNet,
    fd_gradients,
    loop_split_forward,
    max_relative_error,
    nets_identical,
    random_split_problem,
)
from tvfl.errors import (
    CheckpointFormatError,
    ConfigError,
    ConvergedError,
    DimensionMismatchError,
    StaleCacheError,
)
from tvfl.splitnn import (
    LossSpec,
    NetSpec,
    SplitNet,
    backward,
    central_backward,
    central_forward,
    forward,
    grad_block_weights,
    init_split_net,
    load_checkpoint,
    local_backward,
    local_forward,
    loss,
    network_i,
    network_ii,
    save_checkpoint,
    sgd_step,
)


def tiny_net(act="relu", K=2):
    return init_split_net(NetSpec((3, 4, 2), (2 * K, 5, 3), K, act), np.random.default_rng(0))


class TestSpec:
    def test_presets(self):
        assert network_i().local_arch == (203, 2048, 8)
        assert network_i().central_arch == (32, 24, 8)
        assert network_ii().local_arch == (203, 32, 8)
        assert network_ii().central_arch == (32, 512, 8)

    def test_central_width_must_match(self):
        with pytest.raises(DimensionMismatchError):
            NetSpec((3, 2), (5, 1), 2)

    def test_bad_activation(self):
        with pytest.raises(ConfigError):
            NetSpec((3, 2), (2, 1), 1, "sigmoid")

    def test_zero_hidden_width_allowed(self):
        net = init_split_net(NetSpec((3, 0, 2), (2, 1), 1), np.random.default_rng(0))
        out = forward(net, [np.ones((4, 3))]).yhat
        # the local output reduces to its bias
        assert np.allclose(out, out[0])


class TestForward:
    def test_tiny_example(self):
        # one SU, identity weights
        spec = NetSpec((2, 2), (2, 1), 1, "linear")
        net = SplitNet(spec, [(np.array([[1.0], [2.0]]), np.array([0.5]))], [[(np.eye(2), np.zeros(2))]])
        yhat = forward(net, [np.array([[1.0, 1.0], [2.0, -1.0]])]).yhat
        assert np.array_equal(yhat, [[3.5], [0.5]])

    @settings(max_examples=25)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["relu", "tanh", "linear"]))
    def test_matches_loop_oracle(self, seed, act):
        net, xs, _ = random_split_problem(np.random.default_rng(seed), activation=act)
        assert np.allclose(forward(net, xs).yhat, loop_split_forward(net, xs), rtol=1e-12, atol=1e-12)

    def test_input_width_checked(self):
        net = tiny_net()
        with pytest.raises(DimensionMismatchError):
            local_forward(net.local[0], np.ones((2, 4)), net.spec)

    def test_block_count_checked(self):
        net = tiny_net()
        with pytest.raises(DimensionMismatchError):
            central_forward(net.central, [np.ones((2, 2))], net.spec)

    def test_block_width_checked(self):
        net = tiny_net()
        with pytest.raises(DimensionMismatchError):
            central_forward(net.central, [np.ones((2, 2)), np.ones((2, 3))], net.spec)

    def test_su_permutation(self):
        # swapping SU inputs together with their models only permutes the central input rows
        net = tiny_net(K=3)
        rng = np.random.default_rng(1)
        xs = [rng.normal(size=(5, 3)) for _ in range(3)]
        perm = [2, 0, 1]
        W0, b0 = net.central[0]
        rows = np.concatenate([np.arange(2 * k, 2 * k + 2) for k in perm])
        swapped = SplitNet(net.spec, [(W0[rows], b0), *net.central[1:]], [net.local[k] for k in perm])
        assert np.allclose(forward(net, xs).yhat, forward(swapped, [xs[k] for k in perm]).yhat, rtol=1e-13)


class TestLoss:
    def test_example(self):
        assert loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])) == 5.0
        assert loss(np.zeros((2, 1)), np.array([[1.0], [3.0]])) == 5.0

    def test_penalty(self):
        net = tiny_net()
        base = loss(np.zeros((1, 3)), np.ones((1, 3)))
        sq = sum((W ** 2).sum() + (b ** 2).sum() for t in net.blocks() for W, b in t)
        assert loss(np.zeros((1, 3)), np.ones((1, 3)), net, LossSpec(0.1)) == pytest.approx(base + 0.1 * sq)

    def test_errors(self):
        with pytest.raises(ValueError):
            loss(np.zeros((0, 1)), np.zeros((0, 1)))
        with pytest.raises(DimensionMismatchError):
            loss(np.zeros((2, 1)), np.zeros((2, 2)))
        with pytest.raises(ConfigError):
            LossSpec(-1.0)


class TestGradients:
    @settings(max_examples=10)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["relu", "tanh"]), st.sampled_from([0.0, 0.05]))
    def test_finite_differences(self, seed, act, lam):
        rng = np.random.default_rng(seed)
        net, xs, y = random_split_problem(rng, max_width=6, activation=act)
        ls = LossSpec(lam)
        analytic = backward(net, forward(net, xs), y, ls)
        assert max_relative_error(analytic, fd_gradients(net, xs, y, ls)) < 1e-5

    def test_small_step_descends(self):
        rng = np.random.default_rng(3)
        net, xs, y = random_split_problem(rng, activation="tanh", n=8)
        before = loss(forward(net, xs).yhat, y)
        g = backward(net, forward(net, xs), y)
        net.central = sgd_step(net.central, g[0], 1e-3)
        net.local = [sgd_step(t, gk, 1e-3) for t, gk in zip(net.local, g[1:])]
        assert loss(forward(net, xs).yhat, y) < before

    def test_stale_cache_guards(self):
        net = tiny_net()
        xs = [np.ones((2, 3))] * 2
        b = forward(net, xs)
        with pytest.raises(StaleCacheError):
            central_backward(net.central, b, np.ones((3, 3)), net.spec)
        with pytest.raises(StaleCacheError):
            local_backward(net.local[0], [], np.ones((2, 2)), net.spec)
        with pytest.raises(StaleCacheError):
            local_backward(net.local[0], b.local_caches[0], np.ones((3, 2)), net.spec)

    def test_eta_zero_is_identity(self):
        net = tiny_net()
        g = backward(net, forward(net, [np.ones((2, 3))] * 2), np.ones((2, 3)))
        after = sgd_step(net.central, g[0], 0.0)
        assert all(np.array_equal(W, W2) for (W, _), (W2, _) in zip(net.central, after))


class TestBlockWeights:
    @settings(max_examples=20)
    @given(st.integers(0, 2**32 - 1))
    def test_probability_vector(self, seed):
        net, xs, y = random_split_problem(np.random.default_rng(seed))
        w = grad_block_weights(backward(net, forward(net, xs), y))
        assert w.shape == (net.spec.num_su + 1,)
        assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_example(self):
        g = [[(np.array([[3.0]]), np.array([0.0]))], [(np.array([[0.0]]), np.array([4.0]))]]
        assert np.allclose(grad_block_weights(g), [9 / 25, 16 / 25])

    def test_all_zero(self):
        g = [[(np.zeros((1, 1)), np.zeros(1))]] * 2
        with pytest.raises(ConvergedError):
            grad_block_weights(g)


class TestMonolithicEquivalence:
    @pytest.mark.parametrize("act", ["relu", "tanh"])
    def test_bit_identical_after_training(self, act):
        rng = np.random.default_rng(5)
        spec = NetSpec((7, 6, 3), (9, 10, 4), 3, act)
        net = init_split_net(spec, rng)
        xs = [rng.normal(size=(20, 7)) for _ in range(3)]
        y = rng.normal(size=(20, 4))
        mono = MonolithicNet(net)
        X = np.concatenate(xs, axis=1)
        for _ in range(30):
            g = backward(net, forward(net, xs), y)
            net.central = sgd_step(net.central, g[0], 0.01)
            net.local = [sgd_step(t, gk, 0.01) for t, gk in zip(net.local, g[1:])]
            mono.step(X, y, 0.01)
        assert mono.off_diagonal_is_zero()
        assert nets_identical(net, mono.to_split(spec))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = tiny_net("tanh", K=3)
        save_checkpoint(net, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.spec == net.spec
        assert nets_identical(back, net)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m").write_bytes(b"nonsense-bytes-here")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "m")

    def test_truncated(self, tmp_path):
        save_checkpoint(tiny_net(), tmp_path / "m")
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "m").write_bytes(raw[:-9])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "m")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(tiny_net(), tmp_path / "m")
        with open(tmp_path / "m", "ab") as fh:
            fh.write(b"\0" * 8)
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / "m")
