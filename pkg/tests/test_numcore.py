import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from preflab.numcore import (
    Adam,
    ContractError,
    DenseNet,
    NumericError,
    StaleTraceError,
    backprop,
    bce_from_logit_gap,
    bce_terms,
    forward,
    gaussian_nll,
    gaussian_nll_terms,
    soft_clamp_log_std,
)
from oracles import assert_rel_close, fd_grad


class TestForward:
    def test_zero_net_gives_zero(self):
        net = DenseNet([3, 5, 2], zero=True)
        np.testing.assert_array_equal(forward(net, [1.0, -2.0, 3.0]), np.zeros(2))

    def test_identity_linear_layer(self):
        net = DenseNet([3, 3], zero=True)
        net.weights[0][...] = np.eye(3)
        x = np.array([0.3, -1.2, 7.0])
        np.testing.assert_array_equal(forward(net, x), x)

    def test_two_layer_tanh_matches_hand_expansion(self):
        net = DenseNet([2, 2, 1], "tanh", zero=True)
        net.weights[0][...] = [[0.5, -0.3], [0.2, 0.8]]
        net.biases[0][...] = [0.1, -0.2]
        net.weights[1][...] = [[1.5], [-0.7]]
        net.biases[1][...] = [0.05]
        h1 = math.tanh(0.5 * 1.0 + 0.2 * 2.0 + 0.1)
        h2 = math.tanh(-0.3 * 1.0 + 0.8 * 2.0 - 0.2)
        expected = 1.5 * h1 - 0.7 * h2 + 0.05
        assert forward(net, [1.0, 2.0])[0] == pytest.approx(expected, abs=1e-15)

    def test_dimension_mismatch_names_lengths(self):
        net = DenseNet([3, 4, 1])
        with pytest.raises(ContractError, match="expected 3, got 2"):
            forward(net, [1.0, 2.0])

    def test_deterministic_bit_pattern(self):
        net = DenseNet([4, 16, 3], rng=np.random.default_rng(5))
        x = np.random.default_rng(1).normal(size=4)
        assert forward(net, x).tobytes() == forward(net, x).tobytes()

    def test_batch_rows_match_single_calls(self):
        net = DenseNet([3, 8, 2], rng=np.random.default_rng(2))
        xs = np.random.default_rng(3).normal(size=(5, 3))
        batch = net.forward(xs)
        for i in range(5):
            np.testing.assert_allclose(batch[i], net.forward(xs[i]), rtol=0, atol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 9), min_size=2, max_size=5), st.integers(0, 2**31))
    def test_output_dim_and_param_shapes(self, sizes, seed):
        net = DenseNet(sizes, "tanh", rng=np.random.default_rng(seed))
        x = np.ones(sizes[0])
        y, trace = net.forward_trace(x)
        assert y.shape == (sizes[-1],)
        grads = net.backprop(np.ones(sizes[-1]), trace)
        assert [g.shape for g in grads] == [p.shape for p in net.params()]

    def test_initialization_bounds(self):
        net = DenseNet([10, 30, 4], rng=np.random.default_rng(0))
        for w in net.weights:
            fan_in, fan_out = w.shape
            assert np.abs(w).max() <= math.sqrt(6.0 / (fan_in + fan_out))


class TestBackprop:
    def test_linear_chain_rule(self):
        net = DenseNet([1, 1], zero=True)
        net.weights[0][0, 0] = 2.0
        _, trace = net.forward_trace([3.0])
        grads = backprop(net, [1.0], trace)
        assert grads[0][0, 0] == 3.0
        assert grads[1][0] == 1.0

    def test_zero_output_gradient(self):
        net = DenseNet([3, 4, 2], rng=np.random.default_rng(0))
        _, trace = net.forward_trace(np.ones(3))
        for g in backprop(net, np.zeros(2), trace):
            assert not g.any()

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, activation, seed):
        rng = np.random.default_rng(seed)
        net = DenseNet([3, 4, 2], activation, rng=rng)
        for b in net.biases:
            b[...] = rng.normal(scale=0.3, size=b.shape)
        x = rng.normal(size=3)
        c = rng.normal(size=2)
        _, trace = net.forward_trace(x)
        analytic = np.concatenate([g.ravel() for g in net.backprop(c, trace)])
        theta = net.get_flat()
        probe = net.copy()

        def loss(flat):
            probe.set_flat(flat)
            return float(c @ probe.forward(x))

        assert_rel_close(analytic, fd_grad(loss, theta))

    def test_input_gradient(self):
        rng = np.random.default_rng(7)
        net = DenseNet([3, 6, 1], "tanh", rng=rng)
        x = rng.normal(size=3)
        _, trace = net.forward_trace(x)
        _, dx = net.backprop([1.0], trace, input_grad=True)
        assert_rel_close(dx, fd_grad(lambda v: float(net.forward(v)[0]), x))

    def test_stale_trace_rejected(self):
        net = DenseNet([2, 3, 1], rng=np.random.default_rng(0))
        _, trace = net.forward_trace(np.ones(2))
        grads = net.backprop([1.0], trace)
        Adam(lr=0.1).step(net, grads)
        with pytest.raises(StaleTraceError):
            net.backprop([1.0], trace)

    def test_trace_from_other_network_rejected(self):
        a = DenseNet([2, 3, 1], rng=np.random.default_rng(0))
        b = a.copy()
        _, trace = a.forward_trace(np.ones(2))
        with pytest.raises(StaleTraceError):
            b.backprop([1.0], trace)


class TestGaussianNLL:
    def test_at_mode(self):
        assert gaussian_nll([1.5], [0.0], [1.5]) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
        assert gaussian_nll([0.0], [0.0], [0.0]) == pytest.approx(0.9189385, abs=1e-7)

    def test_unit_shift(self):
        assert gaussian_nll([1.0], [0.0], [0.0]) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, abs=1e-12)

    def test_diagonal_factorization(self):
        m, s, t = [0.3, -1.0], [0.2, -0.4], [1.0, 0.5]
        two = gaussian_nll(m, s, t)
        one = gaussian_nll(m[:1], s[:1], t[:1]) + gaussian_nll(m[1:], s[1:], t[1:])
        assert two == pytest.approx(one, abs=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            gaussian_nll([np.nan], [0.0], [0.0])

    def test_minimized_at_target_on_grid(self):
        grid = np.linspace(-2, 2, 401)
        vals = [gaussian_nll([m], [0.3], [0.4]) for m in grid]
        assert grid[int(np.argmin(vals))] == pytest.approx(0.4, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_partials_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m, s, t = rng.normal(size=3), rng.uniform(-2, 1, size=3), rng.normal(size=3)
        _, dm, ds = gaussian_nll_terms(m, s, t)
        assert_rel_close(dm, fd_grad(lambda v: gaussian_nll(v, s, t), m))
        assert_rel_close(ds, fd_grad(lambda v: gaussian_nll(m, v, t), s))

    def test_soft_clamp_range_and_derivative(self):
        raw = np.linspace(-30, 30, 121)
        val, d = soft_clamp_log_std(raw)
        assert np.all(val >= -5.0) and np.all(val <= 2.0)
        h = 1e-6
        fd = (soft_clamp_log_std(raw + h)[0] - soft_clamp_log_std(raw - h)[0]) / (2 * h)
        np.testing.assert_allclose(d, fd, atol=1e-8)


class TestBCE:
    def test_zero_gap(self):
        assert bce_from_logit_gap(0.0, 1) == pytest.approx(math.log(2), abs=1e-15)

    def test_ln2_gap(self):
        assert bce_from_logit_gap(math.log(2), 1) == pytest.approx(math.log(1.5), abs=1e-14)

    def test_large_negative_gap_is_stable(self):
        assert bce_from_logit_gap(-50.0, 1) == pytest.approx(50.0, abs=1e-12)
        assert bce_from_logit_gap(800.0, 0) == pytest.approx(800.0)

    def test_label_zero_mirrors_label_one(self):
        assert bce_from_logit_gap(1.3, 0) == pytest.approx(bce_from_logit_gap(-1.3, 1), abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-40, 40))
    def test_symmetric_sum_at_least_2ln2(self, g):
        total = bce_from_logit_gap(g, 1) + bce_from_logit_gap(-g, 1)
        assert total >= 2 * math.log(2) - 1e-15
        if g == 0:
            assert total == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_symmetric_sum_strict_away_from_zero(self):
        assert bce_from_logit_gap(0.1, 1) + bce_from_logit_gap(-0.1, 1) > 2 * math.log(2)

    def test_gradient(self):
        gaps = np.linspace(-6, 6, 25)
        for y in (0, 1):
            _, d = bce_terms(gaps, y)
            fd = np.array([(bce_from_logit_gap(g + 1e-6, y) - bce_from_logit_gap(g - 1e-6, y)) / 2e-6 for g in gaps])
            assert_rel_close(d, fd)


class TestAdamAndCheckpoints:
    def test_accumulator_shapes_and_descent(self):
        rng = np.random.default_rng(0)
        net = DenseNet([2, 8, 1], "tanh", rng=rng)
        opt = Adam(lr=1e-2)
        x = rng.normal(size=(64, 2))
        y = (x[:, :1] - 2 * x[:, 1:]) * 0.5
        losses = []
        for _ in range(200):
            out, tr = net.forward_trace(x)
            losses.append(float(np.mean((out - y) ** 2)))
            opt.step(net, net.backprop(2 * (out - y) / len(x), tr))
            assert [m.shape for m in opt.m] == [p.shape for p in net.params()]
        assert losses[-1] < 0.1 * losses[0]

    def test_identical_seed_identical_trajectory(self):
        def run():
            rng = np.random.default_rng(11)
            net = DenseNet([3, 5, 1], rng=rng)
            opt = Adam(lr=1e-3)
            x = rng.normal(size=(16, 3))
            for _ in range(20):
                out, tr = net.forward_trace(x)
                opt.step(net, net.backprop(out - 1.0, tr))
            return net.get_flat().tobytes()

        assert run() == run()

    def test_checkpoint_round_trip(self, tmp_path):
        net = DenseNet([3, 7, 2], ["tanh"], rng=np.random.default_rng(4))
        net.save(tmp_path / "n.bin", elite=True)
        loaded, head = DenseNet.load(tmp_path / "n.bin")
        assert head["elite"] is True and head["layer_sizes"] == [3, 7, 2]
        assert loaded.get_flat().tobytes() == net.get_flat().tobytes()
        assert loaded.activations == ["tanh"]

    def test_truncated_checkpoint_rejected(self, tmp_path):
        blob = DenseNet([2, 2]).to_bytes()
        with pytest.raises(ContractError):
            DenseNet.from_bytes(blob[:-3])
