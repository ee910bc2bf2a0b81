import numpy as np
import pytest

from amtfnet.tensor import ShapeError, Tensor, grad_check
from amtfnet.layers import (
    GRU_KEYS,
    ParamSpec,
    conv1d,
    depthwise_conv1d,
    dropout,
    gru_sequence,
    gru_step,
    init_params,
    instance_norm,
    linear,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def naive_depthwise(x, kernel, bias):
    """Direct per-position convolution oracle (zero 'same' padding)."""
    v, w = x.shape
    n = kernel.shape[1]
    p = (n - 1) // 2
    y = np.zeros_like(x)
    for m in range(v):
        for t in range(w):
            acc = 0.0
            for i in range(n):
                src = t + i - p
                if 0 <= src < w:
                    acc += kernel[m, i] * x[m, src]
            y[m, t] = acc + bias[m]
    return y


def naive_conv1d(x, kernel, bias):
    c, w = x.shape
    o, _, n = kernel.shape
    p = (n - 1) // 2
    y = np.zeros((o, w))
    for oo in range(o):
        for t in range(w):
            acc = 0.0
            for cc in range(c):
                for i in range(n):
                    src = t + i - p
                    if 0 <= src < w:
                        acc += kernel[oo, cc, i] * x[cc, src]
            y[oo, t] = acc + bias[oo]
    return y


class TestDepthwiseConv:
    def test_identity_kernel(self):
        x = Tensor(rng().normal(size=(3, 8)))
        k = Tensor(np.tile([0.0, 1.0, 0.0], (3, 1)))
        out = depthwise_conv1d(x, k, Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_derived_edge_example(self):
        out = depthwise_conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]),
                               Tensor([[1.0, 0.0, -1.0]]), Tensor([0.0]))
        assert np.array_equal(out.data, [[-2.0, -2.0, -2.0, 3.0]])

    def test_zero_kernel_zero_bias(self):
        out = depthwise_conv1d(Tensor(rng().normal(size=(2, 6))),
                               Tensor(np.zeros((2, 5))), Tensor(np.zeros(2)))
        assert not out.data.any()

    @pytest.mark.parametrize("n", [3, 5, 7, 9])
    def test_matches_direct_oracle(self, n):
        x = rng(n).normal(size=(4, 12))
        k = rng(n + 1).normal(size=(4, n))
        b = rng(n + 2).normal(size=4)
        out = depthwise_conv1d(Tensor(x), Tensor(k), Tensor(b))
        assert np.allclose(out.data, naive_depthwise(x, k, b), atol=1e-13)

    def test_batched_matches_per_sample(self):
        xs = rng(5).normal(size=(3, 2, 9))
        k = rng(6).normal(size=(2, 5))
        b = rng(7).normal(size=2)
        batched = depthwise_conv1d(Tensor(xs), Tensor(k), Tensor(b))
        for i in range(3):
            single = depthwise_conv1d(Tensor(xs[i]), Tensor(k), Tensor(b))
            assert np.array_equal(batched.data[i], single.data)

    def test_never_mixes_channels(self):
        x = rng(8).normal(size=(4, 10))
        k = rng(9).normal(size=(4, 3))
        b = rng(10).normal(size=4)
        base = depthwise_conv1d(Tensor(x), Tensor(k), Tensor(b)).data
        for ch in range(4):
            xp = x.copy()
            xp[ch] += rng(ch).normal(size=10)
            out = depthwise_conv1d(Tensor(xp), Tensor(k), Tensor(b)).data
            changed = np.abs(out - base).sum(axis=1) > 0
            assert changed[ch] and not changed[np.arange(4) != ch].any()

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            depthwise_conv1d(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 4))),
                             Tensor(np.zeros(2)))

    def test_kernel_longer_than_signal_rejected(self):
        with pytest.raises(ShapeError):
            depthwise_conv1d(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5))),
                             Tensor(np.zeros(2)))

    def test_gradients(self):
        rep = grad_check(
            lambda ts: depthwise_conv1d(ts[0], ts[1], ts[2]).tanh().sum(),
            [Tensor(rng(1).normal(size=(2, 3, 7))), Tensor(rng(2).normal(size=(3, 5))),
             Tensor(rng(3).normal(size=3))])
        assert rep.max_rel_error < 1e-5


class TestConv1d:
    def test_single_channel_passthrough(self):
        x = Tensor(rng().normal(size=(1, 6)))
        out = conv1d(x, Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0]))
        assert np.array_equal(out.data, x.data)

    def test_center_tap_sums_constant_channels(self):
        x = Tensor(np.vstack([np.ones(4), 2.0 * np.ones(4)]))
        k = np.zeros((1, 2, 3))
        k[0, :, 1] = 1.0  # center tap on both channels
        out = conv1d(x, Tensor(k), Tensor([0.0]))
        assert np.array_equal(out.data, 3.0 * np.ones((1, 4)))

    def test_zero_kernel_broadcasts_bias(self):
        out = conv1d(Tensor(rng().normal(size=(2, 5))),
                     Tensor(np.zeros((3, 2, 3))), Tensor([1.0, -2.0, 0.5]))
        assert np.array_equal(out.data, np.array([1.0, -2.0, 0.5])[:, None] * np.ones((3, 5)))

    def test_matches_direct_oracle(self):
        x = rng(11).normal(size=(3, 9))
        k = rng(12).normal(size=(2, 3, 5))
        b = rng(13).normal(size=2)
        out = conv1d(Tensor(x), Tensor(k), Tensor(b))
        assert np.allclose(out.data, naive_conv1d(x, k, b), atol=1e-13)

    def test_gradients(self):
        rep = grad_check(
            lambda ts: conv1d(ts[0], ts[1], ts[2]).sigmoid().sum(),
            [Tensor(rng(1).normal(size=(2, 2, 6))), Tensor(rng(2).normal(size=(3, 2, 3))),
             Tensor(rng(3).normal(size=3))])
        assert rep.max_rel_error < 1e-5


class TestInstanceNorm:
    def test_constant_channel_maps_to_zero(self):
        out = instance_norm(Tensor([[5.0, 5.0, 5.0]]))
        assert np.array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_derived_values(self):
        out = instance_norm(Tensor([[1.0, 2.0, 3.0]]), eps=1e-14)
        root = np.sqrt(3.0 / 2.0)
        assert np.allclose(out.data, [[-root, 0.0, root]], atol=1e-6)

    def test_mean_and_std_contract(self):
        x = rng(4).normal(size=(6, 40)) * rng(5).uniform(0.5, 3.0, size=(6, 1))
        out = instance_norm(Tensor(x), eps=1e-5).data
        assert np.abs(out.mean(axis=1)).max() < 1e-10
        s = x.std(axis=1)
        predicted = s / np.sqrt(s ** 2 + 1e-5)
        assert np.abs(out.std(axis=1) - predicted).max() < 1e-9

    def test_affine_shift_invariance(self):
        # norm(a*x + c) ~ sign(a) * norm(x) as eps -> 0
        x = rng(6).normal(size=(4, 32))
        base = instance_norm(Tensor(x), eps=1e-8).data
        for a, c in ((2.5, 7.0), (-1.3, -4.0), (0.04, 100.0)):
            out = instance_norm(Tensor(a * x + c), eps=1e-8).data
            ref = np.sign(a) * base
            rel = np.linalg.norm(out - ref) / np.linalg.norm(ref)
            assert rel < 1e-4, (a, c, rel)

    def test_gradients(self):
        rep = grad_check(lambda ts: instance_norm(ts[0]).relu().sum(),
                         [Tensor(rng(7).normal(size=(2, 3, 8)))])
        assert rep.max_rel_error < 1e-5


def gru_params(hidden, d, seed=None, zeros=False):
    out = {}
    r = rng(seed or 0)
    for k in GRU_KEYS:
        if k in ("W_r", "W", "W_z"):
            shape = (hidden, d)
        elif k in ("U_r", "U", "U_z"):
            shape = (hidden, hidden)
        else:
            shape = (hidden,)
        data = np.zeros(shape) if zeros else r.normal(size=shape)
        out[k] = Tensor(data, requires_grad=True)
    return out


def straight_line_gru(b, h, p):
    """Independent elementwise transcription of the update equations."""
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    r = sig(p["W_r"].data @ b + p["U_r"].data @ h + p["b_r"].data)
    hcand = np.tanh(p["W"].data @ b + p["U"].data @ (r * h) + p["b_h"].data)
    z = sig(p["W_z"].data @ b + p["U_z"].data @ h + p["b_z"].data)
    return (1.0 - z) * h + z * hcand


class TestGRU:
    def test_zero_weight_fixed_form(self):
        p = gru_params(3, 4, zeros=True)
        out = gru_step(Tensor(np.zeros(4)), Tensor([1.0, 2.0, 4.0]), p)
        assert np.array_equal(out.data, [0.5, 1.0, 2.0])

    def test_scalar_hand_evaluation(self):
        p = gru_params(1, 1, zeros=True)
        p["W"] = Tensor([[1.0]], requires_grad=True)
        out = gru_step(Tensor([1.0]), Tensor([0.0]), p)
        assert abs(out.item() - 0.5 * np.tanh(1.0)) < 1e-15

    def test_update_gate_forced_closed(self):
        p = gru_params(3, 2, seed=1)
        p["W_z"] = Tensor(np.zeros((3, 2)))
        p["U_z"] = Tensor(np.zeros((3, 3)))
        p["b_z"] = Tensor(np.full(3, -1e9))
        h_prev = rng(2).normal(size=3)
        out = gru_step(Tensor(rng(3).normal(size=2)), Tensor(h_prev), p)
        assert np.allclose(out.data, h_prev, atol=1e-15)

    def test_matches_straight_line_oracle(self):
        # zero biases reproduce the bias-free update equations exactly
        for trial in range(100):
            p = gru_params(4, 3, seed=trial)
            for k in ("b_r", "b_h", "b_z"):
                p[k] = Tensor(np.zeros(4), requires_grad=True)
            b = rng(1000 + trial).normal(size=3)
            h = rng(2000 + trial).normal(size=4)
            ours = gru_step(Tensor(b), Tensor(h), p).data
            ref = straight_line_gru(b, h, p)
            assert np.abs(ours - ref).max() < 1e-12

    def test_convex_combination_per_coordinate(self):
        for trial in range(20):
            p = gru_params(5, 3, seed=trial)
            b = rng(trial).normal(size=3)
            h = rng(trial + 50).normal(size=5)
            sig = lambda x: 1.0 / (1.0 + np.exp(-x))
            r = sig(p["W_r"].data @ b + p["U_r"].data @ h + p["b_r"].data)
            hcand = np.tanh(p["W"].data @ b + p["U"].data @ (r * h) + p["b_h"].data)
            out = gru_step(Tensor(b), Tensor(h), p).data
            lo = np.minimum(h, hcand) - 1e-12
            hi = np.maximum(h, hcand) + 1e-12
            assert np.all(out >= lo) and np.all(out <= hi)

    def test_sequence_width_one_equals_step(self):
        p = gru_params(3, 2, seed=4)
        b = rng(5).normal(size=(2, 1))
        seq = gru_sequence(Tensor(b), p)
        step = gru_step(Tensor(b[:, 0]), Tensor(np.zeros(3)), p)
        assert np.allclose(seq.data[:, 0], step.data, atol=1e-15)

    def test_zero_weight_halving_decay(self):
        p = gru_params(3, 2, zeros=True)
        h0 = Tensor([1.0, -2.0, 0.5])
        seq = gru_sequence(Tensor(np.zeros((2, 6))), p, h0=h0)
        for t in range(6):
            assert np.array_equal(seq.data[:, t], h0.data * 0.5 ** (t + 1))

    def test_sequence_equals_chained_steps(self):
        p = gru_params(4, 3, seed=6)
        b = rng(7).normal(size=(3, 5))
        seq = gru_sequence(Tensor(b), p)
        h = Tensor(np.zeros(4))
        for t in range(5):
            h = gru_step(Tensor(b[:, t]), h, p)
            assert np.allclose(seq.data[:, t], h.data, atol=1e-14)

    def test_bptt_gradient_matches_finite_differences(self):
        def loss(ts):
            pp = dict(zip(GRU_KEYS, ts[1:]))
            out = gru_sequence(ts[0], pp)
            return (out * out).sum()

        inputs = [Tensor(rng(8).normal(size=(2, 4)))]
        p = gru_params(3, 2, seed=9)
        inputs += [p[k] for k in GRU_KEYS]
        rep = grad_check(loss, inputs, eps=1e-5)
        assert rep.max_rel_error < 1e-4

    def test_missing_parameter_rejected(self):
        p = gru_params(3, 2)
        del p["U_z"]
        with pytest.raises(KeyError):
            gru_step(Tensor(np.zeros(2)), Tensor(np.zeros(3)), p)

    def test_dimension_mismatch_rejected(self):
        p = gru_params(3, 2)
        with pytest.raises(ShapeError):
            gru_step(Tensor(np.zeros(5)), Tensor(np.zeros(3)), p)


class TestLinear:
    def test_identity(self):
        x = rng().normal(size=3)
        out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, x, atol=1e-15)

    def test_hand_computation(self):
        out = linear(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]),
                     Tensor([0.0, 1.0]))
        assert np.array_equal(out.data, [3.0, 8.0])

    def test_zero_weight_gives_bias(self):
        out = linear(Tensor(rng().normal(size=4)), Tensor(np.zeros((2, 4))),
                     Tensor([5.0, -1.0]))
        assert np.array_equal(out.data, [5.0, -1.0])

    def test_batched_matches_single(self):
        w = Tensor(rng(1).normal(size=(3, 4)))
        b = Tensor(rng(2).normal(size=3))
        xs = rng(3).normal(size=(5, 4))
        batched = linear(Tensor(xs), w, b)
        for i in range(5):
            assert np.allclose(batched.data[i], linear(Tensor(xs[i]), w, b).data,
                               atol=1e-14)

    def test_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(rng().normal(size=(3, 3)))
        assert dropout(x, 0.0, True, rng()) is x
        assert dropout(x, 0.0, False) is x

    def test_eval_mode_bitwise_identity(self):
        x = Tensor(rng().normal(size=(3, 3)))
        assert dropout(x, 0.7, False) is x

    def test_monte_carlo_statistics(self):
        x = Tensor(np.ones(100_000))
        out = dropout(x, 0.5, True, rng(42))
        survivors = out.data[out.data != 0.0]
        assert abs(len(survivors) / 100_000 - 0.5) < 0.01
        assert np.all(survivors == 2.0)

    def test_invalid_rate_rejected(self):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), 1.0, True, rng())

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            dropout(Tensor([1.0]), 0.5, True)


class TestInitParams:
    LAYOUT = [ParamSpec("w", (10, 100), 100), ParamSpec("b", (10,), None)]

    def test_deterministic_under_seed(self):
        a = init_params(self.LAYOUT, rng(3))
        b = init_params(self.LAYOUT, rng(3))
        assert np.array_equal(a["w"].data, b["w"].data)

    def test_fan_in_bound(self):
        p = init_params(self.LAYOUT, rng(4))
        assert np.abs(p["w"].data).max() < 0.1

    def test_biases_zero_and_grads_enabled(self):
        p = init_params(self.LAYOUT, rng(5))
        assert not p["b"].data.any()
        assert all(t.requires_grad for t in p.values())

    def test_duplicate_name_rejected(self):
        with pytest.raises(ValueError):
            init_params([ParamSpec("x", (2,), 2), ParamSpec("x", (2,), 2)], rng())
