import os

from pathlib import Path

import numpy as np
import pytest

from amtfnet.tensor import ShapeError, Tensor, grad_check
from amtfnet.layers import depthwise_conv1d
from amtfnet.model import (
    AMTFNetParams,
    ModelConfig,
    VARIANTS,
    build_params,
    classify,
    count_parameters,
    feature_extract,
    forward,
    fuse,
    fused_features,
    load_checkpoint,
    param_layout,
    save_checkpoint,
    se_block,
    temporal_attention,
)
from amtfnet.train import cross_entropy


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_config(variant="FULL", dropout=0.0):
    return ModelConfig(v=3, num_classes=4, w=8, kernel_sizes=(3, 5, 7),
                       hidden=5, reduction=4, dropout_rate=dropout,
                       variant=variant)


def randomized_params(config, seed=0):
    """Model parameters with every tensor (biases included) randomized."""
    params = build_params(config, rng(seed))
    r = rng(seed + 1)
    for t in params.tensors.values():
        t.data[...] = r.normal(size=t.shape) * 0.5
    return params


class TestModelConfig:
    def test_defaults_match_reference_architecture(self):
        cfg = ModelConfig(v=52, num_classes=20)
        assert cfg.w == 64
        assert cfg.kernel_sizes == (3, 5, 7, 9)
        assert cfg.hidden == 100

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(v=3, num_classes=1)
        with pytest.raises(ValueError):
            ModelConfig(v=3, num_classes=4, variant="A9")
        with pytest.raises(ValueError):
            ModelConfig(v=3, num_classes=4, w=8)  # default kernel 9 > w
        with pytest.raises(ValueError):
            ModelConfig(v=3, num_classes=4, dropout_rate=1.0)

    def test_reduced_width_rounds_up(self):
        assert ModelConfig(v=3, num_classes=4, reduction=4).reduced_width == 16
        cfg = ModelConfig(v=3, num_classes=4, w=6, kernel_sizes=(3,), reduction=4)
        assert cfg.reduced_width == 2  # ceil(6/4)
        cfg = ModelConfig(v=3, num_classes=4, w=3, kernel_sizes=(3,), reduction=64)
        assert cfg.reduced_width == 1

    def test_dict_round_trip(self):
        cfg = tiny_config("A3")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestFeatureExtract:
    def test_paper_shape_contract(self):
        # v=52, w=64, hidden=100 -> hidden trajectory 100 x 64
        cfg = ModelConfig(v=52, num_classes=20)
        params = build_params(cfg, rng(1))
        out = feature_extract(Tensor(rng(2).normal(size=(52, 64))), params, cfg)
        assert out.shape == (100, 64)

    def test_zero_input_zero_gru_weights_gives_zeros(self):
        cfg = tiny_config()
        params = build_params(cfg, rng(1))
        for name, t in params.tensors.items():
            t.data[...] = 0.0
        out = feature_extract(Tensor(np.zeros((3, 8))), params, cfg)
        assert not out.data.any()  # h0 = 0 halves to 0 forever

    def test_conv_stage_receptive_field(self):
        # before instance norm, a column perturbation reaches at most +-4
        # columns (half-width of the largest kernel)
        cfg = ModelConfig(v=3, num_classes=4, w=32)
        params = build_params(cfg, rng(3))
        x = rng(4).normal(size=(3, 32))
        t = 16

        def conv_only(xa):
            outs = []
            for n in cfg.kernel_sizes:
                outs.append(depthwise_conv1d(
                    Tensor(xa), params.tensors[f"dc{n}.kernel"],
                    params.tensors[f"dc{n}.bias"]).data)
            return np.vstack(outs)

        base = conv_only(x)
        xp = x.copy()
        xp[:, t] += 5.0
        delta = np.abs(conv_only(xp) - base).max(axis=0)
        assert delta[t - 4:t + 5].max() > 0
        assert not delta[:t - 4].any() and not delta[t + 5:].any()

    def test_variant_feature_heights(self):
        x = Tensor(rng(5).normal(size=(3, 8)))
        for variant in VARIANTS:
            cfg = tiny_config(variant)
            params = build_params(cfg, rng(6))
            out = feature_extract(x, params, cfg)
            if cfg.has_gru:
                assert out.shape == (5, 8)
            else:
                assert out.shape == (9, 8)  # 3 kernels x 3 channels

    def test_input_shape_validated(self):
        cfg = tiny_config()
        params = build_params(cfg, rng(1))
        with pytest.raises(ShapeError):
            feature_extract(Tensor(np.zeros((4, 8))), params, cfg)


def straight_line_attention(h, t):
    """Independent transcription of the attention equations: mean/std pooling,
    two bottleneck FC chains, 2-channel width-3 conv, ReLU."""
    relu = lambda x: np.maximum(x, 0.0)
    q1 = h.mean(axis=0)
    q2 = h.std(axis=0)
    p1 = t["att.fc2.weight"].data @ relu(
        t["att.fc1.weight"].data @ q1 + t["att.fc1.bias"].data) + t["att.fc2.bias"].data
    p2 = t["att.fc4.weight"].data @ relu(
        t["att.fc3.weight"].data @ q2 + t["att.fc3.bias"].data) + t["att.fc4.bias"].data
    k = t["att.conv.kernel"].data
    w = len(p1)
    padded = np.zeros((2, w + 2))
    padded[0, 1:w + 1] = p1
    padded[1, 1:w + 1] = p2
    conv = np.zeros(w)
    for pos in range(w):
        conv[pos] = (k[0, 0] * padded[0, pos:pos + 3]).sum() \
            + (k[0, 1] * padded[1, pos:pos + 3]).sum()
    return relu(conv + t["att.conv.bias"].data[0])


class TestTemporalAttention:
    def test_zero_weights_nonneg_bias_gives_uniform(self):
        cfg = tiny_config()
        params = build_params(cfg, rng(1))
        for name, t in params.tensors.items():
            if name.startswith("att."):
                t.data[...] = 0.0
        params.tensors["att.conv.bias"].data[...] = 0.25
        h = Tensor(rng(2).normal(size=(5, 8)))
        a = temporal_attention(h, params, cfg)
        assert np.allclose(a.data, 0.25, atol=1e-15)

    def test_zero_weights_negative_bias_gives_zeros(self):
        cfg = tiny_config()
        params = build_params(cfg, rng(1))
        for name, t in params.tensors.items():
            if name.startswith("att."):
                t.data[...] = 0.0
        params.tensors["att.conv.bias"].data[...] = -0.25
        a = temporal_attention(Tensor(rng(2).normal(size=(5, 8))), params, cfg)
        assert not a.data.any()

    def test_matches_independent_reimplementation(self):
        cfg = tiny_config()
        for seed in range(10):
            params = randomized_params(cfg, seed)
            h = rng(seed + 100).normal(size=(5, 8))
            ours = temporal_attention(Tensor(h), params, cfg).data
            ref = straight_line_attention(h, params.tensors)
            assert np.abs(ours - ref).max() < 1e-12

    def test_nonnegative_for_any_weights(self):
        cfg = tiny_config()
        total = 0
        for seed in range(50):
            params = randomized_params(cfg, seed)
            h = Tensor(rng(seed).normal(size=(20, 5, 8)) * 3.0)
            a = temporal_attention(h, params, cfg)
            assert np.all(a.data >= 0.0)
            total += a.shape[0]
        assert total == 1000

    def test_batched_matches_single(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 3)
        hs = rng(4).normal(size=(6, 5, 8))
        batched = temporal_attention(Tensor(hs), params, cfg)
        for i in range(6):
            single = temporal_attention(Tensor(hs[i]), params, cfg)
            assert np.allclose(batched.data[i], single.data, atol=1e-14)


def straight_line_se(h, t):
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    relu = lambda x: np.maximum(x, 0.0)
    squeeze = h.mean(axis=0)
    e = relu(t["se.fc_a.weight"].data @ squeeze + t["se.fc_a.bias"].data)
    return sig(t["se.fc_b.weight"].data @ e + t["se.fc_b.bias"].data)


class TestSeBlock:
    def test_zero_weights_give_half(self):
        cfg = tiny_config("A6")
        params = build_params(cfg, rng(1))
        for name, t in params.tensors.items():
            if name.startswith("se."):
                t.data[...] = 0.0
        a = se_block(Tensor(rng(2).normal(size=(5, 8))), params, cfg)
        assert np.allclose(a.data, 0.5, atol=1e-15)

    def test_output_in_unit_interval(self):
        cfg = tiny_config("A6")
        for seed in range(10):
            params = randomized_params(cfg, seed)
            a = se_block(Tensor(rng(seed).normal(size=(5, 8)) * 5), params, cfg)
            assert np.all((a.data > 0.0) & (a.data < 1.0))

    def test_matches_independent_reimplementation(self):
        cfg = tiny_config("A6")
        for seed in range(10):
            params = randomized_params(cfg, seed)
            h = rng(seed + 7).normal(size=(5, 8))
            ours = se_block(Tensor(h), params, cfg).data
            assert np.abs(ours - straight_line_se(h, params.tensors)).max() < 1e-12


class TestFuse:
    def test_one_hot_selects_column(self):
        h = rng(1).normal(size=(5, 8))
        for t in range(8):
            a = np.zeros(8)
            a[t] = 1.0
            out = fuse(Tensor(h), Tensor(a))
            assert np.array_equal(out.data, h[:, t])

    def test_uniform_weights_give_temporal_mean(self):
        h = rng(2).normal(size=(5, 8))
        out = fuse(Tensor(h), Tensor(np.full(8, 1.0 / 8.0)))
        assert np.allclose(out.data, h.mean(axis=1), atol=1e-15)

    def test_hand_example(self):
        out = fuse(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([1.0, 2.0]))
        assert np.array_equal(out.data, [1.0, 2.0])

    def test_linearity(self):
        h = Tensor(rng(3).normal(size=(5, 8)))
        a = rng(4).normal(size=8)
        b = rng(5).normal(size=8)
        lhs = fuse(h, Tensor(a + b)).data
        rhs = fuse(h, Tensor(a)).data + fuse(h, Tensor(b)).data
        assert np.abs(lhs - rhs).max() < 1e-12
        assert np.abs(fuse(h, Tensor(2.5 * a)).data - 2.5 * fuse(h, Tensor(a)).data).max() < 1e-12

    def test_gradients(self):
        def loss(ts):
            f = fuse(ts[0], ts[1])
            return (f * f).sum()

        rep = grad_check(loss, [Tensor(rng(6).normal(size=(4, 7))),
                                Tensor(rng(7).normal(size=7))])
        assert rep.max_rel_error < 1e-6

    def test_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            fuse(Tensor(np.zeros((4, 7))), Tensor(np.zeros(6)))


class TestClassify:
    def test_zero_weights_give_uniform(self):
        cfg = tiny_config()
        params = build_params(cfg, rng(1))
        params.tensors["clf.weight"].data[...] = 0.0
        out = classify(Tensor(rng(2).normal(size=5)), params, cfg)
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_probability_vector(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 1)
        out = classify(Tensor(rng(3).normal(size=5)), params, cfg)
        assert abs(out.data.sum() - 1.0) < 1e-12 and np.all(out.data > 0)

    def test_argmax_matches_logits(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 2)
        f = rng(4).normal(size=5)
        logits = params.tensors["clf.weight"].data @ f + params.tensors["clf.bias"].data
        out = classify(Tensor(f), params, cfg)
        assert out.data.argmax() == logits.argmax()


class TestForward:
    def test_output_length_matches_class_count(self):
        # the 20-class layout used for the largest reference dataset
        cfg = ModelConfig(v=52, num_classes=20)
        params = build_params(cfg, rng(1))
        out = forward(Tensor(rng(2).normal(size=(52, 64))), params, cfg)
        assert out.shape == (20,)
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_eval_mode_deterministic(self):
        cfg = tiny_config(dropout=0.5)
        params = randomized_params(cfg, 1)
        x = Tensor(rng(3).normal(size=(3, 8)))
        a = forward(x, params, cfg)
        b = forward(x, params, cfg)
        assert np.array_equal(a.data, b.data)

    def test_forced_one_hot_attention_selects_column(self):
        # craft attention weights so a = one-hot at t0; the forward pass must
        # then classify exactly the t0 hidden column
        cfg = tiny_config()
        t0 = 5
        params = randomized_params(cfg, 4)
        t = params.tensors
        for name in ("att.fc1.weight", "att.fc1.bias", "att.fc2.weight",
                     "att.fc3.weight", "att.fc3.bias", "att.fc4.weight",
                     "att.fc4.bias"):
            t[name].data[...] = 0.0
        onehot = np.zeros(8)
        onehot[t0] = 1.0
        t["att.fc2.bias"].data[...] = onehot
        t["att.conv.kernel"].data[...] = 0.0
        t["att.conv.kernel"].data[0, 0, 1] = 1.0  # center tap, channel of p1
        t["att.conv.bias"].data[...] = 0.0

        x = Tensor(rng(5).normal(size=(3, 8)))
        h = feature_extract(x, params, cfg)
        a = temporal_attention(h, params, cfg)
        assert np.allclose(a.data, onehot, atol=1e-15)
        expected = classify(Tensor(h.data[:, t0]), params, cfg)
        out = forward(x, params, cfg)
        assert np.allclose(out.data, expected.data, atol=1e-14)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_all_variants_run_and_normalize(self, variant):
        cfg = tiny_config(variant, dropout=0.3)
        params = randomized_params(cfg, 6)
        xb = Tensor(rng(7).normal(size=(5, 3, 8)))
        out = forward(xb, params, cfg, training=True, rng=rng(8))
        assert out.shape == (5, 4)
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_mode_shift_damping_vs_no_norm_pipeline(self):
        # per-channel input offsets must be strongly suppressed by the
        # normalized conv branches, relative to the same branches without
        # instance normalization (boundary effects keep it from being exact)
        cfg = ModelConfig(v=4, num_classes=3, w=64, variant="A1")
        params = build_params(cfg, rng(9))
        x = rng(10).normal(size=(4, 64))
        offset = rng(11).uniform(1.0, 2.0, size=(4, 1))

        def with_norm(xa):
            return feature_extract(Tensor(xa), params, cfg).data

        def without_norm(xa):
            outs = []
            for n in cfg.kernel_sizes:
                outs.append(np.maximum(depthwise_conv1d(
                    Tensor(xa), params.tensors[f"dc{n}.kernel"],
                    params.tensors[f"dc{n}.bias"]).data, 0.0))
            return np.vstack(outs)

        base_n, shift_n = with_norm(x), with_norm(x + offset)
        base_r, shift_r = without_norm(x), without_norm(x + offset)
        rel_norm = np.linalg.norm(shift_n - base_n) / np.linalg.norm(base_n)
        rel_raw = np.linalg.norm(shift_r - base_r) / np.linalg.norm(base_r)
        assert rel_raw > 5.0 * rel_norm
        assert rel_norm < 0.2

    def test_end_to_end_gradient(self):
        cfg = tiny_config()
        params = randomized_params(cfg, 12)
        names = list(params.tensors)
        x = rng(13).normal(size=(3, 8))

        def f(ts):
            p = AMTFNetParams(config=cfg, tensors=dict(zip(names, ts)))
            return cross_entropy(forward(Tensor(x), p, cfg), 2)

        rep = grad_check(f, list(params.tensors.values()), tol=1e-3)
        assert rep.max_rel_error < 1e-3


class TestCountParameters:
    def test_reference_total_te_shape(self):
        # 0.10M parameters reported for the 52-variable, 20-class layout
        cfg = ModelConfig(v=52, num_classes=20, hidden=100, w=64, reduction=4)
        n = count_parameters(cfg)
        assert abs(n - 100_000) / 100_000 < 0.05

    def test_reference_total_tpff_shape(self):
        # 0.06M parameters reported for the 24-variable, 5-class layout
        cfg = ModelConfig(v=24, num_classes=5, hidden=100, w=64)
        n = count_parameters(cfg)
        assert abs(n - 60_000) / 60_000 < 0.05

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_closed_form_equals_enumeration(self, variant):
        cfg = ModelConfig(v=5, num_classes=4, w=16, kernel_sizes=(3, 5),
                          hidden=7, reduction=4, variant=variant)
        params = build_params(cfg, rng(1))
        enumerated = sum(t.size for t in params.tensors.values())
        assert count_parameters(cfg) == enumerated
        assert enumerated == sum(int(np.prod(s.shape)) for s in param_layout(cfg))

    def test_variant_monotonicity(self):
        base = dict(v=5, num_classes=4, w=16, kernel_sizes=(3, 5), hidden=7,
                    reduction=4)
        count = lambda v: count_parameters(ModelConfig(**base, variant=v))
        assert count("A1") < count("A3")
        assert count("A5") < count("FULL")


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        cfg = tiny_config("A6")
        params = randomized_params(cfg, 1)
        params.extras = {"norm_stats": {"mean": [0.0], "std": [1.0], "source": "x"}}
        path = os.path.join(tmp_path, "model.amtf")
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        assert loaded.extras == params.extras
        for k in params.tensors:
            assert np.array_equal(loaded.tensors[k].data, params.tensors[k].data)

    def test_save_is_bitwise_reproducible(self, tmp_path):
        cfg = tiny_config()
        params = randomized_params(cfg, 2)
        p1 = os.path.join(tmp_path, "a.amtf")
        p2 = os.path.join(tmp_path, "b.amtf")
        save_checkpoint(p1, params)
        save_checkpoint(p2, params)
        assert Path(p1).read_bytes() == Path(p2).read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = os.path.join(tmp_path, "junk")
        with open(path, "wb") as fh:
            fh.write(b"not a checkpoint\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_rejects_truncated(self, tmp_path):
        cfg = tiny_config()
        params = randomized_params(cfg, 3)
        path = os.path.join(tmp_path, "model.amtf")
        save_checkpoint(path, params)
        blob = Path(path).read_bytes()
        with open(path, "wb") as fh:
            fh.write(blob[:-16])
        with pytest.raises(ValueError):
            load_checkpoint(path)
