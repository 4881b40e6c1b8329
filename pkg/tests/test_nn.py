import numpy as np
import pytest

from ccloss import (
    ChannelAttentionModule,
    CheckpointError,
    LinearLayer,
    MLPBackbone,
    Model,
    ShapeError,
    Tensor,
    TinyCNN,
    he_init,
    load_checkpoint,
    save_checkpoint,
    squeeze_excite,
)
from ccloss.autodiff import mul, relu
from ccloss.nn import default_reduction_ratio
from ccloss.rng import stream_gen


def zero_linear(in_dim, out_dim, dtype=np.float64):
    return LinearLayer(
        Tensor(np.zeros((out_dim, in_dim), dtype=dtype), requires_grad=True),
        Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
    )


def dense_model(seed=0, in_dim=4, width=6, hidden=8, classes=3, dtype=np.float64):
    init = stream_gen(seed, "init")
    backbone = MLPBackbone.init(in_dim, [width], init, dtype)
    return Model.init(backbone, hidden, classes, init, dtype)


class TestForwardPlain:
    def test_zero_params_give_zero_logits(self):
        model = dense_model()
        for p in model.params():
            p.data[:] = 0.0
        x = Tensor(np.ones((3, 4)), dtype=np.float64)
        np.testing.assert_array_equal(model.forward_plain(x).data, np.zeros((3, 3)))

    def test_hand_logits(self):
        # identity-ish f2 rows over a known hidden vector
        backbone = MLPBackbone([zero_linear(2, 2)], in_dim=2)
        backbone.layers[0].weight.data[:] = np.eye(2)
        f1 = zero_linear(2, 2)
        f1.weight.data[:] = np.eye(2)
        f2 = zero_linear(2, 2)
        f2.weight.data[:] = np.array([[2.0, 0.0], [0.0, -1.0]])
        cam = ChannelAttentionModule(zero_linear(2, 1), zero_linear(1, 2), 2)
        model = Model(backbone, cam, f1, f2)
        logits = model.forward_plain(Tensor(np.array([[3.0, 5.0]]), dtype=np.float64))
        np.testing.assert_allclose(logits.data, [[6.0, -5.0]])

    def test_finite_on_random_input(self):
        model = dense_model(seed=3)
        x = Tensor(np.random.default_rng(0).standard_normal((5, 4)))
        assert np.all(np.isfinite(model.forward_plain(Tensor(x.data.astype(np.float64))).data))


class TestForwardCam:
    def test_zero_cam_gives_half_attention(self):
        model = dense_model(seed=1)
        for layer in (model.cam.fc_reduce, model.cam.fc_expand):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).standard_normal((4, 4)), dtype=np.float64)
        logits, att = model.forward_cam(x)
        np.testing.assert_array_equal(att.data, np.full((4, 8), 0.5))
        features = model.backbone(x)
        expected = model.f2(relu(model.f1(features) * Tensor(np.full((4, 8), 0.5))))
        np.testing.assert_array_equal(logits.data, expected.data)

    def test_attention_strictly_inside_unit_interval(self):
        model = dense_model(seed=2)
        x = Tensor(np.random.default_rng(2).standard_normal((6, 4)) * 50, dtype=np.float64)
        _, att = model.forward_cam(x)
        assert np.all(att.data > 0.0) and np.all(att.data < 1.0)

    def test_attention_shape_contract(self):
        model = dense_model(seed=3, hidden=8)
        _, att = model.forward_cam(Tensor(np.zeros((4, 4)), dtype=np.float64))
        assert att.shape == (4, 8)

    def test_all_ones_attention_recovers_plain_head(self):
        model = dense_model(seed=4)
        x = Tensor(np.random.default_rng(4).standard_normal((3, 4)), dtype=np.float64)
        plain = model.forward_plain(x)
        features = model.backbone(x)
        gated = model.f2(relu(mul(model.f1(features), Tensor(np.ones((3, 8)), dtype=np.float64))))
        np.testing.assert_array_equal(gated.data, plain.data)

    def test_deterministic_given_seed(self):
        x = np.random.default_rng(5).standard_normal((4, 4))
        a = dense_model(seed=7).forward_cam(Tensor(x, dtype=np.float64))[0]
        b = dense_model(seed=7).forward_cam(Tensor(x, dtype=np.float64))[0]
        np.testing.assert_array_equal(a.data, b.data)


class TestSqueezeExcite:
    def test_zero_input_zero_bias_gives_half(self):
        cam = ChannelAttentionModule(zero_linear(4, 2), zero_linear(2, 4), 2)
        out = squeeze_excite(cam, Tensor(np.zeros((3, 4)), dtype=np.float64))
        np.testing.assert_array_equal(out.data, np.full((3, 4), 0.5))

    def test_hand_computed_two_layer_fixture(self):
        # r=2, 4 channels, D=4, fixed tiny weights; oracle is a direct
        # numpy evaluation of the same bottleneck
        w1 = np.array([[0.1, -0.2, 0.3, 0.0], [0.05, 0.1, -0.1, 0.2]])
        b1 = np.array([0.01, -0.02])
        w2 = np.array([[0.2, -0.1], [0.0, 0.3], [-0.2, 0.1], [0.15, 0.05]])
        b2 = np.array([0.1, -0.1, 0.0, 0.2])
        cam = ChannelAttentionModule(
            LinearLayer(Tensor(w1, dtype=np.float64), Tensor(b1, dtype=np.float64)),
            LinearLayer(Tensor(w2, dtype=np.float64), Tensor(b2, dtype=np.float64)),
            2,
        )
        f = np.array([[0.4, -1.2, 0.7, 0.3], [1.1, 0.2, -0.5, -0.9]])
        got = squeeze_excite(cam, Tensor(f, dtype=np.float64)).data

        hidden = np.maximum(f @ w1.T + b1, 0.0)
        expected = 1.0 / (1.0 + np.exp(-(hidden @ w2.T + b2)))
        np.testing.assert_allclose(got, expected, atol=1e-14)

    def test_conv_geometry_pools_per_channel(self):
        # squeeze of flattened (C=2, 2x2) maps must equal per-channel means
        cam = ChannelAttentionModule(zero_linear(2, 1), zero_linear(1, 3), 2)
        cam.fc_reduce.weight.data[:] = np.array([[1.0, 1.0]])
        cam.fc_expand.weight.data[:] = np.array([[1.0], [2.0], [3.0]])
        maps = np.arange(8.0).reshape(1, 2, 2, 2)  # channel means: 1.5, 5.5
        flat = Tensor(maps.reshape(1, 8), dtype=np.float64)
        got = squeeze_excite(cam, flat, channel_geometry=(2, 2, 2)).data
        pre = np.maximum(1.5 + 5.5, 0.0) * np.array([1.0, 2.0, 3.0])
        expected = 1.0 / (1.0 + np.exp(-pre))
        np.testing.assert_allclose(got, expected.reshape(1, 3), atol=1e-14)

    def test_extreme_inputs_stay_in_range(self):
        init = stream_gen(0, "init")
        cam = ChannelAttentionModule.init(4, 4, init, np.float64)
        for scale in (1.0, 1e3, 1e6):
            out = squeeze_excite(cam, Tensor(np.full((2, 4), scale), dtype=np.float64))
            assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_indivisible_reduction_rejected(self):
        init = stream_gen(0, "init")
        with pytest.raises(ShapeError):
            ChannelAttentionModule.init(5, 4, init, reduction_ratio=2)

    def test_default_reduction_ratio(self):
        assert default_reduction_ratio(64) == 16
        assert default_reduction_ratio(16) == 2


class TestHeInit:
    def test_fan_in_two_gives_unit_std(self):
        rng = stream_gen(0, "init")
        t = he_init((100,), fan_in=2, rng=rng)
        assert np.sqrt(2.0 / 2) == 1.0
        assert t.requires_grad

    def test_empirical_std_within_two_percent(self):
        rng = stream_gen(1, "init")
        fan_in = 50
        t = he_init((100_000,), fan_in=fan_in, rng=rng, dtype=np.float64)
        target = np.sqrt(2.0 / fan_in)
        assert abs(t.data.std() - target) / target < 0.02
        assert abs(t.data.mean()) < 0.01

    def test_fixed_seed_bit_identical(self):
        a = he_init((64, 32), 32, stream_gen(9, "init"))
        b = he_init((64, 32), 32, stream_gen(9, "init"))
        assert a.data.tobytes() == b.data.tobytes()

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            he_init((3,), 0, stream_gen(0, "init"))


class TestTinyCNN:
    def test_feature_dim(self):
        bb = TinyCNN.init((1, 28, 28), stream_gen(0, "init"))
        assert bb.feature_dim == 16 * 7 * 7
        assert bb.channel_geometry == (16, 7, 7)

    def test_rejects_unpoolable_input(self):
        with pytest.raises(ShapeError):
            TinyCNN.init((1, 6, 6), stream_gen(0, "init"))

    def test_batch_shape_validated(self):
        bb = TinyCNN.init((1, 8, 8), stream_gen(0, "init"))
        with pytest.raises(ShapeError):
            bb(Tensor(np.zeros((2, 1, 4, 4), dtype=np.float32)))

    def test_output_shape(self):
        bb = TinyCNN.init((3, 8, 8), stream_gen(0, "init"), np.float64)
        out = bb(Tensor(np.zeros((5, 3, 8, 8)), dtype=np.float64))
        assert out.shape == (5, bb.feature_dim)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = dense_model(seed=11, dtype=np.float32)
        path = tmp_path / "model.ccl"
        save_checkpoint(path, model)
        fresh = dense_model(seed=12, dtype=np.float32)
        assert not np.array_equal(fresh.f1.weight.data, model.f1.weight.data)
        fresh.load_state(load_checkpoint(path))
        for (_, a), (_, b) in zip(fresh.named_params(), model.named_params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ccl"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        model = dense_model(seed=11)
        path = tmp_path / "model.ccl"
        save_checkpoint(path, model)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_on_load(self, tmp_path):
        small = dense_model(seed=1, hidden=4)
        path = tmp_path / "small.ccl"
        save_checkpoint(path, small)
        big = dense_model(seed=1, hidden=8)
        with pytest.raises(CheckpointError, match="shape"):
            big.load_state(load_checkpoint(path))
