import numpy as np
import pytest

from nilmprune import model as M
from nilmprune.errors import ConfigError, DataError, NumericError, ShapeError


def desk_model(window=128, seed=0):
    return M.build_default_model(window, "desk-small", seed=seed)


def tiny_model(window=64, seed=0):
    specs = [M.conv(1, 4, 5), M.act(M.RELU), M.conv(4, 4, 3), M.act(M.RELU),
             M.flatten(), M.linear(4 * 58, 16), M.act(M.RELU),
             M.linear(16, window), M.act(M.SIGMOID)]
    return M.ModelGraph(specs, window, seed=seed)


def constant_dataset(window=64, n=8, seed=1):
    rng = np.random.default_rng(seed)
    x = np.tile(rng.normal(size=window), (n, 1))
    y = np.tile(rng.uniform(0.2, 0.8, size=window), (n, 1))
    return x, y


class TestBuild:
    def test_same_seed_same_initial_params(self):
        a, b = desk_model(seed=42), desk_model(seed=42)
        for wa, wb in zip(a.init_weights, b.init_weights):
            if wa is not None:
                assert np.array_equal(wa, wb)

    def test_different_seed_differs(self):
        a, b = desk_model(seed=1), desk_model(seed=2)
        assert not np.array_equal(a.weights[0].data, b.weights[0].data)

    def test_desk_params_hand_summed(self):
        specs = M.desk_small_layers(256)
        convs = [(4, 1, 9), (8, 4, 7), (8, 8, 5), (16, 8, 5), (16, 16, 3)]
        total = sum(o * i * k + o for o, i, k in convs)
        # lengths under strides (2, 2, 2, 2, 1): 256 -> 124 -> 59 -> 28 -> 12 -> 10
        flat = 16 * 10
        total += flat * 192 + 192
        total += 192 * 256 + 256
        assert M.param_counts_from_specs(specs)["total"] == total
        assert 5e4 < total < 2e5

    def test_full_scale_preset_accounting(self):
        c = M.param_counts_from_specs(M.paper_shape_layers(480))
        assert c["weights"] == 22_146_000
        assert c["total"] == 22_147_640
        # 32-bit deployment footprint of the full-scale layout, in MiB
        assert c["total"] * 4 / 2**20 == pytest.approx(84.5, abs=0.5)

    def test_window_too_short(self):
        with pytest.raises(ConfigError):
            M.build_default_model(32, "desk-small")
        with pytest.raises(ConfigError, match="preset"):
            M.build_default_model(128, "no-such-preset")

    def test_chain_validation_names_layer(self):
        with pytest.raises(ConfigError, match="layer 1"):
            M.ModelGraph([M.conv(1, 4, 3), M.conv(8, 4, 3)], 64)


class TestForward:
    def test_zero_params_give_constant_sigmoid_of_bias(self):
        net = tiny_model()
        for i in net.param_layers():
            net.weights[i].data[:] = 0.0
            net.biases[i].data[:] = 0.0
        net.biases[net.param_layers()[-1]].data[:] = 1.5
        out = M.forward(net, np.random.default_rng(0).normal(size=64))
        np.testing.assert_allclose(out, 1.0 / (1.0 + np.exp(-1.5)))

    @pytest.mark.parametrize("window", [128, 256, 480])
    def test_seq2seq_length_preserved(self, window):
        net = desk_model(window)
        out = M.forward(net, np.zeros(window))
        assert out.shape == (window,)
        assert np.all((out >= 0) & (out <= 1))

    def test_all_ones_mask_is_identity(self):
        net = tiny_model()
        x = np.random.default_rng(3).normal(size=64)
        dense = M.forward(net, x)
        net.masks = {i: np.ones_like(net.weights[i].data, dtype=bool)
                     for i in net.param_layers()}
        net.apply_masks()
        assert np.array_equal(M.forward(net, x), dense)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError, match="window"):
            M.forward(tiny_model(), np.zeros(65))

    def test_batched_equals_stacked_single(self):
        net = tiny_model()
        xs = np.random.default_rng(4).normal(size=(3, 64))
        batch = M.forward(net, xs)
        for i in range(3):
            np.testing.assert_allclose(batch[i], M.forward(net, xs[i]), atol=1e-12)


class TestTrain:
    def test_loss_monotone_on_degenerate_data(self):
        net = tiny_model()
        hist = M.train(net, constant_dataset(), M.TrainConfig(epochs=10, batch_size=8, seed=0))
        assert len(hist) == 10
        diffs = np.diff(hist)
        assert np.all(diffs <= 1e-6)

    def test_zero_epochs_rejected(self):
        with pytest.raises(ConfigError, match="epochs"):
            M.train(tiny_model(), constant_dataset(), M.TrainConfig(epochs=0))

    def test_fixed_seed_reproduces_final_loss(self):
        h1 = M.train(tiny_model(seed=5), constant_dataset(),
                     M.TrainConfig(epochs=4, seed=11))
        h2 = M.train(tiny_model(seed=5), constant_dataset(),
                     M.TrainConfig(epochs=4, seed=11))
        assert h1 == h2

    def test_masked_entries_stay_zero_through_training(self):
        net = tiny_model()
        rng = np.random.default_rng(0)
        net.masks = {i: rng.uniform(size=net.weights[i].data.shape) > 0.5
                     for i in net.param_layers()}
        net.apply_masks()
        M.train(net, constant_dataset(), M.TrainConfig(epochs=3, batch_size=4))
        for i, m in net.masks.items():
            assert np.all(net.weights[i].data[~m] == 0.0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            M.train(tiny_model(), (np.zeros((0, 64)), np.zeros((0, 64))), M.TrainConfig(epochs=1))

    def test_nan_loss_names_epoch_and_batch(self):
        net = tiny_model()
        net.weights[0].data[:] = np.nan
        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            M.train(net, constant_dataset(), M.TrainConfig(epochs=1))


class TestAccounting:
    def test_single_linear_param_count(self):
        assert M.param_counts_from_specs([M.linear(3, 2)])["total"] == 8

    def test_nonzero_excludes_masked(self):
        net = tiny_model()
        i = net.param_layers()[0]
        mask = np.ones_like(net.weights[i].data, dtype=bool)
        mask.reshape(-1)[:5] = False
        net.masks = {i: mask}
        c = M.count_params(net)
        assert c["masked_zeros"] == 5
        assert c["nonzero"] + c["masked_zeros"] == c["total"]

    def test_linear_macs(self):
        assert M.count_macs([M.linear(3, 2)], window_len=3) == 6

    def test_conv_macs_hand_value(self):
        # L=14, K=5, stride 1 -> L_out=10; 2*3*5*10 = 300
        assert M.count_macs([M.conv(2, 3, 5)], window_len=14) == 300

    def test_masked_model_macs_unchanged(self):
        net = tiny_model()
        base = M.count_macs(net)
        net.masks = {i: np.zeros_like(net.weights[i].data, dtype=bool)
                     for i in net.param_layers()}
        net.apply_masks()
        assert M.count_macs(net) == base
        assert M.count_flops(net) == 2 * base


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        net = tiny_model(seed=8)
        M.train(net, constant_dataset(), M.TrainConfig(epochs=2, batch_size=4))
        rng = np.random.default_rng(1)
        net.masks = {i: rng.uniform(size=net.weights[i].data.shape) > 0.3
                     for i in net.param_layers()}
        net.apply_masks()
        path = tmp_path / "m.nprm"
        M.serialize(net, path)
        back = M.deserialize(path)
        assert [s.to_dict() for s in back.specs] == [s.to_dict() for s in net.specs]
        assert back.epochs_trained == net.epochs_trained
        for i in net.param_layers():
            assert np.array_equal(back.weights[i].data, net.weights[i].data)
            assert np.array_equal(back.biases[i].data, net.biases[i].data)
            assert np.array_equal(back.init_weights[i], net.init_weights[i])
            assert np.array_equal(back.masks[i], net.masks[i])

    def test_serialize_deterministic_bytes(self):
        a = M.serialize_bytes(tiny_model(seed=2))
        b = M.serialize_bytes(tiny_model(seed=2))
        assert a == b

    def test_float32_round_trip(self, tmp_path):
        net = M.ModelGraph(M.desk_small_layers(128), 128, seed=1, dtype=np.float32)
        path = tmp_path / "m32.nprm"
        M.serialize(net, path)
        back = M.deserialize(path)
        assert back.dtype == np.float32
        for i in net.param_layers():
            assert np.array_equal(back.weights[i].data, net.weights[i].data)

    def test_corrupted_header_raises_format_error(self, tmp_path):
        blob = bytearray(M.serialize_bytes(tiny_model()))
        blob[:4] = b"XXXX"
        with pytest.raises(DataError, match="magic"):
            M.deserialize_bytes(bytes(blob))
        blob = M.serialize_bytes(tiny_model())
        with pytest.raises(DataError, match="truncated"):
            M.deserialize_bytes(blob[:len(blob) // 2])
        blob = bytearray(M.serialize_bytes(tiny_model()))
        blob[4] = 99
        with pytest.raises(DataError, match="version"):
            M.deserialize_bytes(bytes(blob))

    def test_deployment_size_ignores_masks(self):
        net = tiny_model()
        base = M.size_on_disk_bytes(net)
        net.masks = {i: np.zeros_like(net.weights[i].data, dtype=bool)
                     for i in net.param_layers()}
        assert M.size_on_disk_bytes(net) == base
