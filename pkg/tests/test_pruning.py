import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nilmprune import model as M
from nilmprune import pruning as P
from nilmprune.errors import ConfigError


def tiny_model(window=64, seed=0):
    specs = [M.conv(1, 4, 5), M.act(M.RELU), M.conv(4, 4, 3), M.act(M.RELU),
             M.flatten(), M.linear(4 * 58, 16), M.act(M.RELU),
             M.linear(16, window), M.act(M.SIGMOID)]
    return M.ModelGraph(specs, window, seed=seed)


def small_dataset(window=64, n=12, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, window))
    y = rng.uniform(0.0, 1.0, size=(n, window))
    return x, y


def four_weight_model(values):
    """A model whose entire weight pool is one 1x4 linear layer."""
    net = M.ModelGraph([M.flatten(), M.linear(4, 1)], 4, seed=0)
    i = net.param_layers()[0]
    net.weights[i].data[0, :] = values
    return net, i


class TestMagnitudeMask:
    def test_global_ranking_example(self):
        net, i = four_weight_model([0.1, -0.5, 0.05, 2.0])
        state = P.magnitude_mask(net, 0.5, scope="global")
        np.testing.assert_array_equal(state.weight_masks[i][0],
                                      [False, True, False, True])
        assert state.mode == P.UNSTRUCTURED
        assert state.applied_sparsity == 0.5

    def test_biases_never_masked(self):
        net, i = four_weight_model([0.1, -0.5, 0.05, 2.0])
        net.biases[i].data[:] = 1e-9  # smaller than any weight
        state = P.magnitude_mask(net, 0.5)
        state.attach(net)
        assert net.biases[i].data[0] == 1e-9
        assert state.zero_count() == 2

    def test_zero_sparsity_keeps_everything(self):
        net = tiny_model()
        state = P.magnitude_mask(net, 0.0)
        assert state.zero_count() == 0
        assert all(m.all() for m in state.weight_masks.values())

    def test_tie_break_is_layer_then_flat_index(self):
        net = M.ModelGraph([M.flatten(), M.linear(3, 2), M.linear(2, 64)], 3, seed=0)
        a, b = net.param_layers()
        net.weights[a].data[:] = 1.0
        net.weights[b].data[:] = 1.0
        n = 6 + 128
        state = P.magnitude_mask(net, 0.5, scope="global")
        k = P.masked_count(n, 0.5)
        assert state.zero_count() == k == n // 2
        # all-equal magnitudes: earliest layer, earliest flat index goes first
        assert not state.weight_masks[a].any()
        masked_b = (~state.weight_masks[b].reshape(-1)).nonzero()[0]
        assert np.array_equal(masked_b, np.arange(k - 6))

    @given(s=st.floats(0.0, 0.95), seed=st.integers(0, 50))
    @settings(max_examples=40, deadline=None)
    def test_sparsity_exactness(self, s, seed):
        net = tiny_model(seed=seed)
        n = M.param_counts_from_specs(net.specs)["weights"]
        state = P.magnitude_mask(net, s)
        assert abs(state.zero_count() - round(s * n)) <= 1

    def test_range_check(self):
        with pytest.raises(ConfigError, match="0.95"):
            P.magnitude_mask(tiny_model(), 0.96)
        with pytest.raises(ConfigError, match="0.95"):
            P.magnitude_mask(tiny_model(), -0.1)
        with pytest.raises(ConfigError, match="scope"):
            P.magnitude_mask(tiny_model(), 0.5, scope="weird")


class TestPruneAfterTraining:
    def test_zero_threshold_is_identity(self):
        net = tiny_model()
        M.train(net, small_dataset(), M.TrainConfig(epochs=1, batch_size=4))
        x = np.random.default_rng(0).normal(size=64)
        before = M.forward(net, x)
        P.prune_after_training(net, 0.0)
        assert np.array_equal(M.forward(net, x), before)

    def test_keeps_dominant_weight(self):
        # y = a*x with a large and b irrelevant: masking half keeps a
        net = M.ModelGraph([M.flatten(), M.linear(2, 64)], 2, seed=0)
        i = net.param_layers()[0]
        net.weights[i].data[:, 0] = 5.0   # column a
        net.weights[i].data[:, 1] = 1e-6  # column b
        net.epochs_trained = 1
        P.prune_after_training(net, 0.5)
        assert np.all(net.weights[i].data[:, 1] == 0.0)
        assert np.all(net.weights[i].data[:, 0] == 5.0)

    def test_untrained_model_warns_not_raises(self, caplog):
        net = tiny_model()
        with caplog.at_level("WARNING"):
            P.prune_after_training(net, 0.1)
        assert any("no recorded training" in r.message for r in caplog.records)


class TestPretrainPrune:
    def test_round_schedule_and_invariants(self):
        net = tiny_model(seed=3)
        data = small_dataset()
        cfg = M.TrainConfig(epochs=1, batch_size=4, seed=7)
        n = M.param_counts_from_specs(net.specs)["weights"]
        state = P.pretrain_prune(net, data, 0.95, rounds=10, cfg=cfg)
        assert abs(state.zero_count() - 0.95 * n) <= 1
        assert P.verify_rewind(net)
        # masked weights are exactly zero
        for i, m in state.weight_masks.items():
            assert np.all(net.weights[i].data[~m] == 0.0)

    def test_mask_monotone_across_rounds(self):
        # run twice with increasing rounds sharing the prefix schedule
        data = small_dataset()
        cfg = M.TrainConfig(epochs=1, batch_size=4, seed=7)
        masks_per_round = []
        net = tiny_model(seed=3)
        n_weights = M.param_counts_from_specs(net.specs)["weights"]

        # instrument: replicate the loop manually through public pieces
        prev_zero = 0
        state = P.pretrain_prune(net, data, 0.6, rounds=4, cfg=cfg)
        for r in range(1, 5):
            expect = P.masked_count(n_weights, 1 - (1 - 0.6) ** (r / 4))
            assert expect >= prev_zero
            prev_zero = expect
        assert state.zero_count() == prev_zero

    def test_single_round_is_one_shot(self):
        net = tiny_model(seed=1)
        state = P.pretrain_prune(net, small_dataset(), 0.5, rounds=1,
                                 cfg=M.TrainConfig(epochs=1, batch_size=4))
        n = M.param_counts_from_specs(net.specs)["weights"]
        assert abs(state.zero_count() - round(0.5 * n)) <= 1
        assert P.verify_rewind(net)

    def test_bad_rounds_rejected(self):
        with pytest.raises(ConfigError, match="rounds"):
            P.pretrain_prune(tiny_model(), small_dataset(), 0.5, rounds=0,
                             cfg=M.TrainConfig(epochs=1))


class TestSparsityProfile:
    def test_uniform_mask_fractions(self):
        net = tiny_model()
        state = P.magnitude_mask(net, 0.5, scope="per-layer")
        profile = P.per_layer_sparsity_profile(state, net)
        for f, i in zip(profile, net.param_layers()):
            n = net.weights[i].data.size
            assert abs(f - 0.5) <= 1.0 / n + 0.5 / n

    def test_single_layer_mask(self):
        net = tiny_model()
        state = P.magnitude_mask(net, 0.0)
        first = net.param_layers()[0]
        state.weight_masks[first][:] = False
        profile = P.per_layer_sparsity_profile(state, net)
        assert profile[0] == 1.0
        assert all(f == 0.0 for f in profile[1:])

    def test_weighted_average_matches_global(self):
        net = tiny_model(seed=2)
        state = P.magnitude_mask(net, 0.37)
        profile = P.per_layer_sparsity_profile(state, net)
        sizes = [net.weights[i].data.size for i in net.param_layers()]
        global_frac = sum(f * n for f, n in zip(profile, sizes)) / sum(sizes)
        assert abs(global_frac - 0.37) <= 1.0 / sum(sizes)

    def test_structured_state_rejected(self):
        state = P.PruneState(P.STRUCTURED)
        with pytest.raises(ConfigError, match="unstructured"):
            P.per_layer_sparsity_profile(state, tiny_model())
