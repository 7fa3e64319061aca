import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import sparse_error
from gwas_ssae import autoencoder as ae
from gwas_ssae import neuralnet as nn


def subspace_data(m=500, seed=0):
    """Rows drawn from a 3-dimensional linear subspace of R^10."""
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(10, 3)))[0]
    return rng.normal(size=(m, 3)) @ basis.T


def recon_mse(params, x):
    return float(np.mean((nn.forward(params, x).output - x) ** 2))


@pytest.fixture(scope="module")
def subspace():
    return subspace_data()


class TestMeanActivation:
    def test_zero_encoder_is_half(self):
        enc = ae.EncoderLayer(np.zeros((4, 3)), np.zeros(4), np.zeros(4))
        np.testing.assert_array_equal(ae.mean_hidden_activation(enc, np.ones((5, 3))), 0.5)

    def test_single_example(self):
        p = nn.init_network(ae.autoencoder_layers(3, 2), 1)
        x = np.array([[0.2, -0.4, 1.0]])
        np.testing.assert_allclose(ae.mean_hidden_activation(p, x), nn.forward(p, x).activations[1][0])

    def test_hand_average(self):
        w = np.array([[1.0, 0.0], [0.0, -1.0], [0.5, 0.5]])
        b = np.array([0.0, 0.1, -0.2])
        x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
        sig = lambda z: 1 / (1 + math.exp(-z))
        want = [sum(sig(w[j] @ xi + b[j]) for xi in x) / 4 for j in range(3)]
        got = ae.mean_hidden_activation(ae.EncoderLayer(w, b, np.zeros(3)), x)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_empty(self):
        with pytest.raises(ae.EmptyBatch):
            ae.mean_hidden_activation(ae.EncoderLayer(np.zeros((1, 2)), np.zeros(1), np.zeros(1)), np.zeros((0, 2)))


class TestKl:
    def test_example_value(self):
        assert ae.kl_penalty(0.05, [0.2]) == pytest.approx(0.0940, abs=1e-4)

    def test_zero_at_target(self):
        assert ae.kl_penalty(0.05, np.full(7, 0.05)) == 0.0

    @given(st.floats(0.01, 0.99), st.lists(st.floats(1e-4, 1 - 1e-4), min_size=1, max_size=8))
    def test_non_negative(self, p, q):
        k = ae.kl_penalty(p, q)
        assert k >= 0
        if k == 0:
            assert np.allclose(q, p)

    def test_monotone_each_side(self):
        below = [ae.kl_penalty(0.05, [q]) for q in (0.04, 0.02, 0.01, 0.001)]
        above = [ae.kl_penalty(0.05, [q]) for q in (0.06, 0.1, 0.3, 0.9)]
        assert below == sorted(below) and above == sorted(above)

    def test_clamped(self):
        assert math.isfinite(ae.kl_penalty(0.05, [0.0, 1.0]))

    def test_delta_sign(self):
        assert np.all(ae.sparsity_delta(0.05, np.array([0.2, 0.5]), 3.0) > 0)
        assert np.all(ae.sparsity_delta(0.05, np.array([0.01]), 3.0) < 0)


class TestSparseGradients:
    @pytest.mark.parametrize("trial", range(10))
    def test_matches_finite_differences(self, trial):
        assert sparse_error(trial) < 1e-6

    def test_beta_zero_is_plain_backprop(self):
        p = nn.init_network(ae.autoencoder_layers(6, 4), 3)
        x = np.random.default_rng(0).random((9, 6))
        gw, gb = ae.sparse_backprop(p, x, 0.0, 0.05)
        pw, pb = nn.backprop(p, x, x, nn.SQUARED)
        assert all(np.array_equal(a, b) for a, b in zip(gw + gb, pw + pb))

    def test_beta_zero_cost(self):
        p = nn.init_network(ae.autoencoder_layers(6, 4), 3)
        x = np.random.default_rng(0).random((9, 6))
        assert ae.sparse_cost(p, x, 1e-3, 0.0, 0.05) == nn.cost(p, x, x, 1e-3, nn.SQUARED)

    def test_empty_batch(self):
        p = nn.init_network(ae.autoencoder_layers(3, 2), 0)
        with pytest.raises(ae.EmptyBatch):
            ae.sparse_backprop(p, np.zeros((0, 3)), 3.0, 0.05)


class TestTraining:
    def test_subspace_recovery(self, subspace):
        cfg = ae.SparseAeConfig(3, sparsity_weight=0.0)
        trained = ae.train_autoencoder(subspace, cfg)
        assert recon_mse(trained.params, subspace) < 0.05
        assert trained.cost_history[-1] <= trained.cost_history[0]

    def test_overcomplete_near_zero_error(self, subspace):
        trained = ae.train_autoencoder(subspace, ae.SparseAeConfig(12, sparsity_weight=0.0))
        assert recon_mse(trained.params, subspace) < 0.01

    def test_sparsity_target_reached(self, subspace):
        trained = ae.train_autoencoder(subspace, ae.SparseAeConfig(3))
        assert 0.025 <= trained.mean_activation.mean() <= 0.1

    def test_large_beta_trades_fidelity(self, subspace):
        plain = ae.train_autoencoder(subspace, ae.SparseAeConfig(3, sparsity_weight=0.0))
        sparse = ae.train_autoencoder(subspace, ae.SparseAeConfig(3, sparsity_weight=50.0))
        assert 0.025 <= sparse.mean_activation.mean() <= 0.1
        assert recon_mse(sparse.params, subspace) > recon_mse(plain.params, subspace)

    def test_beta_zero_training_is_plain_training(self, subspace):
        cfg = ae.SparseAeConfig(3, sparsity_weight=0.0, base=replace(ae.SparseAeConfig(3).base, epochs_max=50))
        assert ae.train_autoencoder(subspace, cfg).params.equals(ae.train_plain_autoencoder(subspace, cfg))

    def test_deterministic(self, subspace):
        cfg = ae.SparseAeConfig(3, base=replace(ae.SparseAeConfig(3).base, epochs_max=30))
        a, b = ae.train_autoencoder(subspace, cfg), ae.train_autoencoder(subspace, cfg)
        assert a.params.equals(b.params)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ae.SparseAeConfig(3, sparsity_target=0.0)
        with pytest.raises(ValueError):
            ae.SparseAeConfig(3, sparsity_weight=-1)


def short_cfg(size=4, epochs=30):
    return ae.SparseAeConfig(size, base=replace(ae.SparseAeConfig(size).base, epochs_max=epochs))


@pytest.fixture(scope="module")
def stack():
    x = np.random.default_rng(0).random((60, 12))
    return x, ae.stack_train(x, [8, 5, 3], short_cfg())


class TestStack:
    def test_chained_dims(self, stack):
        x, s = stack
        assert s.sizes == [8, 5, 3]
        assert [ae.encode(s, x, d).shape[1] for d in (1, 2, 3)] == [8, 5, 3]

    def test_single_layer_equals_train_autoencoder(self):
        x = np.random.default_rng(1).random((40, 6))
        cfg = short_cfg(3)
        s = ae.stack_train(x, [3], cfg)
        direct = ae.train_autoencoder(x, cfg)
        np.testing.assert_array_equal(s.layers[0].weight, direct.params.weights[0])
        np.testing.assert_array_equal(s.layers[0].mean_activation, direct.mean_activation)

    def test_layer_two_trained_on_layer_one_code(self, stack):
        x, s = stack
        code = ae.encode(s, x, 1)
        second = ae.train_autoencoder(code, replace(short_cfg(), hidden_size=5))
        np.testing.assert_array_equal(s.layers[1].weight, second.params.weights[0])

    def test_standardized_encoder_folds_scaling(self):
        x = np.random.default_rng(2).random((50, 6)) * 10 + 3
        cfg = short_cfg(3)
        s = ae.stack_train(x, [3], cfg, standardize=True)
        z = (x - x.mean(0)) / x.std(0)
        direct = ae.train_autoencoder(z, cfg)
        np.testing.assert_allclose(ae.encode(s, x, 1), nn.forward(direct.params, z).activations[1], atol=1e-10)

    def test_encode_is_sigmoid_of_affine(self):
        w = np.eye(3)
        s = ae.AutoencoderStack(3, [ae.EncoderLayer(w, np.zeros(3), np.zeros(3))])
        x = np.array([[0.0, 1.0, -2.0]])
        np.testing.assert_allclose(ae.encode(s, x, 1), 1 / (1 + np.exp(-x)))

    def test_depth_out_of_range(self, stack):
        x, s = stack
        with pytest.raises(ae.DepthOutOfRange):
            ae.encode(s, x, 4)
        with pytest.raises(ae.DepthOutOfRange):
            ae.init_classifier_from_stack(s, 0)

    def test_deterministic(self, stack):
        x, s = stack
        again = ae.stack_train(x, [8, 5, 3], short_cfg())
        assert all(np.array_equal(a.weight, b.weight) for a, b in zip(s.layers, again.layers))

    def test_classifier_from_stack(self, stack):
        x, s = stack
        net = ae.init_classifier_from_stack(s, 3, (10, 10, 10, 10, 2), seed=0)
        assert [w.shape for w in net.weights] == [(8, 12), (5, 8), (3, 5), (10, 3), (10, 10), (10, 10), (10, 10), (2, 10)]
        for k in range(3):
            np.testing.assert_array_equal(net.weights[k], s.layers[k].weight)
        assert net.layers[3].activation == nn.SIGMOID and net.layers[-1].activation == nn.SIGMOID
        np.testing.assert_allclose(nn.forward(net, x).activations[3], ae.encode(s, x, 3))

    def test_full_size_stack_shapes(self):
        sizes = [2000, 1000, 500, 200, 100, 50]
        dims = [4666] + sizes
        layers = [ae.EncoderLayer(np.zeros((o, i)), np.zeros(o), np.zeros(o)) for i, o in zip(dims, dims[1:])]
        s = ae.AutoencoderStack(4666, layers)
        net = ae.init_classifier_from_stack(s, 6)
        assert len(net.weights) == 11
        assert net.weights[2].shape == (500, 1000)

    def test_mismatched_stack_rejected(self):
        with pytest.raises(nn.ShapeMismatch):
            ae.AutoencoderStack(5, [ae.EncoderLayer(np.zeros((3, 4)), np.zeros(3), np.zeros(3))])

    def test_save_load(self, stack, tmp_path):
        _, s = stack
        ae.save_stack(tmp_path / "s.bin", s)
        back = ae.load_stack(tmp_path / "s.bin")
        assert back.sizes == s.sizes
        for a, b in zip(s.layers, back.layers):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.mean_activation, b.mean_activation)
