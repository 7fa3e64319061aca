import numpy as np
import pytest
from dataclasses import replace

from gradcheck import classifier_error
from gwas_ssae import metrics
from gwas_ssae import neuralnet as nn


def tiny_net(seed=0, specs=None):
    specs = specs or nn.classifier_layers(3, hidden=(4,), n_outputs=2)
    return nn.init_network(specs, seed)


class TestStructure:
    def test_init_bounds_and_zero_bias(self):
        p = nn.init_network([5, 7, 2], seed=1)
        bound = np.sqrt(6 / 12)
        assert np.abs(p.weights[0]).max() <= bound
        assert all(np.all(b == 0) for b in p.biases)

    def test_default_classifier_shape(self):
        p = nn.init_network(nn.classifier_layers(51))
        assert [w.shape for w in p.weights] == [(10, 51), (10, 10), (10, 10), (10, 10), (2, 10)]
        assert p.layers[-1].activation == nn.SIGMOID

    def test_shape_mismatch(self):
        p = tiny_net()
        with pytest.raises(nn.ShapeMismatch):
            nn.forward(p, np.zeros((2, 4)))
        with pytest.raises(nn.ShapeMismatch):
            nn.NetworkParams(p.layers, p.weights[:1], p.biases[:1])

    def test_bad_layer_spec(self):
        with pytest.raises(ValueError):
            nn.LayerSpec(3, "tanh")
        with pytest.raises(ValueError):
            nn.LayerSpec(0)

    def test_targets(self):
        np.testing.assert_array_equal(nn.targets_for([0, 1], 2), [[1, 0], [0, 1]])
        np.testing.assert_array_equal(nn.targets_for([0, 1], 1), [[0], [1]])


class TestForward:
    def test_matches_manual(self):
        p = tiny_net(3)
        x = np.array([[0.5, -1.0, 2.0]])
        h = np.maximum(x @ p.weights[0].T + p.biases[0], 0)
        out = 1 / (1 + np.exp(-(h @ p.weights[1].T + p.biases[1])))
        np.testing.assert_allclose(nn.forward(p, x).output, out)
        assert nn.predict(p, x)[0] == pytest.approx(out[0, 1])

    def test_inverted_dropout_scaling(self):
        p = tiny_net()
        rng = np.random.default_rng(0)
        masks = nn.draw_dropout_masks(p, 10_000, rng, hidden_rate=0.5)
        assert masks[0] is None and masks[-1] is None
        assert set(np.unique(masks[1])) == {0.0, 2.0}
        assert masks[1].mean() == pytest.approx(1.0, abs=0.03)


class TestGradients:
    @pytest.mark.parametrize("trial", range(10))
    def test_backprop_matches_finite_differences(self, trial):
        assert classifier_error(trial) < 1e-6

    def test_batch_gradient_is_sum_of_examples(self):
        p = tiny_net(2)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 3))
        y = nn.targets_for(rng.integers(0, 2, 5), 2)
        gw, gb = nn.backprop(p, x, y, nn.CROSS_ENTROPY)
        singles = [nn.backprop(p, x[i : i + 1], y[i : i + 1], nn.CROSS_ENTROPY) for i in range(5)]
        for l in range(2):
            np.testing.assert_allclose(gw[l], sum(s[0][l] for s in singles), atol=1e-12)
            np.testing.assert_allclose(gb[l], sum(s[1][l] for s in singles), atol=1e-12)

    def test_cross_entropy_needs_sigmoid_output(self):
        p = nn.init_network([nn.LayerSpec(2, nn.LINEAR), nn.LayerSpec(1, nn.LINEAR)])
        with pytest.raises(ValueError):
            nn.backprop(p, np.ones((1, 2)), np.ones((1, 1)), nn.CROSS_ENTROPY)


class TestSchedules:
    def test_annealing(self):
        cfg = nn.TrainConfig(learning_rate=0.1, rate_annealing=1e-3)
        assert nn.effective_learning_rate(cfg, 0) == 0.1
        assert nn.effective_learning_rate(cfg, 1000) == pytest.approx(0.05)

    def test_momentum_ramp(self):
        cfg = nn.TrainConfig(momentum_start=0.5, momentum_ramp=100, momentum_stable=0.9)
        assert nn.momentum_at(cfg, 0) == 0.5
        assert nn.momentum_at(cfg, 50) == pytest.approx(0.7)
        assert nn.momentum_at(cfg, 1000) == 0.9

    def test_single_step_is_plain_gradient_descent(self):
        p = tiny_net(4)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3))
        y = nn.targets_for(rng.integers(0, 2, 6), 2)
        cfg = nn.TrainConfig(learning_rate=0.1, rate_annealing=0, momentum_start=0, momentum_stable=0,
                             hidden_dropout=0, batch_size=None, weight_decay=0.01)
        new = nn.gradient_descent_epoch(p, x, y, cfg, nn.EpochState.fresh(p, 0))
        gw, gb = nn.cost_gradient(p, x, y, 0.01, nn.CROSS_ENTROPY)
        for l in range(2):
            np.testing.assert_allclose(new.weights[l], p.weights[l] - 0.1 * gw[l], atol=1e-14)
            np.testing.assert_allclose(new.biases[l], p.biases[l] - 0.1 * gb[l], atol=1e-14)

    def test_rate_decay_and_freeze(self):
        p = nn.init_network(nn.classifier_layers(3, hidden=(4, 4)), 0)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 3))
        y = nn.targets_for(rng.integers(0, 2, 6), 2)
        base = nn.TrainConfig(learning_rate=0.1, rate_annealing=0, momentum_start=0, momentum_stable=0,
                              hidden_dropout=0, batch_size=None, rate_decay=0.5)
        frozen = nn.gradient_descent_epoch(p, x, y, replace(base, freeze_layers=1), nn.EpochState.fresh(p, 0))
        np.testing.assert_array_equal(frozen.weights[0], p.weights[0])
        new = nn.gradient_descent_epoch(p, x, y, base, nn.EpochState.fresh(p, 0))
        gw, _ = nn.cost_gradient(p, x, y, 0.0, nn.CROSS_ENTROPY)
        np.testing.assert_allclose(new.weights[0], p.weights[0] - 0.1 * 0.25 * gw[0], atol=1e-14)
        np.testing.assert_allclose(new.weights[2], p.weights[2] - 0.1 * gw[2], atol=1e-14)


def xor_data(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, (n, 2)).astype(float)
    y = (x[:, 0] != x[:, 1]).astype(int)
    return x + rng.normal(0, 0.1, x.shape), y


class TestTraining:
    def test_learns_xor(self):
        xtr, ytr = xor_data(400, 0)
        xva, yva = xor_data(100, 1)
        cfg = nn.TrainConfig(learning_rate=0.1, hidden_dropout=0, epochs_max=200, early_stop_patience=None)
        best, hist = nn.train(nn.init_network(nn.classifier_layers(2, (8, 8)), 0), (xtr, ytr), (xva, yva), cfg)
        assert metrics.auc_rank(nn.predict(best, xva), yva) > 0.99
        assert len(hist) == 200

    def test_early_stopping_and_best_epoch(self):
        rng = np.random.default_rng(0)
        xtr, ytr = rng.normal(size=(100, 5)), rng.integers(0, 2, 100)
        xva, yva = rng.normal(size=(50, 5)), rng.integers(0, 2, 50)
        cfg = nn.TrainConfig(learning_rate=0.05, epochs_max=200, early_stop_patience=3)
        best, hist = nn.train(nn.init_network(nn.classifier_layers(5), 0), (xtr, ytr), (xva, yva), cfg)
        assert len(hist) < 200
        keys = [(h["valid_misclass"], h["valid_logloss"]) for h in hist]
        k = int(np.argmin([m for m, _ in keys]))
        best_key = min(keys)
        p = nn.predict(best, xva)
        assert (metrics.misclassification(p, yva), metrics.logloss(p, yva)) == pytest.approx(best_key)
        assert hist[-1]["epoch"] - hist[k]["epoch"] <= 3 or len(hist) == 200

    def test_deterministic(self):
        xtr, ytr = xor_data(100, 0)
        xva, yva = xor_data(40, 1)
        cfg = nn.TrainConfig(epochs_max=5, seed=7)
        runs = [nn.train(nn.init_network(nn.classifier_layers(2), 0), (xtr, ytr), (xva, yva), cfg) for _ in range(2)]
        assert runs[0][0].equals(runs[1][0])
        assert runs[0][1] == runs[1][1]

    def test_divergence_raises(self):
        x = np.full((4, 2), 1e100)
        y = nn.targets_for([0, 1, 0, 1], 1)
        p = nn.init_network([nn.LayerSpec(2, nn.LINEAR), nn.LayerSpec(1, nn.LINEAR)])
        cfg = nn.TrainConfig(learning_rate=1e3, loss=nn.SQUARED, hidden_dropout=0, batch_size=None)
        state = nn.EpochState.fresh(p, 0)
        with pytest.raises(nn.NonFiniteLoss), np.errstate(all="ignore"):
            for _ in range(5):
                p = nn.gradient_descent_epoch(p, x, y, cfg, state)


class TestPersistence:
    def test_model_round_trip(self, tmp_path):
        p = tiny_net(5)
        cfg = nn.TrainConfig(learning_rate=0.2)
        nn.save_model(tmp_path / "m.bin", p, cfg, seed=5, extra={"variant_ids": ["a", "b", "c"]})
        q, header = nn.load_model(tmp_path / "m.bin")
        assert q.equals(p)
        assert nn.config_from_dict(header["config"]) == cfg
        assert header["extra"]["variant_ids"] == ["a", "b", "c"]
        assert (tmp_path / "m.json").exists()

    def test_trailing_bytes_rejected(self, tmp_path):
        nn.save_model(tmp_path / "m.bin", tiny_net())
        with open(tmp_path / "m.bin", "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(ValueError):
            nn.load_model(tmp_path / "m.bin")

    def test_history_csv(self, tmp_path):
        row = dict.fromkeys(nn.HISTORY_COLUMNS, 0.5)
        nn.write_history_csv([row], tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == ",".join(nn.HISTORY_COLUMNS)
