import numpy as np
import pytest

from tunnelscope.data import BlobSpec, Dataset, make_blobs, standardize_pair
from tunnelscope.nn import (Checkpoint, Network, NetworkSpec, TrainConfig,
                            TrainingDivergedError, cross_entropy_loss,
                            forward_collect, init_network, load_checkpoint,
                            loss_and_gradients, network_accuracy, reset_layers,
                            save_checkpoint, stitch, train, truncate,
                            weight_change_norm)


def tiny_dataset(seed=0, n=40, dim=4, classes=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim)).astype(np.float32)
    y = rng.integers(0, classes, size=n)
    return Dataset(x, y, classes)


def params_bytes(net):
    return b"".join(w.tobytes() + b.tobytes() for w, b in net.layers)


class TestSpecValidation:
    def test_residual_requires_equal_widths(self):
        with pytest.raises(ValueError):
            NetworkSpec(4, (8, 16), 3, residual=True)
        NetworkSpec(4, (8, 8), 3, residual=True)

    def test_class_and_width_bounds(self):
        with pytest.raises(ValueError):
            NetworkSpec(4, (8,), 1)
        with pytest.raises(ValueError):
            NetworkSpec(4, (0,), 3)


class TestInitNetwork:
    def test_deterministic_in_seed(self):
        spec = NetworkSpec(6, (16, 16), 4)
        a, b = init_network(spec, 42), init_network(spec, 42)
        assert params_bytes(a) == params_bytes(b)

    def test_degenerate_depth_single_linear_layer(self):
        net = init_network(NetworkSpec(5, (), 3), 0)
        assert len(net.layers) == 1
        assert net.layers[0][0].shape == (5, 3)

    def test_different_seeds_differ(self):
        spec = NetworkSpec(6, (16,), 4)
        assert params_bytes(init_network(spec, 0)) != params_bytes(init_network(spec, 1))

    def test_fan_in_bound_and_zero_bias(self):
        net = init_network(NetworkSpec(24, (8,), 3), 7)
        w, b = net.layers[0]
        assert np.all(np.abs(w) <= np.sqrt(6.0 / 24))
        assert np.all(b == 0)


class TestForwardCollect:
    def test_zero_network_gives_zero_everything(self):
        spec = NetworkSpec(4, (8, 8), 3)
        zero_layers = tuple(
            (np.zeros(s, np.float32), np.zeros(s[1], np.float32))
            for s in [(4, 8), (8, 8), (8, 3)]
        )
        net = Network(spec, zero_layers, rng_seed=0)
        acts, preds = forward_collect(net, np.ones((5, 4), np.float32))
        assert all(np.all(a == 0) for a in acts)
        assert np.all(preds == 0)  # argmax tie-break toward class 0

    def test_hand_computed_single_hidden_layer(self):
        w1 = np.array([[1.0, -1.0], [2.0, 0.5]], np.float32)
        b1 = np.array([0.5, -0.25], np.float32)
        w2 = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
        b2 = np.zeros(2, np.float32)
        net = Network(NetworkSpec(2, (2,), 2), ((w1, b1), (w2, b2)), 0)
        x = np.array([[1.0, -2.0]], np.float32)
        acts, _ = forward_collect(net, x)
        # pre-activation: [1*1 + -2*2 + 0.5, 1*-1 + -2*0.5 - 0.25] = [-2.5, -2.25]
        assert np.allclose(acts[0], [[0.0, 0.0]])
        assert np.allclose(acts[1], [[0.0, 0.0]])

    def test_residual_skip_path_with_zeroed_deep_weights(self):
        spec = NetworkSpec(3, (6, 6, 6), 4, residual=True)
        net = init_network(spec, 3)
        layers = list(net.layers)
        for i in (1, 2):  # zero every hidden layer after the first
            layers[i] = (np.zeros_like(layers[i][0]), np.zeros_like(layers[i][1]))
        net = Network(spec, tuple(layers), 3)
        x = np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)
        acts, _ = forward_collect(net, x)
        projected = acts[0]  # rectifier of the projected input
        assert np.allclose(acts[1], projected)
        assert np.allclose(acts[2], projected)

    def test_dimension_mismatch_rejected(self):
        net = init_network(NetworkSpec(4, (8,), 3), 0)
        with pytest.raises(ValueError):
            forward_collect(net, np.ones((2, 5), np.float32))

    def test_logits_match_accuracy_decision(self):
        net = init_network(NetworkSpec(4, (8,), 3), 1)
        d = tiny_dataset()
        acts, preds = forward_collect(net, d.features)
        assert np.array_equal(preds, np.argmax(acts[-1], axis=1))
        assert network_accuracy(net, d) == float(np.mean(preds == d.labels))


class TestGradients:
    def gradient_check(self, residual):
        rng = np.random.default_rng(0)
        spec = NetworkSpec(5, (8, 8), 3, residual=residual)
        net = init_network(spec, 9)
        layers = [(w.astype(np.float64), b.astype(np.float64)) for w, b in net.layers]
        x = rng.normal(size=(12, 5))
        y = rng.integers(0, 3, size=12)
        _, grads = loss_and_gradients(layers, x, y, residual)
        h = 1e-4
        for li, (w, b) in enumerate(layers):
            for arr, grad in ((w, grads[li][0]), (b, grads[li][1])):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + h
                    up = cross_entropy_loss(layers, x, y, residual)
                    arr[idx] = orig - h
                    down = cross_entropy_loss(layers, x, y, residual)
                    arr[idx] = orig
                    fd = (up - down) / (2 * h)
                    g = grad[idx]
                    denom = max(abs(fd), abs(g), 1e-6)
                    assert abs(fd - g) / denom < 1e-4, (li, idx, fd, g)

    def test_analytic_gradients_match_finite_differences(self):
        self.gradient_check(residual=False)

    def test_residual_gradients_match_finite_differences(self):
        self.gradient_check(residual=True)

    def test_softmax_rows_sum_to_one_and_loss_nonneg(self):
        net = init_network(NetworkSpec(4, (8,), 3), 2)
        d = tiny_dataset()
        acts, _ = forward_collect(net, d.features)
        logits = acts[-1].astype(np.float64)
        probs = np.exp(logits - logits.max(1, keepdims=True))
        probs /= probs.sum(1, keepdims=True)
        assert np.allclose(probs.sum(1), 1.0, atol=1e-9)
        assert cross_entropy_loss(net.layers, d.features, d.labels) >= 0.0


class TestTrain:
    def test_zero_epochs_is_identity(self):
        net = init_network(NetworkSpec(4, (8,), 3), 0)
        d = tiny_dataset()
        res = train(net, d, d, TrainConfig(learning_rate=0.1, epochs=0, batch_size=8))
        assert params_bytes(res.network) == params_bytes(net)
        assert len(res.checkpoints) == 1 and res.checkpoints[0].epoch == 0

    def test_zero_learning_rate_keeps_parameters(self):
        net = init_network(NetworkSpec(4, (8,), 3), 0)
        d = tiny_dataset()
        cfg = TrainConfig(learning_rate=0.0, momentum=0.9, weight_decay=1e-3,
                          epochs=3, batch_size=8)
        res = train(net, d, d, cfg)
        assert params_bytes(res.network) == params_bytes(net)

    def test_bitwise_determinism(self):
        net = init_network(NetworkSpec(4, (8, 8), 3), 5)
        d = tiny_dataset(1)
        cfg = TrainConfig(learning_rate=0.05, momentum=0.9, epochs=4, batch_size=16, seed=3)
        a = train(net, d, d, cfg)
        b = train(net, d, d, cfg)
        assert params_bytes(a.network) == params_bytes(b.network)
        assert a.test_accuracy == b.test_accuracy

    def test_checkpoint_cadence(self):
        net = init_network(NetworkSpec(4, (8,), 3), 0)
        d = tiny_dataset()
        cfg = TrainConfig(learning_rate=0.01, epochs=7, batch_size=16, checkpoint_every=3)
        res = train(net, d, d, cfg)
        assert [c.epoch for c in res.checkpoints] == [0, 3, 6, 7]

    def test_reference_blob_task_reaches_ninety_percent(self):
        # linearly separable by construction: single cluster per class
        spec = BlobSpec(num_classes=10, dim=32, per_class_train=100,
                        per_class_test=30, noise_std=0.5, seed=0)
        tr, te = standardize_pair(*make_blobs(spec))
        net = init_network(NetworkSpec(32, (256,) * 12, 10), 1)
        cfg = TrainConfig(learning_rate=0.02, momentum=0.9, weight_decay=2e-3,
                          epochs=30, batch_size=128, seed=2)
        res = train(net, tr, te, cfg)
        assert res.test_accuracy >= 0.9

    def test_divergence_aborts_with_diagnostic(self):
        net = init_network(NetworkSpec(4, (8,), 3), 0)
        d = tiny_dataset()
        huge = Dataset(d.features * np.float32(1e30), d.labels, d.num_classes)
        with pytest.raises(TrainingDivergedError):
            train(net, huge, huge, TrainConfig(learning_rate=1e6, epochs=5, batch_size=8))

    def test_config_provenance_stored_verbatim(self):
        cfg = TrainConfig(learning_rate=0.1, momentum=0.9, epochs=1, batch_size=8)
        assert cfg.learning_rate == 0.1 and cfg.momentum == 0.9

    def test_milestone_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.1, epochs=5, lr_decay_milestones=(3, 3))
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.1, epochs=5, lr_decay_milestones=(7,))


class TestWeightChangeNorm:
    def make_ckpt(self, scale):
        w = np.full((2, 2), scale, np.float32)
        return Checkpoint(0, 0, ((w, np.zeros(2, np.float32)),))

    def test_identical_checkpoints_give_zero(self):
        a = self.make_ckpt(1.0)
        assert weight_change_norm(a, a, 0) == 0.0

    def test_hand_value_all_ones_difference(self):
        a, b = self.make_ckpt(1.0), self.make_ckpt(2.0)
        # (1/sqrt(4)) * ||ones(2x2)||_F = 0.5 * 2 = 1; bias excluded
        assert weight_change_norm(a, b, 0) == pytest.approx(1.0)

    def test_symmetry(self):
        a, b = self.make_ckpt(0.5), self.make_ckpt(-1.5)
        assert weight_change_norm(a, b, 0) == weight_change_norm(b, a, 0)

    def test_invalid_layer(self):
        a = self.make_ckpt(1.0)
        with pytest.raises(ValueError):
            weight_change_norm(a, a, 3)


class TestSurgery:
    def setup_method(self):
        self.spec = NetworkSpec(4, (8, 8, 8), 3)
        self.net = init_network(self.spec, 0)
        d = tiny_dataset()
        self.trained = train(self.net, d, d,
                             TrainConfig(learning_rate=0.05, epochs=3, batch_size=16)).network
        self.init_ckpt = Checkpoint(0, 0, self.net.layers)
        self.data = d

    def test_reset_empty_range_is_identity(self):
        out = reset_layers(self.trained, self.init_ckpt, [])
        assert params_bytes(out) == params_bytes(self.trained)

    def test_reset_full_range_restores_init(self):
        out = reset_layers(self.trained, self.init_ckpt, range(4))
        assert params_bytes(out) == params_bytes(self.net)

    def test_reset_does_not_mutate_input(self):
        before = params_bytes(self.trained)
        reset_layers(self.trained, self.init_ckpt, range(4))
        assert params_bytes(self.trained) == before

    def test_reset_invalid_range(self):
        with pytest.raises(ValueError):
            reset_layers(self.trained, self.init_ckpt, [5])

    def test_self_stitch_identity(self):
        for split in range(5):
            out = stitch(self.trained, self.trained, split)
            assert params_bytes(out) == params_bytes(self.trained)

    def test_boundary_splits(self):
        other = init_network(self.spec, 9)
        assert params_bytes(stitch(self.trained, other, 0)) == params_bytes(other)
        assert params_bytes(stitch(self.trained, other, 4)) == params_bytes(self.trained)

    def test_stitch_spec_mismatch(self):
        other = init_network(NetworkSpec(4, (8, 8), 3), 0)
        with pytest.raises(ValueError):
            stitch(self.trained, other, 1)
        with pytest.raises(ValueError):
            stitch(self.trained, self.trained, 9)

    def test_truncate(self):
        assert truncate(self.spec, 3) == self.spec
        assert truncate(self.spec, 0) == NetworkSpec(4, (), 3)
        assert truncate(self.spec, 2).hidden_widths == (8, 8)
        with pytest.raises(ValueError):
            truncate(self.spec, 4)


class TestCheckpointContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        net = init_network(NetworkSpec(5, (7, 3), 4), 12)
        path = tmp_path / "net.tnlc"
        save_checkpoint(path, net.layers)
        loaded = load_checkpoint(path)
        assert len(loaded) == len(net.layers)
        for (w0, b0), (w1, b1) in zip(net.layers, loaded):
            assert w0.tobytes() == w1.tobytes()
            assert b0.tobytes() == b1.tobytes()
        # file-level round trip
        second = tmp_path / "again.tnlc"
        save_checkpoint(second, loaded)
        assert path.read_bytes() == second.read_bytes()

    def test_format_header(self, tmp_path):
        net = init_network(NetworkSpec(2, (), 2), 0)
        path = tmp_path / "n.tnlc"
        save_checkpoint(path, net.layers)
        blob = path.read_bytes()
        assert blob[:4] == b"TNLC"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 1  # one layer

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.tnlc"
        path.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        net = init_network(NetworkSpec(3, (4,), 2), 0)
        path = tmp_path / "t.tnlc"
        save_checkpoint(path, net.layers)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError):
            load_checkpoint(path)
