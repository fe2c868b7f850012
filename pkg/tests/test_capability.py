"""Capability classifier: forward contract, training, curriculum, model files."""
import numpy as np
import pytest

from cinplan import (
    Action,
    CapSample,
    TrainingDiverged,
    WorldMap,
    adam_init,
    collect_samples,
    curriculum_order,
    forward,
    forward_batch,
    generate_maze,
    generate_terrain,
    init_net,
    kernel_mse,
    load_net,
    save_net,
    step,
    train_supervised,
)
from cinplan import capability
from cinplan.gridworld import ACTION_OFFSETS


def random_net(rng_seed, hidden=8):
    net = init_net(hidden=hidden, rng_seed=rng_seed)
    rng = np.random.default_rng(rng_seed + 1000)
    for w in net.weights:
        w += rng.normal(0.0, 0.5, w.shape)
    for b in net.biases:
        b += rng.normal(0.0, 0.5, b.shape)
    return net


class TestForward:
    @pytest.mark.parametrize("seed", range(10))
    def test_normalized_for_arbitrary_parameters(self, seed):
        net = random_net(seed)
        patch = np.random.default_rng(seed).normal(size=9)
        kernels = forward(net, patch)
        assert kernels.shape == (8, 3, 3)
        assert np.all(kernels >= 0.0)
        assert np.all(kernels <= 1.0)
        assert np.allclose(kernels.reshape(8, -1).sum(axis=1), 1.0, atol=1e-6)

    def test_pure(self):
        net = random_net(3)
        patch = np.arange(9.0)
        assert np.array_equal(forward(net, patch), forward(net, patch))

    def test_accepts_square_patch(self):
        net = random_net(0)
        flat = forward(net, np.arange(9.0))
        square = forward(net, np.arange(9.0).reshape(3, 3))
        assert np.array_equal(flat, square)

    def test_shape_mismatch_rejected(self):
        net = init_net()
        with pytest.raises(ValueError):
            forward(net, np.ones(8))
        with pytest.raises(ValueError):
            forward_batch(net, np.ones((4, 8)))

    def test_layer_sizes(self):
        net = init_net()
        assert net.layer_sizes == [9, 64, 64, 64, 64, 72]
        small = init_net(hidden=8, depth=4)
        assert small.layer_sizes == [9, 8, 8, 8, 8, 72]


class TestCollectSamples:
    def test_sample_count(self):
        maps = [generate_maze(8, s) for s in range(3)]
        samples = collect_samples(maps, n_episodes=4, episode_len=5, rng_seed=0)
        assert len(samples) == 3 * 4 * 5

    def test_deterministic(self):
        maps = [generate_maze(8, 0)]
        a = collect_samples(maps, 2, 6, rng_seed=9)
        b = collect_samples(maps, 2, 6, rng_seed=9)
        assert all(
            np.array_equal(x.patch, y.patch)
            and x.action == y.action
            and np.array_equal(x.label, y.label)
            for x, y in zip(a, b)
        )

    def test_blocked_moves_label_center(self):
        maps = [generate_maze(8, 1)]
        samples = collect_samples(maps, 6, 10, rng_seed=0)
        blocked = [
            s
            for s in samples
            if s.patch[(ACTION_OFFSETS[s.action][0] + 1) * 3 + ACTION_OFFSETS[s.action][1] + 1]
            == 0.0
        ]
        assert blocked, "random walks on a maze must hit walls"
        for s in blocked:
            assert s.label[4] == 1.0  # center of the 3x3 window

    def test_fixed_patch_action_pair_has_single_label(self):
        maps = [generate_maze(8, s) for s in range(5)]
        samples = collect_samples(maps, 6, 10, rng_seed=0)
        seen = {}
        for s in samples:
            key = (s.patch.tobytes(), s.action)
            label = s.label.tobytes()
            assert seen.setdefault(key, label) == label

    def test_empty_maps_rejected(self):
        with pytest.raises(ValueError):
            collect_samples([], 1, 1, rng_seed=0)


class TestLossAndTraining:
    def test_zero_loss_on_exact_labels(self):
        label = np.zeros(9)
        label[4] = 1.0
        assert kernel_mse(label.copy(), label) == 0.0

    def test_matches_manual_formula(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(size=(4, 9))
        label = rng.uniform(size=(4, 9))
        manual = np.mean([np.sum((p - y) ** 2) / 9.0 for p, y in zip(pred, label)])
        assert kernel_mse(pred, label) == pytest.approx(manual, rel=1e-12)

    def _training_setup(self, n_maps=30):
        maps = [generate_maze(8, s) for s in range(n_maps)]
        return collect_samples(maps, 4, 8, rng_seed=0)

    def test_loss_decreases(self):
        samples = self._training_setup()
        net = init_net(rng_seed=0)
        adam = adam_init(net, lr=1e-3)
        losses = train_supervised(net, samples, epochs=8, adam=adam, rng_seed=1)
        assert losses[-1] < losses[0]

    def test_reproducible_bit_for_bit(self):
        samples = self._training_setup(10)
        nets = []
        for _ in range(2):
            net = init_net(rng_seed=4)
            adam = adam_init(net, lr=1e-3)
            train_supervised(net, samples, epochs=3, adam=adam, rng_seed=7)
            nets.append(capability.flatten_params(net))
        assert np.array_equal(nets[0], nets[1])

    def test_nan_loss_aborts(self):
        samples = self._training_setup(5)
        net = init_net(rng_seed=0)
        net.weights[0][0, 0] = np.nan
        adam = adam_init(net, lr=1e-3)
        with pytest.raises(TrainingDiverged):
            train_supervised(net, samples, epochs=1, adam=adam, rng_seed=1)

    def test_gradient_matches_finite_differences(self):
        # central FD oracle at eps=1e-5 over every parameter, 2-sample batch
        maps = [generate_maze(8, 0)]
        samples = collect_samples(maps, 1, 2, rng_seed=3)[:2]
        net = init_net(hidden=8, rng_seed=5)
        x = np.stack([s.patch for s in samples])
        actions = np.array([s.action for s in samples])
        y = np.stack([s.label for s in samples])
        rows = np.arange(len(samples))

        def loss_value():
            probs, _ = forward_batch(net, x)
            return kernel_mse(probs[rows, actions], y)

        probs, cache = forward_batch(net, x)
        d_probs = np.zeros_like(probs)
        d_probs[rows, actions] = (2.0 / (9 * len(samples))) * (probs[rows, actions] - y)
        d_logits = capability._slice_softmax_backward(probs, d_probs)
        g_w, g_b = capability._mlp_backward(net, cache, d_logits)
        g_an = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(g_w, g_b)])

        vec0 = capability.flatten_params(net)
        eps = 1e-5
        g_fd = np.zeros_like(vec0)
        for i in range(vec0.size):
            for sgn in (1.0, -1.0):
                bumped = vec0.copy()
                bumped[i] += sgn * eps
                capability.assign_params(net, bumped)
                g_fd[i] += sgn * loss_value()
            g_fd[i] /= 2 * eps
        capability.assign_params(net, vec0)
        rel = np.abs(g_an - g_fd) / np.maximum(1e-6, np.maximum(np.abs(g_an), np.abs(g_fd)))
        assert rel.max() < 1e-4


class TestCurriculum:
    def _terrain_sample(self, gap):
        patch = np.zeros(9)
        patch[5] = gap
        label = np.zeros(9)
        label[4] = 1.0
        return CapSample(patch=patch, action=int(Action.E), label=label, terrain=True)

    def test_flat_patch_is_easy(self):
        bins = curriculum_order([self._terrain_sample(0.0)], 0.25)
        assert len(bins[0]) == 1

    def test_near_threshold_is_hardest(self):
        bins = curriculum_order([self._terrain_sample(0.24)], 0.25)
        assert len(bins[-1]) == 1

    def test_partition_preserves_all_samples(self):
        maps = [generate_terrain(9, 0.5, s) for s in range(4)]
        samples = collect_samples(maps, 4, 6, rng_seed=0)
        bins = curriculum_order(samples, 0.25, rng_seed=1)
        flat = [s for b in bins for s in b]
        assert len(flat) == len(samples)
        assert {id(s) for s in flat} == {id(s) for s in samples}

    def test_2d_passthrough(self):
        maps = [generate_maze(8, 0)]
        samples = collect_samples(maps, 2, 4, rng_seed=0)
        bins = curriculum_order(samples, 0.25)
        assert len(bins) == 1
        assert bins[0] == samples

    def test_empty_input(self):
        assert curriculum_order([], 0.25) == []


class TestModelFile:
    def test_roundtrip_exact(self, tmp_path):
        net = random_net(11, hidden=16)
        path = tmp_path / "net.cinnet"
        save_net(net, path)
        loaded = load_net(path)
        assert loaded.layer_sizes == net.layer_sizes
        assert loaded.n_actions == net.n_actions
        assert loaded.kernel_size == net.kernel_size
        assert np.array_equal(
            capability.flatten_params(loaded), capability.flatten_params(net)
        )

    def test_write_read_write_bytes_identical(self, tmp_path):
        net = random_net(2)
        p1, p2 = tmp_path / "a.cinnet", tmp_path / "b.cinnet"
        save_net(net, p1)
        save_net(load_net(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cinnet"
        path.write_bytes(b"NOTANET v9\n" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_net(path)
