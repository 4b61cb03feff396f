"""Tests for the residual FCN, initialization and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from tests.gradcheck import entry_error
from vncseg.config import NetworkConfig
from vncseg.exceptions import (
    ConfigError,
    FormatError,
    MissingFileError,
    ShapeError,
    SizeMismatchError,
)
from vncseg.layers import softmax_channels, softmax_channels_backward
from vncseg.network import (
    Network,
    checkpoint_paths,
    expected_parameter_count,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from vncseg.parallel import set_worker_count
from vncseg.training import soft_dice_loss


class TestNetworkShapes:
    """Tests for the forward shape contract."""

    def test_logits_shape(self) -> None:
        """Test (1, 5, 32, 32) maps to (1, 8, 32, 32)."""
        net = init_parameters(NetworkConfig(base_channels=8), seed=0)
        logits = net.forward(np.zeros((1, 5, 32, 32), np.float32))
        assert logits.shape == (1, 8, 32, 32)
        assert logits.dtype == np.float32

    def test_bottleneck_resolution(self) -> None:
        """Test the residual blocks run at H / 2^n_down."""
        net = init_parameters(NetworkConfig(base_channels=2, n_res_blocks=1), seed=0)
        x = np.random.default_rng(0).standard_normal((1, 5, 64, 48)).astype(np.float32)
        for layer in net.layers:
            x = layer.forward(x)
            if layer.name == "res1":
                assert x.shape == (1, 16, 8, 6)
        assert x.shape == (1, 8, 64, 48)

    @pytest.mark.parametrize("shape", [(1, 4, 16, 16), (1, 5, 12, 16), (5, 16, 16)])
    def test_rejects_bad_input(self, shape: tuple[int, ...]) -> None:
        """Test wrong channel counts, indivisible sizes and wrong rank."""
        net = init_parameters(NetworkConfig(base_channels=2, n_res_blocks=1), seed=0)
        with pytest.raises(ShapeError):
            net.forward(np.zeros(shape, np.float32))

    def test_parameter_names(self) -> None:
        """Test qualified names follow the layer layout."""
        net = Network(NetworkConfig(base_channels=2, n_res_blocks=1))
        names = list(net.parameters())
        assert names[:3] == ["stem.conv.weight", "stem.bn.gamma", "stem.bn.beta"]
        assert "res1.conv2.weight" in names
        assert names[-2:] == ["head.conv.weight", "head.conv.bias"]
        assert "stem.bn.running_var" in net.buffers()


class TestParameterCount:
    """Tests for the closed-form parameter count."""

    @pytest.mark.parametrize(
        "config",
        [
            NetworkConfig(),
            NetworkConfig(base_channels=8),
            NetworkConfig(base_channels=4, n_down=1, n_up=1, n_res_blocks=1),
            NetworkConfig(in_channels=3, n_classes=2, base_channels=5, n_down=2, n_up=2),
        ],
    )
    def test_matches_layers(self, config: NetworkConfig) -> None:
        """Test the analytic count equals the built network's count."""
        assert Network(config).parameter_count() == expected_parameter_count(config)


class TestInitParameters:
    """Tests for He-normal initialization."""

    def test_same_seed_is_identical(self) -> None:
        """Test determinism."""
        cfg = NetworkConfig(base_channels=4)
        a = init_parameters(cfg, seed=3).parameters()
        b = init_parameters(cfg, seed=3).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seeds_differ(self) -> None:
        """Test another seed changes weights."""
        cfg = NetworkConfig(base_channels=4)
        a = init_parameters(cfg, seed=3).parameters()
        b = init_parameters(cfg, seed=4).parameters()
        assert any(not np.array_equal(a[n], b[n]) for n in a)

    def test_weight_scale(self) -> None:
        """Test a 64-channel 3x3 layer has std close to sqrt(2 / 576)."""
        net = init_parameters(NetworkConfig(base_channels=32), seed=0)
        weight = net.parameters()["down2.conv.weight"]
        assert weight.shape[1:] == (64, 3, 3)
        assert weight.std() == pytest.approx(np.sqrt(2.0 / 576.0), rel=0.1)

    def test_bias_and_batch_norm_defaults(self) -> None:
        """Test biases and BN shifts start at 0 and scales at 1."""
        params = init_parameters(NetworkConfig(base_channels=4), seed=0).parameters()
        np.testing.assert_array_equal(params["head.conv.bias"], 0.0)
        np.testing.assert_array_equal(params["stem.bn.gamma"], 1.0)
        np.testing.assert_array_equal(params["stem.bn.beta"], 0.0)


class TestNetworkGradients:
    """End-to-end gradient check through softmax and soft-Dice loss."""

    def test_sampled_parameters(self) -> None:
        """Test 50 randomly sampled parameter gradients against central differences.

        Errors are relative per entry, except that the denominator never drops
        below 1e-3 of the largest gradient in the network: entries smaller than
        that are held to an absolute error of 1e-7 times the largest gradient.
        Each entry takes the best of three step sizes so that a ReLU kink next
        to the evaluation point does not decide the result.
        """
        cfg = NetworkConfig(base_channels=4, n_res_blocks=1)
        net = init_parameters(cfg, seed=1, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 5, 16, 16))
        target = np.eye(8)[rng.integers(0, 8, size=(1, 16, 16))].transpose(0, 3, 1, 2)

        def loss() -> float:
            return soft_dice_loss(softmax_channels(net.forward(x)), target)[0]

        probs = softmax_channels(net.forward(x))
        _, grad_probs = soft_dice_loss(probs, target)
        grads = net.backward(softmax_channels_backward(probs, grad_probs))
        params = net.parameters()
        assert set(grads) == set(params)

        floor = 1e-3 * max(float(np.abs(g).max()) for g in grads.values())
        names = sorted(params)
        for _ in range(50):
            name = names[int(rng.integers(len(names)))]
            index = tuple(int(rng.integers(s)) for s in params[name].shape)
            error = entry_error(loss, params[name], index, float(grads[name][index]), floor)
            assert error < 1e-4, name


class TestDeterminism:
    """Tests for thread-count independence."""

    def test_worker_count(self) -> None:
        """Test forward and backward bits do not depend on VNCSEG_THREADS."""
        cfg = NetworkConfig(base_channels=4, n_res_blocks=1)
        x = np.random.default_rng(0).standard_normal((4, 5, 16, 16)).astype(np.float32)
        g = np.random.default_rng(1).standard_normal((4, 8, 16, 16)).astype(np.float32)
        runs = []
        for workers in (1, 4):
            set_worker_count(workers)
            net = init_parameters(cfg, seed=0)
            logits = net.forward(x)
            runs.append((logits, net.backward(g)))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        for name in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name])


class TestCheckpoint:
    """Tests for save_checkpoint and load_checkpoint."""

    def _trained(self) -> Network:
        net = init_parameters(NetworkConfig(base_channels=4, n_res_blocks=1), seed=5)
        x = np.random.default_rng(0).standard_normal((2, 5, 16, 16)).astype(np.float32)
        net.forward(x)
        net.iteration = 7
        net.adam.step = 7
        net.metadata = {"best_val_dice": 0.5}
        for name, param in net.parameters().items():
            net.adam.m[name] = np.full_like(param, 0.25)
            net.adam.v[name] = np.full_like(param, 0.5)
        return net

    def test_round_trip_forward(self, tmp_path: Path) -> None:
        """Test a reloaded network gives bitwise-identical eval logits."""
        net = self._trained()
        save_checkpoint(net, tmp_path / "model")
        loaded = load_checkpoint(tmp_path / "model")
        x = np.random.default_rng(1).standard_normal((1, 5, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(
            net.forward(x, training=False), loaded.forward(x, training=False)
        )
        assert loaded.iteration == 7
        assert loaded.adam.step == 7
        assert loaded.metadata == {"best_val_dice": 0.5}
        np.testing.assert_array_equal(loaded.adam.m["stem.conv.weight"], 0.25)
        for name, buf in net.buffers().items():
            np.testing.assert_array_equal(loaded.buffers()[name], buf)

    def test_manifest(self, tmp_path: Path) -> None:
        """Test the manifest records format, config and the analytic parameter count."""
        net = self._trained()
        manifest_path, blob_path = save_checkpoint(net, tmp_path / "model")
        manifest = json.loads(manifest_path.read_text())
        assert manifest["format"] == "VNCSEG-CKPT1"
        assert manifest["n_parameters"] == expected_parameter_count(net.config)
        assert manifest["config"] == net.config.to_dict()
        assert manifest["total_bytes"] == blob_path.stat().st_size
        assert manifest["tensors"][0] == {
            "name": "param/stem.conv.weight",
            "shape": [4, 5, 7, 7],
            "offset": 0,
        }

    def test_paths(self, tmp_path: Path) -> None:
        """Test names resolve from either file."""
        manifest, blob = checkpoint_paths(tmp_path / "m.ckpt.raw")
        assert manifest == tmp_path / "m.ckpt.json"
        assert blob == tmp_path / "m.ckpt.raw"

    def test_truncated_blob(self, tmp_path: Path) -> None:
        """Test a short blob is a size mismatch."""
        _, blob = save_checkpoint(self._trained(), tmp_path / "model")
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(SizeMismatchError):
            load_checkpoint(tmp_path / "model")

    def test_unknown_config_field(self, tmp_path: Path) -> None:
        """Test unknown config keys are rejected."""
        manifest_path, _ = save_checkpoint(self._trained(), tmp_path / "model")
        manifest = json.loads(manifest_path.read_text())
        manifest["config"]["dropout"] = 0.1
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "model")

    def test_wrong_format(self, tmp_path: Path) -> None:
        """Test foreign manifests are rejected."""
        manifest_path, _ = save_checkpoint(self._trained(), tmp_path / "model")
        manifest_path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "model")

    def test_missing(self, tmp_path: Path) -> None:
        """Test missing checkpoints."""
        with pytest.raises(MissingFileError):
            load_checkpoint(tmp_path / "absent")
