"""Residual fully convolutional network, initialization and checkpoints.

Topology (image-transformation style residual FCN, scaled to the configured
layer counts):

    stem     conv 7x7, stride 1, in_channels -> base            + BN + ReLU
    down_i   conv 3x3, stride 2, doubling channels (n_down x)   + BN + ReLU
    res_i    residual block at the bottleneck width (n_res_blocks x)
    up_i     nearest 2x upsample + conv 3x3 halving channels    + BN + ReLU
    head     conv 1x1 to n_classes, linear logits

Convolutions followed by batch normalization carry no bias (BN's beta plays
that role); the head has a bias.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from .config import NetworkConfig
from .exceptions import (
    ConfigError,
    FormatError,
    MissingFileError,
    ShapeError,
    SizeMismatchError,
)
from .layers import Array, Conv2d, Layer, ResidualBlock, Sequential, conv_bn_relu

logger = logging.getLogger("vncseg")

CHECKPOINT_FORMAT = "VNCSEG-CKPT1"
MANIFEST_SUFFIX = ".ckpt.json"
BLOB_SUFFIX = ".ckpt.raw"
BLOB_DTYPE = np.dtype("<f4")

PathLike = Union[str, Path]


@dataclass
class AdamState:
    """Per-parameter first/second moments and the step counter."""

    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


class Network:
    """Residual FCN mapping ``(B, in_channels, H, W)`` slabs to ``(B, n_classes, H, W)`` logits.

    Example:
        >>> net = init_parameters(NetworkConfig(base_channels=8), seed=0)
        >>> logits = net.forward(np.zeros((1, 5, 32, 32), np.float32))
        >>> logits.shape
        (1, 8, 32, 32)
    """

    def __init__(self, config: NetworkConfig, dtype: type = np.float32) -> None:
        """Build the layer list with placeholder parameters.

        Args:
            config: Architecture.
            dtype: Parameter dtype (float32 for training, float64 for gradient checks).
        """
        self.config = config
        self.dtype = np.dtype(dtype)
        self.adam = AdamState()
        self.iteration = 0
        self.metadata: dict[str, Any] = {}

        base = config.base_channels
        layers: list[Layer] = [conv_bn_relu("stem", config.in_channels, base, 7, dtype=dtype)]
        width = base
        for i in range(config.n_down):
            layers.append(conv_bn_relu(f"down{i + 1}", width, width * 2, 3, stride=2, dtype=dtype))
            width *= 2
        for i in range(config.n_res_blocks):
            layers.append(ResidualBlock(f"res{i + 1}", width, dtype=dtype))
        for i in range(config.n_up):
            layers.append(
                conv_bn_relu(f"up{i + 1}", width, width // 2, 3, upsample=True, dtype=dtype)
            )
            width //= 2
        layers.append(
            Sequential("head", [Conv2d("head.conv", width, config.n_classes, 1, dtype=dtype)])
        )
        self.body = Sequential("net", layers)

    @property
    def layers(self) -> list[Layer]:
        """Top-level layers in execution order."""
        return self.body.layers

    def parameters(self) -> OrderedDict[str, Array]:
        """Trainable arrays in a fixed order."""
        return OrderedDict(self.body.parameters())

    def gradients(self) -> OrderedDict[str, Array]:
        """Gradients of the last backward pass."""
        return OrderedDict(self.body.gradients())

    def buffers(self) -> OrderedDict[str, Array]:
        """Batch-norm running statistics."""
        return OrderedDict(self.body.buffers())

    def parameter_count(self) -> int:
        """Total number of trainable scalars."""
        return int(sum(p.size for p in self.parameters().values()))

    def astype(self, dtype: type) -> Network:
        """Convert every parameter and buffer in place and return self."""
        self.body.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def check_input(self, batch: Array) -> None:
        """Validate a network input.

        Raises:
            ShapeError: If the channel count is wrong or H/W are not divisible by 2^n_down.
        """
        if batch.ndim != 4:
            raise ShapeError(f"Network input must be (B, C, H, W), got shape {batch.shape}")
        _, c, h, w = batch.shape
        if c != self.config.in_channels:
            raise ShapeError(f"Network expects {self.config.in_channels} channels, got {c}")
        multiple = self.config.spatial_multiple
        if h % multiple or w % multiple:
            raise ShapeError(
                f"Input height/width {h}x{w} must be divisible by {multiple} (2^n_down)"
            )

    def forward(self, batch: Array, training: bool = True) -> Array:
        """Compute logits.

        Args:
            batch: Slabs ``(B, in_channels, H, W)``.
            training: Use batch statistics in batch norm (and update running stats).

        Returns:
            Logits ``(B, n_classes, H, W)``.
        """
        self.check_input(batch)
        return self.body.forward(batch.astype(self.dtype, copy=False), training)

    def backward(self, grad_logits: Array) -> OrderedDict[str, Array]:
        """Backpropagate a logits gradient through the last forward pass.

        Args:
            grad_logits: Gradient of the loss w.r.t. the logits.

        Returns:
            Gradient for every parameter, keyed like ``parameters()``.
        """
        self.body.backward(grad_logits.astype(self.dtype, copy=False))
        return self.gradients()


def expected_parameter_count(config: NetworkConfig) -> int:
    """Closed-form number of trainable scalars for an architecture.

    Args:
        config: Architecture.

    Returns:
        Sum over layers of conv weights, BN gamma/beta and the head bias.
    """
    base = config.base_channels
    total = config.in_channels * base * 7 * 7 + 2 * base
    width = base
    for _ in range(config.n_down):
        total += width * (2 * width) * 9 + 2 * (2 * width)
        width *= 2
    total += config.n_res_blocks * 2 * (width * width * 9 + 2 * width)
    for _ in range(config.n_up):
        total += width * (width // 2) * 9 + 2 * (width // 2)
        width //= 2
    total += width * config.n_classes + config.n_classes
    return total


def init_parameters(config: NetworkConfig, seed: int, dtype: type = np.float32) -> Network:
    """Build a network with He-normal weights.

    Conv weights are drawn in layer order from ``numpy.random.default_rng(seed)``
    with standard deviation ``sqrt(2 / fan_in)``; biases and BN beta are 0, BN
    gamma is 1.

    Args:
        config: Architecture.
        seed: PRNG seed.
        dtype: Parameter dtype.

    Returns:
        Initialized network.
    """
    net = Network(config, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, param in net.parameters().items():
        if name.endswith(".weight"):
            _, c, k, _ = param.shape
            std = np.sqrt(2.0 / (c * k * k))
            param[...] = rng.standard_normal(param.shape) * std
    logger.debug("Initialized network with %d parameters (seed %d)", net.parameter_count(), seed)
    return net


# =============================================================================
# Checkpoints
# =============================================================================


def checkpoint_paths(path: PathLike) -> tuple[Path, Path]:
    """Resolve a checkpoint name or either of its files to ``(manifest, blob)``."""
    text = str(path)
    for suffix in (MANIFEST_SUFFIX, BLOB_SUFFIX):
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    return Path(text + MANIFEST_SUFFIX), Path(text + BLOB_SUFFIX)


def _checkpoint_tensors(net: Network) -> list[tuple[str, Array]]:
    tensors: list[tuple[str, Array]] = []
    tensors += [(f"param/{k}", v) for k, v in net.parameters().items()]
    tensors += [(f"buffer/{k}", v) for k, v in net.buffers().items()]
    for name in net.parameters():
        if name in net.adam.m:
            tensors.append((f"adam_m/{name}", net.adam.m[name]))
            tensors.append((f"adam_v/{name}", net.adam.v[name]))
    return tensors


def save_checkpoint(net: Network, path: PathLike) -> tuple[Path, Path]:
    """Write a checkpoint manifest and float32 little-endian blob.

    The blob holds parameters, batch-norm running statistics and Adam moments;
    the manifest lists every tensor's name, shape and byte offset plus the
    network config, Adam step, iteration and free-form metadata.

    Args:
        net: Network to save.
        path: Checkpoint name or path to either file.

    Returns:
        Manifest and blob paths.
    """
    manifest_path, blob_path = checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name, arr in _checkpoint_tensors(net):
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": net.config.to_dict(),
        "n_parameters": net.parameter_count(),
        "adam_step": net.adam.step,
        "iteration": net.iteration,
        "metadata": net.metadata,
        "total_bytes": offset,
        "tensors": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    blob_path.write_bytes(b"".join(chunks))
    logger.debug("Saved checkpoint %s (%d bytes)", manifest_path, offset)
    return manifest_path, blob_path


def load_checkpoint(path: PathLike, dtype: type = np.float32) -> Network:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: Checkpoint name or path to either file.
        dtype: Parameter dtype of the rebuilt network.

    Returns:
        Network with parameters, running statistics and Adam state restored.

    Raises:
        MissingFileError: If either file is missing.
        FormatError: If the manifest is malformed or lists unknown tensors.
        ConfigError: If the stored config has unknown fields.
        SizeMismatchError: If the blob length disagrees with the manifest.
    """
    manifest_path, blob_path = checkpoint_paths(path)
    if not manifest_path.is_file():
        raise MissingFileError(f"Checkpoint manifest not found: {manifest_path}")
    if not blob_path.is_file():
        raise MissingFileError(f"Checkpoint blob not found: {blob_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise FormatError(f"Checkpoint manifest {manifest_path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")

    config = NetworkConfig.from_dict(manifest.get("config"))
    net = Network(config, dtype=dtype)
    blob = blob_path.read_bytes()
    entries = manifest.get("tensors", [])
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * BLOB_DTYPE.itemsize
    if len(blob) != expected or manifest.get("total_bytes") != expected:
        raise SizeMismatchError(
            f"Checkpoint blob {blob_path} holds {len(blob)} bytes, manifest requires {expected}",
            expected=expected,
            actual=len(blob),
        )

    params = net.parameters()
    buffers = net.buffers()
    for entry in entries:
        kind, _, name = str(entry["name"]).partition("/")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=start).reshape(shape)
        if kind == "param" and name in params:
            target = params[name]
        elif kind == "buffer" and name in buffers:
            target = buffers[name]
        elif kind in ("adam_m", "adam_v") and name in params:
            moments = net.adam.m if kind == "adam_m" else net.adam.v
            moments[name] = values.astype(dtype)
            continue
        else:
            raise FormatError(f"Checkpoint tensor {entry['name']!r} does not match the network")
        if target.shape != shape:
            raise ConfigError(
                f"Checkpoint tensor {name!r} has shape {shape}, expected {target.shape}"
            )
        target[...] = values

    stored = {e["name"].partition("/")[2] for e in entries if e["name"].startswith("param/")}
    if set(params) - stored:
        raise FormatError(f"Checkpoint {manifest_path} is missing parameters")
    if manifest.get("n_parameters") != net.parameter_count():
        raise FormatError(
            f"Checkpoint lists {manifest.get('n_parameters')} parameters, "
            f"config implies {net.parameter_count()}"
        )
    net.adam.step = int(manifest.get("adam_step", 0))
    net.iteration = int(manifest.get("iteration", 0))
    net.metadata = dict(manifest.get("metadata") or {})
    logger.debug("Loaded checkpoint %s", manifest_path)
    return net
