"""Configuration dataclasses and the experiment config file."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar, Union

from .exceptions import ConfigError, FormatError, MissingFileError, ValidationError

C = TypeVar("C")

DOMAINS = ("vnc", "ccta")
CONNECTIVITIES = (6, 26)


def _coerce(value: Any, annotation: str, name: str) -> Any:
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if annotation == "int":
        if isinstance(value, bool):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if annotation == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    return value


def from_mapping(cls: type[C], data: Any, section: str) -> C:
    """Build a flat config dataclass from a mapping, rejecting unknown keys.

    Args:
        cls: Dataclass type whose fields are scalars.
        data: Mapping of field names to values. Missing fields keep defaults.
        section: Name used in error messages.

    Returns:
        Instance of ``cls``.

    Raises:
        ConfigError: If ``data`` is not a mapping or has unknown keys.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"Config section {section!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in {section!r}: {', '.join(unknown)}")
    kwargs = {
        key: _coerce(value, str(known[key].type), f"{section}.{key}")
        for key, value in data.items()
    }
    return cls(**kwargs)


@dataclass(frozen=True)
class PreprocessConfig:
    """Image conditioning parameters.

    Attributes:
        sigma_mm: Gaussian smoothing sigma in millimetres (0 disables smoothing).
        target_spacing_mm: Isotropic spacing after resampling.
        window_lo_hu: Intensity mapped to 0.
        window_hi_hu: Intensity mapped to 1.
        slab_depth: Number of adjacent axial slices fed as channels (odd).
    """

    sigma_mm: float = 1.0
    target_spacing_mm: float = 0.8
    window_lo_hu: float = -400.0
    window_hi_hu: float = 600.0
    slab_depth: int = 5

    def __post_init__(self) -> None:
        """Validate invariants."""
        if not self.sigma_mm >= 0:
            raise ValidationError(f"sigma_mm must be >= 0, got {self.sigma_mm}")
        if not self.target_spacing_mm > 0:
            raise ValidationError(
                f"target_spacing_mm must be > 0, got {self.target_spacing_mm}"
            )
        if not self.window_lo_hu < self.window_hi_hu:
            raise ValidationError(
                f"window_lo_hu ({self.window_lo_hu}) must be < window_hi_hu ({self.window_hi_hu})"
            )
        if self.slab_depth < 1 or self.slab_depth % 2 == 0:
            raise ValidationError(f"slab_depth must be odd and >= 1, got {self.slab_depth}")

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Any) -> PreprocessConfig:
        """Build from a mapping, rejecting unknown keys."""
        return from_mapping(cls, data, "preprocess")


@dataclass(frozen=True)
class NetworkConfig:
    """Residual FCN architecture.

    Attributes:
        in_channels: Input channels (the slab depth).
        n_classes: Output classes including background.
        base_channels: Width of the stem; doubles at every downsampling layer.
        n_down: Stride-2 downsampling layers.
        n_up: Upsampling layers; must equal ``n_down``.
        n_res_blocks: Residual blocks at the bottleneck.
    """

    in_channels: int = 5
    n_classes: int = 8
    base_channels: int = 32
    n_down: int = 3
    n_up: int = 3
    n_res_blocks: int = 6

    def __post_init__(self) -> None:
        """Validate invariants."""
        for name in ("in_channels", "n_classes", "base_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_down < 0 or self.n_res_blocks < 0:
            raise ValidationError("n_down and n_res_blocks must be >= 0")
        if self.n_down != self.n_up:
            raise ValidationError(f"n_down ({self.n_down}) must equal n_up ({self.n_up})")

    @property
    def spatial_multiple(self) -> int:
        """Input height and width must be divisible by this."""
        return int(2**self.n_down)

    @property
    def bottleneck_channels(self) -> int:
        """Channel width of the residual blocks."""
        return self.base_channels * self.spatial_multiple

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Any) -> NetworkConfig:
        """Build from a mapping, rejecting unknown keys."""
        return from_mapping(cls, data, "network")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and cross-validation parameters.

    Attributes:
        iterations: Optimizer steps per model.
        batch_size: Slabs per mini-batch.
        lr0: Initial learning rate.
        decay_factor: Multiplier applied every ``decay_every`` iterations.
        decay_every: Learning-rate step length in iterations.
        n_folds: Outer cross-validation folds.
        seed: Seed for initialization, fold assignment and batch sampling.
        dice_eps: Smoothing term of the soft Dice quotient.
        val_fraction: Share of non-test IDs used for validation in each fold.
        val_every: Validation interval in iterations.
        log_every: Loss logging interval in iterations.
        checkpoint_every: Interval for resumable checkpoints (0 disables).
    """

    iterations: int = 10000
    batch_size: int = 32
    lr0: float = 0.001
    decay_factor: float = 0.3
    decay_every: int = 2000
    n_folds: int = 6
    seed: int = 0
    dice_eps: float = 1e-5
    val_fraction: float = 0.2
    val_every: int = 500
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        """Validate invariants."""
        for name in ("iterations", "batch_size", "decay_every", "n_folds", "val_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.lr0 > 0 and math.isfinite(self.lr0)):
            raise ValidationError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ValidationError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if not self.dice_eps > 0:
            raise ValidationError(f"dice_eps must be > 0, got {self.dice_eps}")
        if not 0 <= self.val_fraction < 1:
            raise ValidationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ValidationError("log_every must be >= 1 and checkpoint_every >= 0")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Any) -> TrainConfig:
        """Build from a mapping, rejecting unknown keys."""
        return from_mapping(cls, data, "train")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run.

    Example:
        >>> cfg = ExperimentConfig.load("experiment.json")
        >>> cfg.train.batch_size
        32
    """

    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    connectivity: int = 26
    data_dir: str = "data"
    out_dir: str = "runs"
    native_space_eval: bool = False
    train_domain: str = "vnc"
    test_domain: str = "vnc"

    def __post_init__(self) -> None:
        """Validate cross-section invariants."""
        if self.connectivity not in CONNECTIVITIES:
            raise ValidationError(f"connectivity must be 6 or 26, got {self.connectivity}")
        for name in ("train_domain", "test_domain"):
            if getattr(self, name) not in DOMAINS:
                raise ValidationError(
                    f"{name} must be one of {', '.join(DOMAINS)}, got {getattr(self, name)!r}"
                )
        if self.network.in_channels != self.preprocess.slab_depth:
            raise ValidationError(
                f"network.in_channels ({self.network.in_channels}) must equal "
                f"preprocess.slab_depth ({self.preprocess.slab_depth})"
            )

    def to_dict(self) -> dict[str, Any]:
        """Return a nested JSON-ready mapping."""
        return {
            "preprocess": self.preprocess.to_dict(),
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "connectivity": self.connectivity,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "native_space_eval": self.native_space_eval,
            "train_domain": self.train_domain,
            "test_domain": self.test_domain,
        }

    @classmethod
    def from_dict(cls, data: Any) -> ExperimentConfig:
        """Build from a nested mapping, rejecting unknown keys at every level."""
        if not isinstance(data, dict):
            raise ConfigError("Experiment config must be a JSON object")
        sections = {"preprocess": PreprocessConfig, "network": NetworkConfig, "train": TrainConfig}
        flat = {k: v for k, v in data.items() if k not in sections}
        base = from_mapping(_FlatExperiment, flat, "experiment")
        return cls(
            preprocess=PreprocessConfig.from_dict(data.get("preprocess", {})),
            network=NetworkConfig.from_dict(data.get("network", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            **dataclasses.asdict(base),
        )

    def replace(self, **changes: Any) -> ExperimentConfig:
        """Return a copy with top-level fields replaced."""
        return dataclasses.replace(self, **changes)

    def save(self, path: Union[str, Path]) -> Path:
        """Write the resolved config as pretty JSON.

        Args:
            path: Target file.

        Returns:
            The written path.
        """
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return target

    @classmethod
    def load(cls, path: Union[str, Path]) -> ExperimentConfig:
        """Read a config file.

        Args:
            path: JSON config file.

        Returns:
            Parsed and validated config.

        Raises:
            MissingFileError: If the file does not exist.
            FormatError: If the file is not valid JSON.
            ConfigError: If it has unknown keys.
        """
        source = Path(path)
        if not source.is_file():
            raise MissingFileError(f"Config file not found: {source}", path=str(source))
        try:
            data = json.loads(source.read_text(encoding="utf-8"))
        except ValueError as e:
            raise FormatError(f"Config file {source} is not valid JSON: {e}") from e
        return cls.from_dict(data)


@dataclass(frozen=True)
class _FlatExperiment:
    connectivity: int = 26
    data_dir: str = "data"
    out_dir: str = "runs"
    native_space_eval: bool = False
    train_domain: str = "vnc"
    test_domain: str = "vnc"
