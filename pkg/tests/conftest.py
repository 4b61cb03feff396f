"""Pytest configuration and fixtures for vncseg tests."""

from __future__ import annotations

import os
from collections.abc import Generator
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from vncseg.config import NetworkConfig, PreprocessConfig, TrainConfig
from vncseg.phantom import PhantomSpec, generate_dataset
from vncseg.volume import LabelVolume, Volume


@pytest.fixture(autouse=True)
def reset_worker_pool() -> Generator[None, None, None]:
    """Reset the shared worker pool between tests."""
    import vncseg.parallel

    original_pool = vncseg.parallel._pool
    vncseg.parallel._pool = None
    yield
    if vncseg.parallel._pool is not None:
        vncseg.parallel._pool.close()
    vncseg.parallel._pool = original_pool


@pytest.fixture
def mock_env_threads() -> Generator[None, None, None]:
    """Set the worker count in the environment."""
    with patch.dict(os.environ, {"VNCSEG_THREADS": "3"}):
        yield


@pytest.fixture
def rng() -> np.random.Generator:
    """Provide a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_volume(rng: np.random.Generator) -> Volume:
    """Provide a small int16 volume with anisotropic spacing."""
    data = rng.integers(-1000, 1000, size=(4, 5, 6)).astype(np.int16)
    return Volume(data=data, spacing_mm=(0.5, 0.75, 2.0), origin_mm=(-3.0, 1.5, 10.0))


@pytest.fixture
def small_labels(small_volume: Volume, rng: np.random.Generator) -> LabelVolume:
    """Provide labels on the grid of ``small_volume``."""
    return LabelVolume.like(small_volume, rng.integers(0, 8, size=(4, 5, 6)))


@pytest.fixture
def tiny_network_config() -> NetworkConfig:
    """Provide a network small enough for gradient checks and quick training."""
    return NetworkConfig(base_channels=4, n_down=1, n_up=1, n_res_blocks=1)


@pytest.fixture
def fast_preprocess() -> PreprocessConfig:
    """Provide preprocessing that keeps phantom grids unchanged."""
    return PreprocessConfig(sigma_mm=0.0, target_spacing_mm=2.0)


@pytest.fixture
def fast_train_config() -> TrainConfig:
    """Provide a training config that finishes in a few seconds."""
    return TrainConfig(
        iterations=6,
        batch_size=2,
        decay_every=3,
        n_folds=2,
        seed=5,
        val_every=3,
        log_every=2,
    )


@pytest.fixture
def phantom_dataset(tmp_path: Path) -> Path:
    """Provide a directory holding four 32-voxel phantoms at 2 mm spacing."""
    data_dir = tmp_path / "data"
    generate_dataset(4, data_dir, base_seed=11, spec=PhantomSpec(size=32, spacing_mm=2.0))
    return data_dir
