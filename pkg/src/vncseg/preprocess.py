"""Image conditioning: smoothing, isotropic resampling, windowing, 2.5D slabs.

The pipeline order is fixed: smooth, then resample, then normalize.
"""

from __future__ import annotations

import logging
import math
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .config import PreprocessConfig
from .exceptions import ValidationError
from .volume import LabelVolume, Volume

logger = logging.getLogger("vncseg")

TRILINEAR = "trilinear"
NEAREST = "nearest"

__all__ = [
    "NEAREST",
    "PreprocessConfig",
    "TRILINEAR",
    "extract_slab",
    "gaussian_kernel",
    "gaussian_smooth",
    "normalize_intensity",
    "preprocess_image",
    "preprocess_labels",
    "resample",
    "resample_to",
    "slab_indices",
]


def gaussian_kernel(sigma_vox: float) -> NDArray[np.float64]:
    """Build a normalized 1D Gaussian kernel.

    Args:
        sigma_vox: Standard deviation in voxels. Zero gives the identity kernel.

    Returns:
        Kernel of length ``2 * ceil(3 * sigma_vox) + 1`` summing to 1.
    """
    if sigma_vox <= 0:
        return np.ones(1, dtype=np.float64)
    radius = int(math.ceil(3.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(volume: Volume, sigma_mm: float) -> Volume:
    """Smooth a volume with a separable Gaussian.

    Each axis uses ``sigma_mm / spacing`` voxels, truncated at ``ceil(3 sigma)``
    and renormalized. Borders replicate the edge voxel.

    Args:
        volume: Input volume.
        sigma_mm: Standard deviation in millimetres.

    Returns:
        Smoothed float32 volume on the same grid. ``sigma_mm == 0`` returns the
        input voxels unchanged.

    Raises:
        ValidationError: If ``sigma_mm`` is negative.
    """
    if not sigma_mm >= 0:
        raise ValidationError(f"sigma_mm must be >= 0, got {sigma_mm}")
    if sigma_mm == 0:
        return volume.with_data(volume.data.copy())

    out = volume.data.astype(np.float64)
    # data axes are (z, y, x); spacing is (sx, sy, sz)
    for axis, spacing in zip((2, 1, 0), volume.spacing_mm):
        kernel = gaussian_kernel(sigma_mm / spacing)
        if kernel.size > 1:
            out = ndimage.correlate1d(out, kernel, axis=axis, mode="nearest")
    return volume.with_data(out.astype(np.float32))


def _sample_grid(
    volume: Volume,
    out_shape: tuple[int, int, int],
    out_spacing: tuple[float, float, float],
    out_origin: tuple[float, float, float],
    mode: str,
) -> NDArray[Any]:
    if mode not in (TRILINEAR, NEAREST):
        raise ValidationError(f"mode must be {TRILINEAR!r} or {NEAREST!r}, got {mode!r}")
    # per-axis continuous index into the input, in (z, y, x) order
    axes = []
    for n_out, s_out, o_out, s_in, o_in in zip(
        out_shape,
        out_spacing[::-1],
        out_origin[::-1],
        volume.spacing_mm[::-1],
        volume.origin_mm[::-1],
    ):
        # ratio form keeps identity grids exact
        axes.append(np.arange(n_out, dtype=np.float64) * (s_out / s_in) + (o_out - o_in) / s_in)
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))

    if mode == NEAREST:
        limits = np.array(volume.data.shape, dtype=np.float64).reshape(3, 1, 1, 1) - 1
        index = np.clip(np.floor(coords + 0.5), 0, limits).astype(np.intp)
        return volume.data[index[0], index[1], index[2]]

    samples = ndimage.map_coordinates(
        volume.data.astype(np.float64), coords, order=1, mode="nearest", prefilter=False
    )
    return samples.astype(np.float32)


def resample(volume: Volume, target_spacing_mm: float, mode: str = TRILINEAR) -> Volume:
    """Resample to isotropic spacing.

    Output voxel ``i`` along an axis sits at ``origin + i * target``; the
    origin is kept. Samples beyond the input extent take the nearest edge voxel.

    Args:
        volume: Input volume.
        target_spacing_mm: Output spacing on every axis.
        mode: ``"trilinear"`` for intensities (float32 output) or ``"nearest"``
            for labels (input dtype kept).

    Returns:
        Resampled volume with dims ``max(1, floor(n * s / target + 0.5))`` per
        axis, so exact halves round up.

    Raises:
        ValidationError: If the target spacing is not positive or the mode is unknown.
    """
    if not target_spacing_mm > 0:
        raise ValidationError(f"target_spacing_mm must be > 0, got {target_spacing_mm}")
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing_mm
    t = float(target_spacing_mm)
    out_dims = tuple(
        max(1, math.floor(n * s / t + 0.5)) for n, s in ((nx, sx), (ny, sy), (nz, sz))
    )
    out_shape = (out_dims[2], out_dims[1], out_dims[0])
    data = _sample_grid(volume, out_shape, (t, t, t), volume.origin_mm, mode)
    result = Volume(data=data, spacing_mm=(t, t, t), origin_mm=volume.origin_mm)
    if isinstance(volume, LabelVolume) and mode == NEAREST:
        return LabelVolume(data=data, spacing_mm=(t, t, t), origin_mm=volume.origin_mm)
    return result


def resample_to(volume: Volume, reference: Volume, mode: str = NEAREST) -> Volume:
    """Resample a volume onto the exact grid of ``reference``.

    Args:
        volume: Volume to resample.
        reference: Volume whose dims, spacing and origin are adopted.
        mode: ``"trilinear"`` or ``"nearest"``.

    Returns:
        Volume (LabelVolume for labels in nearest mode) on the reference grid.
    """
    data = _sample_grid(
        volume, reference.data.shape, reference.spacing_mm, reference.origin_mm, mode
    )
    if isinstance(volume, LabelVolume) and mode == NEAREST:
        return LabelVolume.like(reference, data)
    return reference.with_data(data)


def normalize_intensity(volume: Volume, lo_hu: float, hi_hu: float) -> Volume:
    """Map an intensity window linearly onto ``[0, 1]``.

    Args:
        volume: Input volume.
        lo_hu: Intensity mapped to 0.
        hi_hu: Intensity mapped to 1.

    Returns:
        float32 volume with ``clamp((x - lo) / (hi - lo), 0, 1)``.

    Raises:
        ValidationError: If ``lo_hu >= hi_hu``.
    """
    if not lo_hu < hi_hu:
        raise ValidationError(f"Window lower bound {lo_hu} must be below upper bound {hi_hu}")
    scaled = (volume.data.astype(np.float64) - lo_hu) / (hi_hu - lo_hu)
    return volume.with_data(np.clip(scaled, 0.0, 1.0).astype(np.float32))


def slab_indices(nz: int, center_z: int, slab_depth: int) -> NDArray[np.intp]:
    """Axial slice indices of a slab, clamped to the volume.

    Args:
        nz: Number of axial slices.
        center_z: Center slice.
        slab_depth: Number of slices (odd).

    Returns:
        ``clamp(center_z - (depth - 1) / 2 + c, 0, nz - 1)`` for each channel ``c``.
    """
    half = (slab_depth - 1) // 2
    return np.clip(np.arange(slab_depth) + center_z - half, 0, nz - 1)


def extract_slab(volume: Volume, center_z: int, slab_depth: int) -> NDArray[np.float32]:
    """Stack adjacent axial slices as channels for 2.5D input.

    Args:
        volume: Preprocessed volume.
        center_z: Slice the network predicts.
        slab_depth: Odd number of slices.

    Returns:
        Array of shape ``(slab_depth, ny, nx)``.

    Raises:
        ValidationError: If ``center_z`` is outside the volume or the depth is not odd.

    Example:
        >>> extract_slab(vol, center_z=0, slab_depth=5).shape
        (5, 64, 64)
    """
    nz = volume.data.shape[0]
    if not 0 <= center_z < nz:
        raise ValidationError(f"center_z {center_z} outside [0, {nz - 1}]")
    if slab_depth < 1 or slab_depth % 2 == 0:
        raise ValidationError(f"slab_depth must be odd and >= 1, got {slab_depth}")
    return volume.data[slab_indices(nz, center_z, slab_depth)].astype(np.float32)


def preprocess_image(volume: Volume, cfg: PreprocessConfig) -> Volume:
    """Run smooth, resample and normalize on an intensity volume.

    Args:
        volume: Raw intensity volume in HU.
        cfg: Preprocessing parameters.

    Returns:
        float32 volume in ``[0, 1]`` at ``cfg.target_spacing_mm`` isotropic spacing.
    """
    smoothed = gaussian_smooth(volume, cfg.sigma_mm)
    resampled = resample(smoothed, cfg.target_spacing_mm, TRILINEAR)
    return normalize_intensity(resampled, cfg.window_lo_hu, cfg.window_hi_hu)


def preprocess_labels(labels: LabelVolume, cfg: PreprocessConfig) -> LabelVolume:
    """Resample a label volume to the preprocessing grid with nearest sampling."""
    resampled = resample(labels, cfg.target_spacing_mm, NEAREST)
    return LabelVolume(
        data=resampled.data, spacing_mm=resampled.spacing_mm, origin_mm=resampled.origin_mm
    )
