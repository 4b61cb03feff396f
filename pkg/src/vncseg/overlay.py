"""Per-slice label overlays written as binary PPM (P6) images."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import NDArray

from .exceptions import ValidationError
from .volume import LabelVolume, Volume

logger = logging.getLogger("vncseg")

ALPHA = 0.4

# RGB per foreground class
CLASS_COLORS: dict[int, tuple[int, int, int]] = {
    1: (255, 0, 0),  # LV-C
    2: (0, 0, 255),  # RV
    3: (255, 255, 0),  # LA
    4: (0, 255, 255),  # RA
    5: (0, 255, 0),  # LV-M
    6: (255, 0, 255),  # AA
    7: (255, 128, 0),  # PA
}


def _palette() -> NDArray[np.float64]:
    table = np.zeros((len(CLASS_COLORS) + 1, 3), dtype=np.float64)
    for class_id, color in CLASS_COLORS.items():
        table[class_id] = color
    return table


def window_to_gray(image: NDArray[np.floating], lo_hu: float, hi_hu: float) -> NDArray[np.uint8]:
    """Map intensities to 0..255 with ``round(clamp((v - lo) / (hi - lo), 0, 1) * 255)``."""
    if not lo_hu < hi_hu:
        raise ValidationError(f"Window needs lo < hi, got [{lo_hu}, {hi_hu}]")
    scaled = np.clip((image.astype(np.float64) - lo_hu) / (hi_hu - lo_hu), 0.0, 1.0)
    return np.rint(scaled * 255.0).astype(np.uint8)


def render_slice(
    image: NDArray[np.floating], labels: NDArray[np.integer], lo_hu: float, hi_hu: float
) -> NDArray[np.uint8]:
    """Blend one axial slice.

    Background pixels keep the windowed gray value in all three channels;
    labelled pixels become ``round((1 - ALPHA) * gray + ALPHA * color)``.

    Args:
        image: ``(ny, nx)`` intensities.
        labels: ``(ny, nx)`` class IDs.
        lo_hu: Window lower bound.
        hi_hu: Window upper bound.

    Returns:
        ``(ny, nx, 3)`` RGB image, rows along y and columns along x.
    """
    gray = window_to_gray(image, lo_hu, hi_hu)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    labelled = labels > 0
    if labelled.any():
        color = _palette()[labels[labelled]]
        blended = (1.0 - ALPHA) * gray[labelled][:, None].astype(np.float64) + ALPHA * color
        rgb[labelled] = np.rint(blended).astype(np.uint8)
    return rgb


def encode_ppm(rgb: NDArray[np.uint8]) -> bytes:
    """Encode an ``(h, w, 3)`` uint8 image as binary PPM."""
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def write_overlays(
    image: Volume,
    labels: LabelVolume,
    out_dir: Union[str, Path],
    lo_hu: float = -400.0,
    hi_hu: float = 600.0,
) -> list[Path]:
    """Write one overlay image per axial slice as ``slice_<z>.ppm``.

    Raises:
        GeometryError: If image and labels do not share a grid.
    """
    image.require_same_geometry(labels, "image and labels")
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in range(image.data.shape[0]):
        path = target / f"slice_{z:04d}.ppm"
        path.write_bytes(encode_ppm(render_slice(image.data[z], labels.data[z], lo_hu, hi_hu)))
        paths.append(path)
    logger.info("Wrote %d overlay slices to %s", len(paths), target)
    return paths
