"""Volume data model and the MVOL1 two-file on-disk format.

A volume is stored as a JSON header ``<name>.mvol.json`` next to a raw blob
``<name>.mvol.raw``. Voxels are packed little-endian with x varying fastest,
then y, then z. In memory, ``data`` is a C-ordered numpy array indexed
``[z, y, x]`` so that ``data.ravel()`` follows the on-disk order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Union

import numpy as np
from numpy.typing import NDArray

from .exceptions import FormatError, GeometryError, MissingFileError, SizeMismatchError

logger = logging.getLogger("vncseg")

MAGIC = "MVOL1"
HEADER_SUFFIX = ".mvol.json"
RAW_SUFFIX = ".mvol.raw"
N_CLASSES = 8
MAX_CLASS = N_CLASSES - 1

# Class order: 0=background, 1=LV cavity, 2=RV, 3=LA, 4=RA, 5=LV myocardium,
# 6=ascending aorta, 7=pulmonary artery trunk.
CLASS_NAMES: dict[int, str] = {
    0: "background",
    1: "LV-C",
    2: "RV",
    3: "LA",
    4: "RA",
    5: "LV-M",
    6: "AA",
    7: "PA",
}

DTYPES: dict[str, np.dtype[Any]] = {
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("u1"),
    "float32": np.dtype("<f4"),
}

PathLike = Union[str, Path]
Triple = tuple[float, float, float]


def _dtype_tag(dtype: np.dtype[Any]) -> str:
    for tag, disk_dtype in DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == disk_dtype:
            return tag
    raise FormatError(f"Unsupported voxel dtype {dtype}; expected one of {sorted(DTYPES)}")


def linear_index(dims: tuple[int, int, int], i: int, j: int, k: int) -> int:
    """Return the packed-file index of voxel ``(i, j, k)``.

    Args:
        dims: Voxel counts ``(nx, ny, nz)``.
        i: x index.
        j: y index.
        k: z index.

    Returns:
        ``i + nx * (j + ny * k)``.
    """
    nx, ny, _ = dims
    return i + nx * (j + ny * k)


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar grid with physical geometry.

    Attributes:
        data: Voxel array indexed ``[z, y, x]``.
        spacing_mm: Voxel spacing ``(sx, sy, sz)`` in millimetres.
        origin_mm: Physical position ``(ox, oy, oz)`` of voxel ``(0, 0, 0)``'s center.
    """

    data: NDArray[Any]
    spacing_mm: Triple
    origin_mm: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        """Validate geometry and normalize field types."""
        if self.data.ndim != 3:
            raise GeometryError(f"Volume data must be 3D, got {self.data.ndim}D")
        if min(self.data.shape) < 1:
            raise GeometryError(f"Volume dims must be positive, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("spacing_mm and origin_mm need three components")
        if any(not s > 0 for s in spacing):
            raise GeometryError(f"Spacing must be positive, got {spacing}")
        _dtype_tag(self.data.dtype)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        object.__setattr__(self, "data", np.ascontiguousarray(self.data))

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def dtype_tag(self) -> str:
        """On-disk dtype name."""
        return _dtype_tag(self.data.dtype)

    @property
    def voxel_volume_ml(self) -> float:
        """Volume of a single voxel in millilitres."""
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz / 1000.0

    def value_at(self, i: int, j: int, k: int) -> Any:
        """Return the voxel at x index ``i``, y index ``j``, z index ``k``."""
        return self.data[k, j, i]

    def same_geometry(self, other: Volume) -> bool:
        """Check whether dims, spacing and origin match another volume."""
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.origin_mm == other.origin_mm
        )

    def require_same_geometry(self, other: Volume, what: str = "volumes") -> None:
        """Raise GeometryError unless ``other`` shares this volume's geometry."""
        if not self.same_geometry(other):
            raise GeometryError(
                f"Geometry mismatch between {what}: dims {self.dims} vs {other.dims}, "
                f"spacing {self.spacing_mm} vs {other.spacing_mm}, "
                f"origin {self.origin_mm} vs {other.origin_mm}"
            )

    def with_data(self, data: NDArray[Any]) -> Volume:
        """Return a plain Volume with new voxels and this geometry."""
        return Volume(data=data, spacing_mm=self.spacing_mm, origin_mm=self.origin_mm)

    def __eq__(self, other: object) -> bool:
        """Compare geometry, dtype and every voxel exactly."""
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.same_geometry(other)
            and self.data.dtype == other.data.dtype
            and bool(
                np.array_equal(self.data, other.data, equal_nan=self.data.dtype.kind == "f")
            )
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        """Return a short description without voxel data."""
        return (
            f"{type(self).__name__}(dims={self.dims}, spacing_mm={self.spacing_mm}, "
            f"origin_mm={self.origin_mm}, dtype={self.dtype_tag})"
        )


@dataclass(frozen=True, eq=False, repr=False)
class LabelVolume(Volume):
    """Class-ID volume over ``0..7`` stored as uint8."""

    def __post_init__(self) -> None:
        """Validate label range in addition to geometry."""
        object.__setattr__(self, "data", np.asarray(self.data))
        if self.data.dtype != np.uint8:
            if self.data.size and (self.data.min() < 0 or self.data.max() > MAX_CLASS):
                raise GeometryError(f"Label values must lie in 0..{MAX_CLASS}")
            object.__setattr__(self, "data", self.data.astype(np.uint8))
        super().__post_init__()
        if self.data.size and int(self.data.max()) > MAX_CLASS:
            raise GeometryError(
                f"Label value {int(self.data.max())} exceeds the largest class {MAX_CLASS}"
            )

    @classmethod
    def like(cls, reference: Volume, data: NDArray[Any]) -> LabelVolume:
        """Build a label volume on the grid of ``reference``."""
        return cls(data=data, spacing_mm=reference.spacing_mm, origin_mm=reference.origin_mm)

    def mask(self, class_id: int) -> NDArray[np.bool_]:
        """Binary mask of one class."""
        return self.data == class_id


def volume_paths(path: PathLike) -> tuple[Path, Path]:
    """Resolve a volume name or either of its files to ``(header, raw)`` paths.

    Args:
        path: ``<name>``, ``<name>.mvol.json`` or ``<name>.mvol.raw``.

    Returns:
        Header path and raw path.
    """
    text = str(path)
    for suffix in (HEADER_SUFFIX, RAW_SUFFIX):
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    return Path(text + HEADER_SUFFIX), Path(text + RAW_SUFFIX)


def _read_header(header_path: Path) -> dict[str, Any]:
    if not header_path.is_file():
        raise MissingFileError(f"Volume header not found: {header_path}", path=str(header_path))
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"Volume header {header_path} is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(f"Volume header {header_path} must be a JSON object")
    if header.get("magic") != MAGIC:
        raise FormatError(
            f"Magic mismatch in {header_path}: expected {MAGIC!r}, got {header.get('magic')!r}"
        )
    for key in ("dims", "spacing_mm", "origin_mm", "dtype"):
        if key not in header:
            raise FormatError(f"Volume header {header_path} is missing {key!r}")
    return header


def _header_numbers(
    header: dict[str, Any], key: str, header_path: Path, integral: bool
) -> list[Any]:
    """Decode a list of numbers from a header field without truncating or coercing."""
    values = header[key]
    kinds: tuple[type, ...] = (int,) if integral else (int, float)
    if not isinstance(values, list) or not all(
        isinstance(v, kinds) and not isinstance(v, bool) for v in values
    ):
        kind = "integers" if integral else "numbers"
        raise FormatError(
            f"Field {key!r} in {header_path} must be a list of {kind}, got {values!r}"
        )
    return [int(v) if integral else float(v) for v in values]


def read_volume(path: PathLike) -> Volume:
    """Read an MVOL1 volume.

    Args:
        path: Volume name or path to its header/raw file.

    Returns:
        The decoded Volume. uint8 volumes are returned as plain Volumes; use
        :func:`read_labels` for label maps.

    Raises:
        MissingFileError: If the header or raw file does not exist.
        FormatError: If the magic, dtype or header structure is wrong.
        GeometryError: If dims or spacing are non-positive.
        SizeMismatchError: If the raw blob length disagrees with the header.

    Example:
        >>> vol = read_volume("data/phantom_000_vnc")
        >>> vol.dims
        (64, 64, 64)
    """
    header_path, raw_path = volume_paths(path)
    header = _read_header(header_path)

    dims = _header_numbers(header, "dims", header_path, integral=True)
    spacing = _header_numbers(header, "spacing_mm", header_path, integral=False)
    origin = _header_numbers(header, "origin_mm", header_path, integral=False)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise GeometryError(f"Volume dims must be three positive integers, got {header['dims']}")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise GeometryError(f"Volume spacing must be positive, got {header['spacing_mm']}")
    if len(origin) != 3:
        raise GeometryError(f"Volume origin needs three components, got {header['origin_mm']}")
    tag = header["dtype"]
    if tag not in DTYPES:
        raise FormatError(f"Unknown dtype {tag!r} in {header_path}")
    disk_dtype = DTYPES[tag]

    if not raw_path.is_file():
        raise MissingFileError(f"Volume data not found: {raw_path}", path=str(raw_path))
    raw = raw_path.read_bytes()
    nx, ny, nz = dims
    expected = nx * ny * nz * disk_dtype.itemsize
    if len(raw) != expected:
        raise SizeMismatchError(
            f"Raw file {raw_path} holds {len(raw)} bytes, header requires {expected}",
            expected=expected,
            actual=len(raw),
        )

    data = np.frombuffer(raw, dtype=disk_dtype).astype(disk_dtype.newbyteorder("="))
    logger.debug("Read volume %s dims=%s dtype=%s", header_path, dims, tag)
    return Volume(
        data=data.reshape(nz, ny, nx),
        spacing_mm=(spacing[0], spacing[1], spacing[2]),
        origin_mm=(origin[0], origin[1], origin[2]),
    )


def read_labels(path: PathLike) -> LabelVolume:
    """Read a label volume and check its class range.

    Args:
        path: Volume name or path to its header/raw file.

    Returns:
        LabelVolume with uint8 class IDs.

    Raises:
        GeometryError: If any voxel exceeds the largest class ID.
    """
    vol = read_volume(path)
    return LabelVolume(data=vol.data, spacing_mm=vol.spacing_mm, origin_mm=vol.origin_mm)


def write_volume(volume: Volume, path: PathLike) -> tuple[Path, Path]:
    """Write a volume as an MVOL1 header + raw pair.

    Output bytes depend only on the volume, so identical inputs give
    byte-identical files.

    Args:
        volume: Volume to write.
        path: Volume name or path to its header/raw file.

    Returns:
        The header and raw paths that were written.

    Example:
        >>> write_volume(vol, "out/case_000")
        (PosixPath('out/case_000.mvol.json'), PosixPath('out/case_000.mvol.raw'))
    """
    header_path, raw_path = volume_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    tag = volume.dtype_tag
    header = {
        "magic": MAGIC,
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "origin_mm": list(volume.origin_mm),
        "dtype": tag,
    }
    header_path.write_text(json.dumps(header) + "\n", encoding="utf-8")
    raw_path.write_bytes(volume.data.astype(DTYPES[tag], copy=False).tobytes(order="C"))
    logger.debug("Wrote volume %s dims=%s dtype=%s", header_path, volume.dims, tag)
    return header_path, raw_path
