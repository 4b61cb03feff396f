"""Paired-domain synthetic cardiac phantoms.

Each phantom is one label volume rendered twice: a contrast-enhanced
"CCTA-like" image with bright blood pool and a "VNC-like" image where blood
and myocardium are nearly iso-intense. Both images share the same label
object, so segmentations transfer between domains without registration.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Union

import numpy as np
from numpy.typing import NDArray

from .exceptions import FormatError, MissingFileError, ValidationError
from .postprocess import largest_component_filter
from .volume import N_CLASSES, LabelVolume, Volume, write_volume

logger = logging.getLogger("vncseg")

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "vncseg-dataset"
BORDER_MARGIN = 2

DEFAULT_CCTA_HU: dict[int, float] = {
    0: 40.0,
    1: 350.0,
    2: 350.0,
    3: 350.0,
    4: 350.0,
    5: 80.0,
    6: 350.0,
    7: 350.0,
}
DEFAULT_VNC_HU: dict[int, float] = {
    0: 30.0,
    1: 40.0,
    2: 40.0,
    3: 40.0,
    4: 40.0,
    5: 50.0,
    6: 40.0,
    7: 40.0,
}

PathLike = Union[str, Path]


@dataclass(frozen=True)
class PhantomSpec:
    """Phantom parameters.

    Attributes:
        size: Cube edge in voxels.
        spacing_mm: Isotropic voxel spacing.
        seed: Seed for pose, scale and both noise fields.
        noise_sd_hu: Standard deviation of the additive Gaussian noise.
        ccta_hu: Mean intensity per class in the contrast domain.
        vnc_hu: Mean intensity per class in the non-contrast domain.
    """

    size: int = 64
    spacing_mm: float = 0.8
    seed: int = 0
    noise_sd_hu: float = 20.0
    ccta_hu: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_CCTA_HU))
    vnc_hu: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_VNC_HU))

    def __post_init__(self) -> None:
        """Validate invariants."""
        if self.size < 32:
            raise ValidationError(f"Phantom size must be >= 32, got {self.size}")
        if not self.spacing_mm > 0:
            raise ValidationError(f"Phantom spacing must be > 0, got {self.spacing_mm}")
        if not self.noise_sd_hu >= 0:
            raise ValidationError(f"noise_sd_hu must be >= 0, got {self.noise_sd_hu}")
        for name in ("ccta_hu", "vnc_hu"):
            table = getattr(self, name)
            if sorted(int(k) for k in table) != list(range(N_CLASSES)):
                raise ValidationError(f"{name} needs an intensity for every class 0..7")

    def with_seed(self, seed: int) -> PhantomSpec:
        """Copy of this spec with another seed."""
        return PhantomSpec(
            size=self.size,
            spacing_mm=self.spacing_mm,
            seed=seed,
            noise_sd_hu=self.noise_sd_hu,
            ccta_hu=dict(self.ccta_hu),
            vnc_hu=dict(self.vnc_hu),
        )

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready mapping (without the seed)."""
        return {
            "size": self.size,
            "spacing_mm": self.spacing_mm,
            "noise_sd_hu": self.noise_sd_hu,
            "ccta_hu": {str(k): v for k, v in sorted(self.ccta_hu.items())},
            "vnc_hu": {str(k): v for k, v in sorted(self.vnc_hu.items())},
        }


class Phantom(NamedTuple):
    """Generated triple; ``labels`` is shared by both intensity volumes."""

    ccta: Volume
    vnc: Volume
    labels: LabelVolume


class _Grid:
    """Voxel-center coordinates in voxel units, indexed ``[z, y, x]``."""

    def __init__(self, size: int) -> None:
        axis = np.arange(size, dtype=np.float64)
        self.z, self.y, self.x = np.meshgrid(axis, axis, axis, indexing="ij", sparse=True)

    def ellipsoid(
        self, center: NDArray[np.float64], radii: NDArray[np.float64], angle: float
    ) -> NDArray[np.bool_]:
        """Ellipsoid rotated by ``angle`` about the z axis."""
        dx, dy, dz = self.x - center[0], self.y - center[1], self.z - center[2]
        cos, sin = np.cos(angle), np.sin(angle)
        u = cos * dx + sin * dy
        v = -sin * dx + cos * dy
        return bool_array((u / radii[0]) ** 2 + (v / radii[1]) ** 2 + (dz / radii[2]) ** 2 <= 1.0)

    def cylinder(
        self, center: NDArray[np.float64], radius: float, z_lo: float, z_hi: float
    ) -> NDArray[np.bool_]:
        """z-aligned cylinder between two axial positions."""
        disc = (self.x - center[0]) ** 2 + (self.y - center[1]) ** 2 <= radius**2
        slab = (self.z >= z_lo) & (self.z <= z_hi)
        return bool_array(disc & slab)


def bool_array(values: Any) -> NDArray[np.bool_]:
    """Broadcast-safe conversion to a dense boolean array."""
    return np.asarray(values, dtype=bool)


def _rasterize(size: int, rng: np.random.Generator) -> NDArray[np.uint8]:
    n = float(size)
    grid = _Grid(size)
    center = np.full(3, n / 2.0) + rng.uniform(-0.03, 0.03, size=3) * n
    scale = rng.uniform(0.92, 1.08)
    theta = rng.uniform(-0.25, 0.25)
    cos, sin = np.cos(theta), np.sin(theta)

    def place(offset: tuple[float, float, float]) -> NDArray[np.float64]:
        ox, oy, oz = (np.asarray(offset) * n * scale).tolist()
        return center + np.array([cos * ox - sin * oy, sin * ox + cos * oy, oz])

    def radii(r: tuple[float, float, float]) -> NDArray[np.float64]:
        return np.asarray(r) * n * scale * rng.uniform(0.95, 1.05)

    labels = np.zeros((size, size, size), dtype=np.uint8)

    def paint(mask: NDArray[np.bool_], class_id: int) -> None:
        labels[mask & (labels == 0)] = class_id

    # LV: cavity ellipsoid inside a myocardial shell
    lv_center = place((0.08, 0.02, -0.04))
    lv_outer = radii((0.16, 0.13, 0.19))
    wall = 0.045 * n * scale
    outer = grid.ellipsoid(lv_center, lv_outer, theta)
    inner = grid.ellipsoid(lv_center, lv_outer - wall, theta)
    labels[outer] = 5
    labels[inner] = 1

    # RV: ellipsoid hugging the LV with the LV's dilated hull cut out
    rv = grid.ellipsoid(place((-0.12, 0.04, -0.05)), radii((0.13, 0.13, 0.16)), theta)
    hull = grid.ellipsoid(lv_center, lv_outer + 0.02 * n * scale, theta)
    paint(rv & ~hull, 2)

    paint(grid.ellipsoid(place((0.09, 0.10, 0.22)), radii((0.10, 0.08, 0.08)), theta), 3)
    paint(grid.ellipsoid(place((-0.13, 0.08, 0.18)), radii((0.09, 0.09, 0.10)), theta), 4)

    aa_center = place((0.0, -0.06, 0.0))
    aa_radius = 0.055 * n * scale
    paint(grid.cylinder(aa_center, aa_radius, center[2] + 0.08 * n, center[2] + 0.34 * n), 6)
    pa_center = place((-0.10, -0.14, 0.0))
    pa_radius = 0.05 * n * scale
    paint(grid.cylinder(pa_center, pa_radius, center[2] + 0.05 * n, center[2] + 0.32 * n), 7)

    m = BORDER_MARGIN
    border = np.ones_like(labels, dtype=bool)
    border[m:-m, m:-m, m:-m] = False
    labels[border] = 0
    return labels


def _render(
    labels: NDArray[np.uint8], table: dict[int, float], noise_sd: float, rng: np.random.Generator
) -> NDArray[np.int16]:
    lookup = np.array([table[c] for c in range(N_CLASSES)], dtype=np.float64)
    image = lookup[labels]
    if noise_sd > 0:
        image = image + rng.normal(0.0, noise_sd, size=labels.shape)
    info = np.iinfo(np.int16)
    return np.clip(np.rint(image), info.min, info.max).astype(np.int16)


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Generate one paired-domain phantom.

    Seven structures are placed with seeded random pose and scale: an LV
    cavity inside an LV-myocardium shell, a crescent RV, two atrial
    ellipsoids and two vessel cylinders (AA, PA), in soft-tissue background.
    Painting follows a fixed precedence in which a structure never
    overwrites one painted before it. Every structure is reduced to its
    largest 26-connected component and kept at least two voxels from the
    border.

    Args:
        spec: Phantom parameters.

    Returns:
        ``Phantom(ccta, vnc, labels)`` with int16 images.

    Raises:
        ValidationError: If a structure ends up missing.

    Example:
        >>> ccta, vnc, labels = generate_phantom(PhantomSpec(seed=7))
        >>> ccta.dims
        (64, 64, 64)
    """
    geometry_seq, ccta_seq, vnc_seq = np.random.SeedSequence(spec.seed).spawn(3)
    spacing = (spec.spacing_mm, spec.spacing_mm, spec.spacing_mm)

    raw_labels = LabelVolume(
        data=_rasterize(spec.size, np.random.default_rng(geometry_seq)), spacing_mm=spacing
    )
    labels = largest_component_filter(raw_labels, connectivity=26)
    present = np.unique(labels.data)
    if len(present) != N_CLASSES:
        missing = sorted(set(range(N_CLASSES)) - {int(c) for c in present})
        raise ValidationError(f"Phantom seed {spec.seed} lost structures {missing}")

    ccta = labels.with_data(
        _render(labels.data, spec.ccta_hu, spec.noise_sd_hu, np.random.default_rng(ccta_seq))
    )
    vnc = labels.with_data(
        _render(labels.data, spec.vnc_hu, spec.noise_sd_hu, np.random.default_rng(vnc_seq))
    )
    return Phantom(ccta=ccta, vnc=vnc, labels=labels)


def case_id(index: int) -> str:
    """Identifier of the phantom at a dataset index."""
    return f"phantom_{index:03d}"


def generate_dataset(
    n: int, out_dir: PathLike, base_seed: int, spec: PhantomSpec | None = None
) -> dict[str, Any]:
    """Write ``n`` phantoms and a manifest.

    Phantom ``i`` uses seed ``base_seed + i``. Paths in the manifest are
    relative to ``out_dir``.

    Args:
        n: Number of phantoms.
        out_dir: Output directory.
        base_seed: Seed of the first phantom.
        spec: Template spec; its seed is ignored.

    Returns:
        The manifest written to ``out_dir/manifest.json``.

    Raises:
        ValidationError: If ``n < 1``.
    """
    if n < 1:
        raise ValidationError(f"Dataset size must be >= 1, got {n}")
    template = spec or PhantomSpec()
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)

    cases = []
    for index in range(n):
        seed = base_seed + index
        name = case_id(index)
        phantom = generate_phantom(template.with_seed(seed))
        entry = {"id": name, "seed": seed}
        for key, vol in (("ccta", phantom.ccta), ("vnc", phantom.vnc), ("labels", phantom.labels)):
            header, _ = write_volume(vol, target / f"{name}_{key}")
            entry[f"{key}_path"] = header.name
        cases.append(entry)
        logger.debug("Generated %s (seed %d)", name, seed)

    manifest = {
        "format": DATASET_FORMAT,
        "preprocessed": False,
        "base_seed": base_seed,
        "phantom": template.to_dict(),
        "cases": cases,
    }
    write_manifest(manifest, target)
    logger.info("Generated %d phantoms in %s", n, target)
    return manifest


def write_manifest(manifest: dict[str, Any], data_dir: PathLike) -> Path:
    """Write ``manifest.json`` into a dataset directory."""
    path = Path(data_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(data_dir: PathLike) -> dict[str, Any]:
    """Read and check a dataset manifest.

    Raises:
        MissingFileError: If the manifest does not exist.
        FormatError: If it is not a dataset manifest.
    """
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise MissingFileError(f"Dataset manifest not found: {path}", path=str(path))
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise FormatError(f"Dataset manifest {path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path} is not a {DATASET_FORMAT} manifest")
    ids = [case.get("id") for case in manifest.get("cases", [])]
    if len(set(ids)) != len(ids) or not ids:
        raise FormatError(f"Dataset manifest {path} needs unique, non-empty case IDs")
    return manifest
