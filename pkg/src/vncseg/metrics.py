"""Overlap, surface-distance and volume measurements with per-class reporting."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy import ndimage

from .exceptions import GeometryError, ValidationError
from .parallel import get_pool
from .volume import CLASS_NAMES, N_CLASSES, LabelVolume, Volume

MaskLike = Union[NDArray[Any], Volume]

FOREGROUND_CLASSES = tuple(range(1, N_CLASSES))
# Column order of the printed table: LV-C, LV-M, RV, LA, RA, AA, PA
TABLE_CLASSES = (1, 5, 2, 3, 4, 6, 7)

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _mask(mask: MaskLike) -> NDArray[np.bool_]:
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    return data.astype(bool, copy=False)


def _pair(a: MaskLike, b: MaskLike) -> tuple[NDArray[np.bool_], NDArray[np.bool_]]:
    if isinstance(a, Volume) and isinstance(b, Volume):
        a.require_same_geometry(b, "masks")
    ma, mb = _mask(a), _mask(b)
    if ma.shape != mb.shape:
        raise GeometryError(f"Mask shapes differ: {ma.shape} vs {mb.shape}")
    return ma, mb


def dice(a: MaskLike, b: MaskLike) -> float:
    """Dice similarity coefficient ``2|A∩B| / (|A| + |B|)``.

    Two empty masks score 1.0.

    Raises:
        GeometryError: If the masks differ in shape or geometry.
    """
    ma, mb = _pair(a, b)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def extract_surface(mask: MaskLike) -> NDArray[np.bool_]:
    """Foreground voxels with at least one face neighbour in the background.

    Voxels outside the volume count as background, so foreground on the
    volume border is always surface.

    Returns:
        Boolean surface mask indexed ``[z, y, x]``.
    """
    data = _mask(mask)
    eroded = ndimage.binary_erosion(data, structure=_FACE_NEIGHBOURS, border_value=0)
    return data & ~eroded


def surface_coordinates(mask: MaskLike) -> set[tuple[int, int, int]]:
    """Surface voxels of a mask as ``(x, y, z)`` index tuples."""
    zs, ys, xs = np.nonzero(extract_surface(mask))
    return {(int(x), int(y), int(z)) for x, y, z in zip(xs, ys, zs)}


def assd(
    a: MaskLike, b: MaskLike, spacing_mm: Sequence[float] | None = None
) -> Optional[float]:
    """Average symmetric surface distance between voxel centers, in mm.

    Args:
        a: First mask.
        b: Second mask.
        spacing_mm: Voxel spacing ``(sx, sy, sz)``. Defaults to the spacing of
            ``a`` when it is a Volume, else 1 mm.

    Returns:
        Mean of all nearest-surface distances in both directions, or None if
        either mask is empty.
    """
    ma, mb = _pair(a, b)
    if spacing_mm is None:
        spacing_mm = a.spacing_mm if isinstance(a, Volume) else (1.0, 1.0, 1.0)
    if not ma.any() or not mb.any():
        return None
    sampling = (float(spacing_mm[2]), float(spacing_mm[1]), float(spacing_mm[0]))
    surface_a = extract_surface(ma)
    surface_b = extract_surface(mb)
    # distance from every voxel to the nearest surface voxel of the other mask
    to_b = ndimage.distance_transform_edt(~surface_b, sampling=sampling)
    to_a = ndimage.distance_transform_edt(~surface_a, sampling=sampling)
    total = float(to_b[surface_a].sum()) + float(to_a[surface_b].sum())
    return total / (int(surface_a.sum()) + int(surface_b.sum()))


def structure_volumes(labels: LabelVolume) -> dict[int, float]:
    """Volume of every class in millilitres.

    Returns:
        Mapping class ID (0..7) to ``count * sx * sy * sz / 1000``.
    """
    counts = np.bincount(labels.data.ravel(), minlength=N_CLASSES)
    return {c: int(counts[c]) * labels.voxel_volume_ml for c in range(N_CLASSES)}


# =============================================================================
# Reports
# =============================================================================


@dataclass
class CaseReport:
    """Per-class measurements for one case.

    Attributes:
        case_id: Case identifier.
        dsc: Dice per foreground class.
        assd_mm: ASSD per foreground class, None where undefined.
        volume_ml: Predicted structure volumes.
        reference_volume_ml: Reference structure volumes.
    """

    case_id: str
    dsc: dict[int, float]
    assd_mm: dict[int, Optional[float]]
    volume_ml: dict[int, float]
    reference_volume_ml: dict[int, float] = field(default_factory=dict)

    def mean_dsc(self) -> float:
        """Mean foreground Dice."""
        return float(np.mean([self.dsc[c] for c in FOREGROUND_CLASSES]))

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready mapping keyed by class abbreviation."""
        return {
            "case_id": self.case_id,
            "dsc": {CLASS_NAMES[c]: v for c, v in self.dsc.items()},
            "assd_mm": {CLASS_NAMES[c]: v for c, v in self.assd_mm.items()},
            "volume_ml": {CLASS_NAMES[c]: v for c, v in self.volume_ml.items()},
            "reference_volume_ml": {
                CLASS_NAMES[c]: v for c, v in self.reference_volume_ml.items()
            },
            "volume_difference_ml": {
                CLASS_NAMES[c]: self.volume_ml[c] - self.reference_volume_ml[c]
                for c in self.reference_volume_ml
            },
        }


def evaluate_case(prediction: LabelVolume, reference: LabelVolume, case_id: str) -> CaseReport:
    """Compare a predicted label volume against its reference.

    Raises:
        GeometryError: If the label volumes do not share one grid.
    """
    prediction.require_same_geometry(reference, "prediction and reference")

    def measure(class_id: int) -> tuple[float, Optional[float]]:
        pred_mask = prediction.data == class_id
        ref_mask = reference.data == class_id
        return dice(pred_mask, ref_mask), assd(pred_mask, ref_mask, prediction.spacing_mm)

    results = get_pool().map(measure, FOREGROUND_CLASSES)
    pred_volumes = structure_volumes(prediction)
    ref_volumes = structure_volumes(reference)
    return CaseReport(
        case_id=case_id,
        dsc={c: r[0] for c, r in zip(FOREGROUND_CLASSES, results)},
        assd_mm={c: r[1] for c, r in zip(FOREGROUND_CLASSES, results)},
        volume_ml={c: pred_volumes[c] for c in FOREGROUND_CLASSES},
        reference_volume_ml={c: ref_volumes[c] for c in FOREGROUND_CLASSES},
    )


@dataclass
class EvaluationReport:
    """Aggregate of case reports: per-class mean and sample SD.

    Attributes:
        cases: Case reports sorted by case ID.
        summary: DataFrame indexed by metric (``dsc``, ``assd_mm``, ``volume_ml``)
            and class ID with columns ``mean``, ``sd``, ``n``.
    """

    cases: list[CaseReport]
    summary: pd.DataFrame

    @property
    def n_cases(self) -> int:
        """Number of aggregated cases."""
        return len(self.cases)

    def mean(self, metric: str, class_id: int) -> float:
        """Mean of a metric for one class (NaN if no defined values)."""
        return float(self.summary.loc[(metric, class_id), "mean"])

    def sd(self, metric: str, class_id: int) -> float:
        """Sample standard deviation (0 when fewer than two values)."""
        return float(self.summary.loc[(metric, class_id), "sd"])

    def count(self, metric: str, class_id: int) -> int:
        """Number of defined values that entered the aggregate."""
        return int(self.summary.loc[(metric, class_id), "n"])

    def mean_foreground(self, metric: str) -> float:
        """Mean over foreground classes of the per-class means."""
        values = [self.mean(metric, c) for c in FOREGROUND_CLASSES]
        defined = [v for v in values if not math.isnan(v)]
        return float(np.mean(defined)) if defined else math.nan

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready mapping."""
        classes: dict[str, Any] = {}
        for class_id in FOREGROUND_CLASSES:
            entry: dict[str, Any] = {}
            for metric in ("dsc", "assd_mm", "volume_ml"):
                n = self.count(metric, class_id)
                entry[metric] = {
                    "mean": _json_float(self.mean(metric, class_id)),
                    "sd": _json_float(self.sd(metric, class_id)),
                    "n": n,
                    "sd_defined": n > 1,
                }
            classes[CLASS_NAMES[class_id]] = entry
        return {
            "n_cases": self.n_cases,
            "mean_foreground_dsc": _json_float(self.mean_foreground("dsc")),
            "mean_foreground_assd_mm": _json_float(self.mean_foreground("assd_mm")),
            "classes": classes,
            "cases": [case.to_dict() for case in self.cases],
        }

    def to_table(self) -> str:
        """Aligned text table with classes as columns and DSC/ASSD/volume rows."""
        header = ["", *[CLASS_NAMES[c] for c in TABLE_CLASSES]]
        rows = [header]
        for label, metric, digits in (
            ("DSC", "dsc", 2),
            ("ASSD", "assd_mm", 2),
            ("Vol(mL)", "volume_ml", 1),
        ):
            row = [label]
            for class_id in TABLE_CLASSES:
                mean = self.mean(metric, class_id)
                if math.isnan(mean):
                    row.append("n/a")
                else:
                    row.append(f"{mean:.{digits}f} ± {self.sd(metric, class_id):.{digits}f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        return "\n".join(lines) + "\n"

    def save(self, json_path: Union[str, Path], table_path: Union[str, Path, None] = None) -> None:
        """Write the JSON report and, optionally, the text table."""
        target = Path(json_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        if table_path is not None:
            Path(table_path).write_text(self.to_table(), encoding="utf-8")


def _json_float(value: float) -> Optional[float]:
    return None if math.isnan(value) else value


def aggregate_report(cases: Sequence[CaseReport]) -> EvaluationReport:
    """Aggregate case reports into per-class mean and sample SD.

    Undefined ASSD values are excluded class by class; ``n`` records how many
    values entered each statistic. With a single value the SD is reported as 0
    and flagged through ``n == 1``.

    Raises:
        ValidationError: If no cases are given.
    """
    if not cases:
        raise ValidationError("aggregate_report needs at least one case")
    ordered = sorted(cases, key=lambda c: c.case_id)

    records = []
    for case in ordered:
        for class_id in FOREGROUND_CLASSES:
            records.append(
                {
                    "case_id": case.case_id,
                    "class_id": class_id,
                    "dsc": case.dsc[class_id],
                    "assd_mm": case.assd_mm[class_id],
                    "volume_ml": case.volume_ml[class_id],
                }
            )
    frame = pd.DataFrame.from_records(records)
    frame["assd_mm"] = pd.to_numeric(frame["assd_mm"], errors="coerce")

    summaries = []
    for metric in ("dsc", "assd_mm", "volume_ml"):
        grouped = frame.groupby("class_id")[metric]
        stats = pd.DataFrame(
            {"mean": grouped.mean(), "sd": grouped.std(ddof=1), "n": grouped.count()}
        )
        stats["sd"] = stats["sd"].where(stats["n"] > 1, 0.0)
        stats["metric"] = metric
        summaries.append(stats.reset_index())
    summary = pd.concat(summaries).set_index(["metric", "class_id"]).sort_index()
    return EvaluationReport(cases=list(ordered), summary=summary)
