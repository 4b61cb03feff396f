"""Label decisions and largest-connected-component cleanup."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
from numpy.typing import NDArray
from scipy import ndimage

from .exceptions import ValidationError
from .volume import N_CLASSES, LabelVolume, Volume

MaskLike = Union[NDArray[Any], Volume]


@dataclass(frozen=True)
class ComponentMap:
    """Connected-component labelling of a binary mask.

    Attributes:
        labels: Per-voxel component ID (0 outside the mask), indexed ``[z, y, x]``.
            IDs are dense in ``1..n_components`` and numbered in order of first
            encounter in x-fastest scan order.
        sizes: Voxel count of each component; ``sizes[i]`` belongs to ID ``i + 1``.
    """

    labels: NDArray[np.int32]
    sizes: list[int]

    @property
    def n_components(self) -> int:
        """Number of components."""
        return len(self.sizes)


def structuring_element(connectivity: int) -> NDArray[np.bool_]:
    """3x3x3 neighbourhood for 6- (faces) or 26- (faces, edges, corners) connectivity."""
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")


def _mask_array(mask: MaskLike) -> NDArray[np.bool_]:
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    if data.ndim != 3:
        raise ValidationError(f"Mask must be 3D, got shape {data.shape}")
    return data.astype(bool, copy=False)


def connected_components(mask: MaskLike, connectivity: int = 26) -> ComponentMap:
    """Label the connected components of a binary mask.

    Args:
        mask: Binary volume or ``[z, y, x]`` array.
        connectivity: 6 or 26.

    Returns:
        ComponentMap with scan-order IDs.

    Example:
        >>> cc = connected_components(mask, connectivity=26)
        >>> cc.n_components, cc.sizes
        (2, [10, 3])
    """
    data = _mask_array(mask)
    raw, n = ndimage.label(data, structure=structuring_element(connectivity))
    if n == 0:
        return ComponentMap(labels=np.zeros(data.shape, dtype=np.int32), sizes=[])

    flat = raw.ravel()
    ids, first_index = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first_index = ids[keep], first_index[keep]
    # renumber so that IDs follow first encounter in scan order
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[np.argsort(first_index, kind="stable")]] = np.arange(1, len(ids) + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=len(ids) + 1)[1:]
    return ComponentMap(labels=labels, sizes=[int(s) for s in sizes])


def largest_component_filter(labels: LabelVolume, connectivity: int = 26) -> LabelVolume:
    """Keep only the largest connected component of every structure.

    Classes are filtered independently; voxels outside a class's largest
    component become background. Equal-size components resolve to the one
    encountered first in scan order.

    Args:
        labels: Label volume.
        connectivity: 6 or 26.

    Returns:
        Filtered label volume on the same grid.
    """
    out = labels.data.copy()
    for class_id in range(1, N_CLASSES):
        mask = labels.data == class_id
        if not mask.any():
            continue
        cc = connected_components(mask, connectivity)
        if cc.n_components <= 1:
            continue
        largest = int(np.argmax(cc.sizes)) + 1
        out[mask & (cc.labels != largest)] = 0
    return LabelVolume.like(labels, out)


def argmax_labels(prob_volumes: Sequence[Volume]) -> LabelVolume:
    """Pick the most probable class per voxel.

    Ties resolve to the lowest class index.

    Args:
        prob_volumes: One probability volume per class, in class order.

    Returns:
        Label volume on the shared grid.

    Raises:
        ValidationError: If there are no volumes or more classes than labels allow.
        GeometryError: If the volumes do not share one geometry.
    """
    if not prob_volumes or len(prob_volumes) > N_CLASSES:
        raise ValidationError(
            f"argmax_labels needs between 1 and {N_CLASSES} probability volumes, "
            f"got {len(prob_volumes)}"
        )
    reference = prob_volumes[0]
    for index, vol in enumerate(prob_volumes[1:], start=1):
        reference.require_same_geometry(vol, f"probability maps 0 and {index}")
    stacked = np.stack([v.data for v in prob_volumes])
    return LabelVolume.like(reference, np.argmax(stacked, axis=0).astype(np.uint8))
