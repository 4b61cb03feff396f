"""Tests for connected components, largest-component filtering and argmax."""

from __future__ import annotations

from collections import deque

import numpy as np
import pytest

from vncseg.exceptions import GeometryError, ValidationError
from vncseg.postprocess import (
    argmax_labels,
    connected_components,
    largest_component_filter,
    structuring_element,
)
from vncseg.volume import LabelVolume, Volume


def _bfs_components(mask: np.ndarray, connectivity: int) -> tuple[np.ndarray, list[int]]:
    """Reference labelling: flood fill started from voxels in scan order."""
    offsets = [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) != (0, 0, 0)
        and (connectivity == 26 or abs(dz) + abs(dy) + abs(dx) == 1)
    ]
    labels = np.zeros(mask.shape, dtype=np.int32)
    sizes = []
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        current = len(sizes) + 1
        labels[start] = current
        queue = deque([start])
        size = 0
        while queue:
            z, y, x = queue.popleft()
            size += 1
            for dz, dy, dx in offsets:
                n = (z + dz, y + dy, x + dx)
                if all(0 <= n[i] < mask.shape[i] for i in range(3)) and mask[n] and not labels[n]:
                    labels[n] = current
                    queue.append(n)
        sizes.append(size)
    return labels, sizes


def _labels(data: np.ndarray) -> LabelVolume:
    return LabelVolume(data=data.astype(np.uint8), spacing_mm=(1.0, 1.0, 1.0))


class TestConnectedComponents:
    """Tests for connected_components."""

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_matches_flood_fill(self, connectivity: int) -> None:
        """Test labels and sizes of 200 random 12³ masks against a breadth-first flood fill."""
        rng = np.random.default_rng(connectivity)
        for trial in range(200):
            mask = rng.random((12, 12, 12)) < rng.uniform(0.05, 0.5)
            expected_labels, expected_sizes = _bfs_components(mask, connectivity)
            cc = connected_components(mask, connectivity)
            assert cc.sizes == expected_sizes, f"trial {trial}"
            np.testing.assert_array_equal(cc.labels, expected_labels)

    def test_diagonal_neighbours(self) -> None:
        """Test corner-touching voxels join only under 26-connectivity."""
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[0, 0, 0] = mask[1, 1, 1] = True
        assert connected_components(mask, 6).n_components == 2
        assert connected_components(mask, 26).n_components == 1

    def test_empty_mask(self) -> None:
        """Test a mask without foreground."""
        cc = connected_components(np.zeros((2, 2, 2), dtype=bool))
        assert cc.n_components == 0
        assert not cc.labels.any()

    def test_volume_input(self) -> None:
        """Test a Volume is accepted as a mask."""
        vol = Volume(data=np.ones((2, 3, 4), np.uint8), spacing_mm=(1.0, 1.0, 1.0))
        assert connected_components(vol).sizes == [24]

    def test_rejects(self) -> None:
        """Test unsupported connectivity and non-3D masks."""
        with pytest.raises(ValidationError):
            structuring_element(18)
        with pytest.raises(ValidationError):
            connected_components(np.ones((3, 3), dtype=bool))


class TestLargestComponentFilter:
    """Tests for largest_component_filter."""

    def test_removes_distractor(self) -> None:
        """Test a small detached blob of a class becomes background."""
        data = np.zeros((10, 10, 10), np.uint8)
        data[1:5, 1:5, 1:5] = 2
        data[8, 8, 8] = 2
        data[7:9, 1:3, 1:3] = 5
        out = largest_component_filter(_labels(data))
        assert out.data[8, 8, 8] == 0
        assert int((out.data == 2).sum()) == 64
        assert int((out.data == 5).sum()) == 8

    def test_classes_are_independent(self) -> None:
        """Test touching structures of different classes are kept."""
        data = np.zeros((4, 4, 4), np.uint8)
        data[:, :, :2] = 1
        data[:, :, 2:] = 3
        out = largest_component_filter(_labels(data))
        np.testing.assert_array_equal(out.data, data)

    def test_tie_keeps_first_in_scan_order(self) -> None:
        """Test equal-size components resolve to the first one encountered."""
        data = np.zeros((1, 1, 7), np.uint8)
        data[0, 0, [1, 2, 4, 5]] = 4
        out = largest_component_filter(_labels(data))
        assert out.data[0, 0].tolist() == [0, 4, 4, 0, 0, 0, 0]

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_idempotent(self, connectivity: int) -> None:
        """Test a second pass changes nothing and every class is one component."""
        data = np.random.default_rng(2).integers(0, 8, size=(8, 8, 8))
        once = largest_component_filter(_labels(data), connectivity)
        twice = largest_component_filter(once, connectivity)
        assert once == twice
        for class_id in range(1, 8):
            mask = once.data == class_id
            if mask.any():
                assert connected_components(mask, connectivity).n_components == 1

    def test_connectivity_matters(self) -> None:
        """Test diagonal pieces survive only under 26-connectivity."""
        data = np.zeros((3, 3, 3), np.uint8)
        data[0, 0, 0] = data[1, 1, 1] = data[2, 2, 2] = 7
        assert int((largest_component_filter(_labels(data), 26).data == 7).sum()) == 3
        assert int((largest_component_filter(_labels(data), 6).data == 7).sum()) == 1


class TestArgmaxLabels:
    """Tests for argmax_labels."""

    def _probs(self, values: list[list[float]]) -> list[Volume]:
        arr = np.asarray(values, dtype=np.float32)
        return [
            Volume(data=arr[c].reshape(1, 1, -1), spacing_mm=(1.0, 1.0, 1.0))
            for c in range(arr.shape[0])
        ]

    def test_picks_maximum(self) -> None:
        """Test the most probable class wins."""
        out = argmax_labels(self._probs([[0.7, 0.1, 0.2], [0.2, 0.8, 0.1], [0.1, 0.1, 0.7]]))
        assert out.data.ravel().tolist() == [0, 1, 2]
        assert isinstance(out, LabelVolume)

    def test_ties_go_to_lowest_class(self) -> None:
        """Test equal probabilities resolve to the lower class index."""
        out = argmax_labels(self._probs([[0.2, 0.5], [0.4, 0.5], [0.4, 0.0]]))
        assert out.data.ravel().tolist() == [1, 0]

    def test_rejects(self) -> None:
        """Test empty input, too many classes and mismatched grids."""
        with pytest.raises(ValidationError):
            argmax_labels([])
        with pytest.raises(ValidationError):
            argmax_labels(self._probs([[0.1]] * 9))
        a = Volume(data=np.zeros((1, 1, 2), np.float32), spacing_mm=(1.0, 1.0, 1.0))
        b = Volume(data=np.zeros((1, 1, 2), np.float32), spacing_mm=(2.0, 1.0, 1.0))
        with pytest.raises(GeometryError):
            argmax_labels([a, b])
