"""Tests for slice overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from vncseg.exceptions import GeometryError, ValidationError
from vncseg.overlay import encode_ppm, render_slice, window_to_gray, write_overlays
from vncseg.volume import LabelVolume, Volume


class TestRenderSlice:
    """Tests for window_to_gray and render_slice."""

    def test_window(self) -> None:
        """Test window edges, midpoint and clamping."""
        gray = window_to_gray(np.array([-1000.0, -400.0, 100.0, 600.0, 3000.0]), -400.0, 600.0)
        assert gray.tolist() == [0, 0, 128, 255, 255]
        with pytest.raises(ValidationError):
            window_to_gray(np.zeros(1), 5.0, 5.0)

    def test_background_is_gray(self) -> None:
        """Test unlabelled pixels repeat the gray value in every channel."""
        image = np.array([[-400.0, 100.0], [600.0, 0.0]])
        rgb = render_slice(image, np.zeros((2, 2), np.uint8), -400.0, 600.0)
        assert rgb.shape == (2, 2, 3)
        assert rgb.dtype == np.uint8
        np.testing.assert_array_equal(rgb[..., 0], rgb[..., 1])
        np.testing.assert_array_equal(rgb[..., 0], rgb[..., 2])
        assert rgb[0, 1].tolist() == [128, 128, 128]

    def test_blended_pixel(self) -> None:
        """Test a single labelled pixel is blended with its class color."""
        image = np.full((3, 3), -400.0)
        labels = np.zeros((3, 3), np.uint8)
        labels[1, 2] = 6
        rgb = render_slice(image, labels, -400.0, 600.0)
        assert rgb[1, 2].tolist() == [102, 0, 102]
        assert int((rgb != 0).any(axis=2).sum()) == 1

    def test_blend_on_white(self) -> None:
        """Test blending over a saturated pixel."""
        rgb = render_slice(np.full((1, 1), 600.0), np.ones((1, 1), np.uint8), -400.0, 600.0)
        assert rgb[0, 0].tolist() == [255, 153, 153]


class TestWriteOverlays:
    """Tests for encode_ppm and write_overlays."""

    def test_ppm_header(self) -> None:
        """Test the P6 header and pixel payload."""
        rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        encoded = encode_ppm(rgb)
        assert encoded.startswith(b"P6\n3 2\n255\n")
        assert encoded[len(b"P6\n3 2\n255\n") :] == rgb.tobytes()

    def test_one_file_per_slice(self, tmp_path: Path) -> None:
        """Test every axial slice is written in order."""
        image = Volume(data=np.zeros((3, 4, 5), np.int16), spacing_mm=(1.0, 1.0, 1.0))
        labels = LabelVolume.like(image, np.zeros((3, 4, 5), np.uint8))
        paths = write_overlays(image, labels, tmp_path / "overlays")
        assert [p.name for p in paths] == ["slice_0000.ppm", "slice_0001.ppm", "slice_0002.ppm"]
        content = paths[0].read_bytes()
        assert content.startswith(b"P6\n5 4\n255\n")
        assert len(content) == len(b"P6\n5 4\n255\n") + 4 * 5 * 3

    def test_geometry_mismatch(self, tmp_path: Path) -> None:
        """Test image and labels must share a grid."""
        image = Volume(data=np.zeros((3, 4, 5), np.int16), spacing_mm=(1.0, 1.0, 1.0))
        labels = LabelVolume(data=np.zeros((3, 4, 5), np.uint8), spacing_mm=(1.0, 1.0, 2.0))
        with pytest.raises(GeometryError):
            write_overlays(image, labels, tmp_path)
