"""Tests for the volume model and MVOL1 I/O."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from vncseg.exceptions import FormatError, GeometryError, MissingFileError, SizeMismatchError
from vncseg.volume import (
    LabelVolume,
    Volume,
    linear_index,
    read_labels,
    read_volume,
    volume_paths,
    write_volume,
)


class TestVolume:
    """Tests for the Volume dataclass."""

    def test_dims_and_indexing(self, small_volume: Volume) -> None:
        """Test dims are (nx, ny, nz) and value_at takes (i, j, k)."""
        assert small_volume.dims == (6, 5, 4)
        assert small_volume.value_at(5, 1, 3) == small_volume.data[3, 1, 5]

    def test_linear_index_matches_ravel(self, small_volume: Volume) -> None:
        """Test the packed index follows x-fastest C order."""
        flat = small_volume.data.ravel()
        for i, j, k in [(0, 0, 0), (5, 0, 0), (0, 1, 0), (2, 3, 1), (5, 4, 3)]:
            assert flat[linear_index(small_volume.dims, i, j, k)] == small_volume.value_at(i, j, k)

    def test_voxel_volume(self, small_volume: Volume) -> None:
        """Test voxel volume in millilitres."""
        assert small_volume.voxel_volume_ml == pytest.approx(0.5 * 0.75 * 2.0 / 1000.0)

    @pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0)])
    def test_rejects_non_positive_spacing(self, spacing: tuple[float, float, float]) -> None:
        """Test spacing must be positive."""
        with pytest.raises(GeometryError):
            Volume(data=np.zeros((2, 2, 2), np.int16), spacing_mm=spacing)

    def test_rejects_non_3d(self) -> None:
        """Test data must be 3D."""
        with pytest.raises(GeometryError):
            Volume(data=np.zeros((2, 2), np.int16), spacing_mm=(1.0, 1.0, 1.0))

    def test_rejects_unsupported_dtype(self) -> None:
        """Test float64 voxels are not storable."""
        with pytest.raises(FormatError):
            Volume(data=np.zeros((2, 2, 2), np.float64), spacing_mm=(1.0, 1.0, 1.0))

    def test_geometry_mismatch(self, small_volume: Volume) -> None:
        """Test require_same_geometry detects a shifted origin."""
        shifted = Volume(small_volume.data, small_volume.spacing_mm, (0.0, 0.0, 0.0))
        assert not small_volume.same_geometry(shifted)
        with pytest.raises(GeometryError, match="origin"):
            small_volume.require_same_geometry(shifted)


class TestLabelVolume:
    """Tests for LabelVolume."""

    def test_converts_to_uint8(self) -> None:
        """Test integer labels are stored as uint8."""
        labels = LabelVolume(data=np.full((2, 2, 2), 7, np.int64), spacing_mm=(1.0, 1.0, 1.0))
        assert labels.data.dtype == np.uint8

    def test_rejects_out_of_range(self) -> None:
        """Test class IDs above 7 are rejected."""
        with pytest.raises(GeometryError):
            LabelVolume(data=np.full((2, 2, 2), 8, np.uint8), spacing_mm=(1.0, 1.0, 1.0))

    def test_mask(self, small_labels: LabelVolume) -> None:
        """Test binary class masks."""
        np.testing.assert_array_equal(small_labels.mask(3), small_labels.data == 3)


class TestVolumeIO:
    """Tests for write_volume and read_volume."""

    def test_header_layout(self, small_volume: Volume, tmp_path: Path) -> None:
        """Test the header fields and raw byte order."""
        header_path, raw_path = write_volume(small_volume, tmp_path / "case")
        header = json.loads(header_path.read_text())
        assert header == {
            "magic": "MVOL1",
            "dims": [6, 5, 4],
            "spacing_mm": [0.5, 0.75, 2.0],
            "origin_mm": [-3.0, 1.5, 10.0],
            "dtype": "int16",
        }
        raw = np.frombuffer(raw_path.read_bytes(), dtype="<i2")
        assert raw[linear_index(small_volume.dims, 1, 2, 3)] == small_volume.value_at(1, 2, 3)

    def test_random_round_trips(self, tmp_path: Path) -> None:
        """Test 1000 randomized volumes survive a round trip bit-exactly."""
        rng = np.random.default_rng(2024)
        for trial in range(1000):
            shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
            dtype = [np.int16, np.uint8, np.float32][trial % 3]
            if dtype == np.float32:
                data = rng.standard_normal(shape).astype(np.float32)
            else:
                info = np.iinfo(dtype)
                data = rng.integers(info.min, info.max, size=shape, endpoint=True).astype(dtype)
            spacing = tuple(float(s) for s in rng.uniform(0.1, 3.0, size=3))
            origin = tuple(float(o) for o in rng.uniform(-100, 100, size=3))
            vol = Volume(data=data, spacing_mm=spacing, origin_mm=origin)  # type: ignore[arg-type]
            _, raw_path = write_volume(vol, tmp_path / "v")
            assert read_volume(tmp_path / "v") == vol, f"trial {trial}"
            assert raw_path.read_bytes() == data.astype(data.dtype.newbyteorder("<")).tobytes()

    def test_nan_round_trip(self, tmp_path: Path) -> None:
        """Test float volumes holding NaN compare equal after a round trip."""
        data = np.array([[[1.0, np.nan], [np.inf, -0.5]]], dtype=np.float32)
        vol = Volume(data=data, spacing_mm=(1.0, 1.0, 1.0))
        write_volume(vol, tmp_path / "nan")
        assert read_volume(tmp_path / "nan") == vol
        assert vol != vol.with_data(np.zeros_like(data))

    def test_accepts_either_suffix(self, small_volume: Volume, tmp_path: Path) -> None:
        """Test volumes can be addressed by header, raw or bare name."""
        header_path, raw_path = write_volume(small_volume, tmp_path / "case.mvol.json")
        assert volume_paths(raw_path) == (header_path, raw_path)
        assert read_volume(raw_path) == small_volume

    def test_write_is_deterministic(self, small_volume: Volume, tmp_path: Path) -> None:
        """Test writing twice gives identical bytes."""
        a = write_volume(small_volume, tmp_path / "a")
        b = write_volume(small_volume, tmp_path / "b")
        assert a[0].read_bytes() == b[0].read_bytes()
        assert a[1].read_bytes() == b[1].read_bytes()

    def test_missing_header(self, tmp_path: Path) -> None:
        """Test a missing header is reported."""
        with pytest.raises(MissingFileError):
            read_volume(tmp_path / "nothing")

    def test_missing_raw(self, small_volume: Volume, tmp_path: Path) -> None:
        """Test a missing raw file is reported."""
        _, raw_path = write_volume(small_volume, tmp_path / "case")
        raw_path.unlink()
        with pytest.raises(MissingFileError):
            read_volume(tmp_path / "case")

    def test_truncated_raw(self, small_volume: Volume, tmp_path: Path) -> None:
        """Test a short raw blob is reported with both sizes."""
        _, raw_path = write_volume(small_volume, tmp_path / "case")
        raw_path.write_bytes(raw_path.read_bytes()[:-2])
        with pytest.raises(SizeMismatchError) as exc_info:
            read_volume(tmp_path / "case")
        assert exc_info.value.expected == 6 * 5 * 4 * 2
        assert exc_info.value.actual == 6 * 5 * 4 * 2 - 2

    @pytest.mark.parametrize(
        ("change", "error"),
        [
            ({"magic": "MVOL2"}, FormatError),
            ({"dtype": "float64"}, FormatError),
            ({"dims": [6, 0, 4]}, GeometryError),
            ({"spacing_mm": [0.5, 0.0, 2.0]}, GeometryError),
            ({"spacing_mm": ["a", 1, 1]}, FormatError),
            ({"spacing_mm": "1 1 1"}, FormatError),
            ({"dims": 5}, FormatError),
            ({"dims": [2.5, 5, 4]}, FormatError),
            ({"dims": [6, True, 4]}, FormatError),
            ({"origin_mm": None}, FormatError),
            ({"origin_mm": [0, {}, 0]}, FormatError),
        ],
    )
    def test_bad_header(
        self,
        small_volume: Volume,
        tmp_path: Path,
        change: dict[str, object],
        error: type[Exception],
    ) -> None:
        """Test header problems map to distinct errors."""
        header_path, _ = write_volume(small_volume, tmp_path / "case")
        header = json.loads(header_path.read_text())
        header.update(change)
        header_path.write_text(json.dumps(header))
        with pytest.raises(error):
            read_volume(tmp_path / "case")

    def test_invalid_json(self, small_volume: Volume, tmp_path: Path) -> None:
        """Test a corrupt header is a format error."""
        header_path, _ = write_volume(small_volume, tmp_path / "case")
        header_path.write_text("{not json")
        with pytest.raises(FormatError):
            read_volume(tmp_path / "case")

    def test_read_labels(self, small_labels: LabelVolume, tmp_path: Path) -> None:
        """Test labels round-trip as LabelVolume."""
        write_volume(small_labels, tmp_path / "labels")
        loaded = read_labels(tmp_path / "labels")
        assert isinstance(loaded, LabelVolume)
        np.testing.assert_array_equal(loaded.data, small_labels.data)

    def test_read_labels_rejects_large_values(self, tmp_path: Path) -> None:
        """Test label files with values above 7 are rejected."""
        write_volume(
            Volume(data=np.full((2, 2, 2), 9, np.uint8), spacing_mm=(1.0, 1.0, 1.0)),
            tmp_path / "bad",
        )
        with pytest.raises(GeometryError):
            read_labels(tmp_path / "bad")
