"""
Tests for cropping, nearest-neighbour resampling and restoration
"""

import numpy as np
import pytest

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from skullmae.errors import DimensionError, EmptyVolume, FormatError
from skullmae.preprocess import (
    crop_to_content, load_transform, normalize, resample_nearest, restore, save_transform,
)
from skullmae.volume import VoxelGrid, bounding_box, foreground_count


def _mapped_index(j: int, n_in: int, n_out: int) -> int:
    # Half-up rounding of the mapped voxel center, clamped
    center = (j + 0.5) * n_in / n_out - 0.5
    return min(int(np.floor(center + 0.5)), n_in - 1)


class TestCrop:
    """Tests for crop_to_content"""

    def test_crop_to_bounding_box(self, box_grid):
        """Test crop keeps exactly the bounding box"""
        g = box_grid((10, 10, 10), (2, 3, 4), (5, 6, 7), spacing=(0.5, 1.0, 2.0))
        cropped, t = crop_to_content(g)

        assert cropped.dims == (4, 4, 4)
        assert cropped.data.all()
        assert t.crop_lo == (2, 3, 4)
        assert t.cropped_dims == (4, 4, 4)
        assert cropped.origin == (1.0, 3.0, 8.0)

    def test_margin_clamped_to_grid(self, box_grid):
        """Test the margin never leaves the grid"""
        g = box_grid((8, 8, 8), (0, 3, 6), (1, 4, 7))
        cropped, t = crop_to_content(g, margin_vox=2)

        assert t.crop_lo == (0, 1, 4)
        assert cropped.dims == (4, 6, 4)
        assert foreground_count(cropped) == foreground_count(g)

    def test_crop_is_idempotent(self, rng, random_grid):
        """Test cropping a cropped grid at margin 0 changes nothing"""
        for _ in range(30):
            dims = tuple(int(d) for d in rng.integers(1, 15, size=3))
            g = random_grid(rng, dims, float(rng.uniform(0.01, 0.3)),
                            spacing=(0.5, 1.25, 2.0), origin=(-3.0, 7.5, 0.25))
            if not g.data.any():
                continue
            once, _ = crop_to_content(g)
            twice, t = crop_to_content(once)

            assert twice.same_geometry(once)
            assert np.array_equal(twice.data, once.data)
            assert t.crop_lo == (0, 0, 0)

    def test_empty_grid(self):
        """Test cropping an empty grid fails"""
        with pytest.raises(EmptyVolume):
            crop_to_content(VoxelGrid.zeros((4, 4, 4)))

    def test_negative_margin(self, box_grid):
        """Test negative margins are rejected"""
        with pytest.raises(ValueError):
            crop_to_content(box_grid((4, 4, 4), (1, 1, 1), (2, 2, 2)), margin_vox=-1)


class TestResample:
    """Tests for resample_nearest"""

    def test_identity(self, rng, random_grid):
        """Test resampling to the same dims is the identity"""
        g = random_grid(rng, (6, 7, 8))
        resampled, t = resample_nearest(g, (6, 7, 8))

        assert np.array_equal(resampled.data, g.data)
        assert t.scale == (1.0, 1.0, 1.0)

    def test_per_voxel_oracle(self, rng, random_grid):
        """Test every output voxel equals the input at the rounded mapped index"""
        g = random_grid(rng, (16, 16, 16), 0.5)
        resampled, _ = resample_nearest(g, (11, 11, 11))

        for i in range(11):
            for j in range(11):
                for k in range(11):
                    src = (_mapped_index(i, 16, 11), _mapped_index(j, 16, 11), _mapped_index(k, 16, 11))
                    assert resampled.data[i, j, k] == g.data[src]

    def test_upsampling_oracle(self, rng, random_grid):
        """Test anisotropic up- and downsampling against the same oracle"""
        g = random_grid(rng, (5, 9, 4), 0.5)
        resampled, _ = resample_nearest(g, (12, 4, 9))

        for i in range(12):
            for j in range(4):
                for k in range(9):
                    src = (_mapped_index(i, 5, 12), _mapped_index(j, 9, 4), _mapped_index(k, 4, 9))
                    assert resampled.data[i, j, k] == g.data[src]

    def test_physical_extent_preserved(self, rng, random_grid):
        """Test dims * spacing and the outer edge stay fixed"""
        g = random_grid(rng, (16, 10, 7), spacing=(0.4, 1.0, 2.5), origin=(3.0, -1.0, 0.0))
        resampled, _ = resample_nearest(g, (11, 13, 4))

        for axis in range(3):
            before = g.dims[axis] * g.spacing[axis]
            after = resampled.dims[axis] * resampled.spacing[axis]
            assert abs(before - after) < 1e-9
            edge_before = g.origin[axis] - g.spacing[axis] / 2
            edge_after = resampled.origin[axis] - resampled.spacing[axis] / 2
            assert abs(edge_before - edge_after) < 1e-9

    def test_invalid_target(self, rng, random_grid):
        """Test target dims must be three positive ints"""
        g = random_grid(rng, (4, 4, 4))
        with pytest.raises(ValueError):
            resample_nearest(g, (4, 0, 4))


class TestNormalizeRestore:
    """Tests for normalize and restore"""

    def test_integer_scale_round_trip(self, box_grid):
        """Test restore inverts normalize when scales are integers"""
        g = box_grid((20, 20, 20), (3, 5, 7), (10, 12, 14), spacing=(0.5, 0.5, 0.5))
        normalized, t = normalize(g, (16, 16, 16))

        assert normalized.dims == (16, 16, 16)
        assert t.scale == (2.0, 2.0, 2.0)
        back = restore(normalized, t)
        assert back.same_geometry(g)
        assert np.array_equal(back.data, g.data)

    def test_restore_random_shape(self, rng):
        """Test restored voxels stay within the original bounding box"""
        data = np.zeros((24, 24, 24), dtype=bool)
        data[4:18, 6:20, 3:15] = rng.random((14, 14, 12)) < 0.6
        g = VoxelGrid(data)
        normalized, t = normalize(g, (8, 8, 8), margin_vox=1)
        back = restore(normalized, t)

        box = bounding_box(g)
        outside = back.data.copy()
        outside[box.slices()] = False
        assert back.dims == g.dims
        assert not outside.any()

    def test_restore_dims_check(self, box_grid):
        """Test restore rejects grids of the wrong size"""
        _, t = normalize(box_grid((8, 8, 8), (1, 1, 1), (4, 4, 4)), (4, 4, 4))
        with pytest.raises(DimensionError):
            restore(VoxelGrid.zeros((5, 4, 4)), t)

    def test_transform_file_round_trip(self, tmp_path, box_grid):
        """Test transforms persist as JSON"""
        _, t = normalize(box_grid((8, 8, 8), (1, 2, 3), (4, 5, 6)), (8, 8, 8), margin_vox=1)
        path = tmp_path / "case_preproc.json"
        save_transform(t, path)

        assert load_transform(path) == t

    def test_invalid_transform_file(self, tmp_path):
        """Test malformed transform files are format errors"""
        path = tmp_path / "bad.json"
        path.write_text('{"crop_lo": [0, 0]}')
        with pytest.raises(FormatError):
            load_transform(path)
