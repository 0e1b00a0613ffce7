"""
Geometric normalization of skulls and restoration of network outputs
"""

import json
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from skullmae.errors import DimensionError, FormatError, VolumeIoError
from skullmae.schemas import GeomTransform
from skullmae.volume import VoxelGrid, bounding_box


def _index_map(n_in: int, n_out: int) -> np.ndarray:
    """
    Nearest source index for each output voxel.

    The output center j maps to (j + 0.5) * n_in / n_out - 0.5 in input index
    space; half-up rounding of that is floor((2j + 1) * n_in / (2 * n_out)),
    computed in integers.
    """
    j = np.arange(n_out, dtype=np.int64)
    return np.minimum(((2 * j + 1) * n_in) // (2 * n_out), n_in - 1)


def _resample_data(data: np.ndarray, target_dims: Sequence[int]) -> np.ndarray:
    ix, iy, iz = (_index_map(n, t) for n, t in zip(data.shape, target_dims))
    return data[np.ix_(ix, iy, iz)]


def crop_to_content(g: VoxelGrid, margin_vox: int = 0) -> Tuple[VoxelGrid, GeomTransform]:
    """
    Crop to the foreground bounding box grown by margin_vox (clamped to the grid).

    Physical coordinates of retained voxels are unchanged.
    """
    if margin_vox < 0:
        raise ValueError(f"margin_vox must be >= 0, got {margin_vox}")
    box = bounding_box(g)
    lo = tuple(max(0, l - margin_vox) for l in box.lo)
    hi = tuple(min(d - 1, h + margin_vox) for d, h in zip(g.dims, box.hi))
    data = g.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    origin = tuple(o + l * s for o, l, s in zip(g.origin, lo, g.spacing))
    cropped = VoxelGrid(data, g.spacing, origin)

    transform = GeomTransform(
        crop_lo=lo,
        original_dims=g.dims,
        cropped_dims=cropped.dims,
        scale=(1.0, 1.0, 1.0),
        target_dims=cropped.dims,
        original_spacing=g.spacing,
        original_origin=g.origin,
    )
    return cropped, transform


def _resampled_geometry(g: VoxelGrid, target_dims: Sequence[int]):
    # Physical extent and its outer edge stay fixed
    spacing = tuple(s * n / t for s, n, t in zip(g.spacing, g.dims, target_dims))
    origin = tuple(o - s / 2.0 + s2 / 2.0 for o, s, s2 in zip(g.origin, g.spacing, spacing))
    return spacing, origin


def resample_nearest(g: VoxelGrid, target_dims: Sequence[int]) -> Tuple[VoxelGrid, GeomTransform]:
    """Nearest-neighbour resampling to target_dims, preserving physical extent"""
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or any(t <= 0 for t in target_dims):
        raise ValueError(f"target_dims must be three positive ints, got {target_dims}")

    if target_dims == g.dims:
        resampled = g
    else:
        spacing, origin = _resampled_geometry(g, target_dims)
        resampled = VoxelGrid(_resample_data(g.data, target_dims), spacing, origin)

    transform = GeomTransform(
        crop_lo=(0, 0, 0),
        original_dims=g.dims,
        cropped_dims=g.dims,
        scale=tuple(t / n for t, n in zip(target_dims, g.dims)),
        target_dims=target_dims,
        original_spacing=g.spacing,
        original_origin=g.origin,
    )
    return resampled, transform


def normalize(g: VoxelGrid, target_dims: Sequence[int], margin_vox: int = 0) -> Tuple[VoxelGrid, GeomTransform]:
    """Center and crop to the skull, then resample to target_dims"""
    cropped, crop_t = crop_to_content(g, margin_vox)
    resampled, resample_t = resample_nearest(cropped, target_dims)
    transform = crop_t.model_copy(update={
        "scale": resample_t.scale,
        "target_dims": resample_t.target_dims,
    })
    return resampled, transform


def restore(g: VoxelGrid, t: GeomTransform) -> VoxelGrid:
    """
    Invert a forward transform.

    Nearest-neighbour resample back to the cropped dims, then paste at
    crop_lo into an empty grid with the original geometry.
    """
    if g.dims != tuple(t.target_dims):
        raise DimensionError(f"restore expects dims {tuple(t.target_dims)}, got {g.dims}")

    cropped = g.data
    if tuple(t.cropped_dims) != g.dims:
        cropped = _resample_data(g.data, t.cropped_dims)

    out = np.zeros(tuple(t.original_dims), dtype=bool)
    lo = t.crop_lo
    cx, cy, cz = t.cropped_dims
    out[lo[0]:lo[0] + cx, lo[1]:lo[1] + cy, lo[2]:lo[2] + cz] = cropped
    return VoxelGrid(out, t.original_spacing, t.original_origin)


def save_transform(t: GeomTransform, path: Path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(t.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise VolumeIoError(f"Cannot write transform {path}: {e}")


def load_transform(path: Path) -> GeomTransform:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return GeomTransform.model_validate(data)
    except OSError as e:
        raise VolumeIoError(f"Cannot read transform {path}: {e}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"{path}: invalid transform: {e}")
