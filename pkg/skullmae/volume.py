"""
Binary voxel grids with physical geometry
Arrays are indexed [x, y, z]; every serialized form is x-fastest.
"""

import hashlib
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from skullmae.errors import EmptyVolume, GeometryMismatch
from skullmae.schemas import BooleanKind

Triple = Tuple[int, int, int]
FloatTriple = Tuple[float, float, float]


@dataclass(frozen=True)
class BBox:
    """Inclusive voxel-index bounding box"""
    lo: Triple
    hi: Triple

    @property
    def extent(self) -> Triple:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """
    Immutable binary occupancy volume.

    data is a read-only bool array of shape dims; spacing is mm/voxel and
    origin is the physical position (mm) of voxel (0, 0, 0).
    """
    data: np.ndarray
    spacing: FloatTriple = (1.0, 1.0, 1.0)
    origin: FloatTriple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or any(d <= 0 for d in data.shape):
            raise ValueError(f"VoxelGrid needs a non-empty 3-D array, got shape {data.shape}")
        if data.dtype != np.bool_:
            data = data != 0
        else:
            data = data.copy()
        data.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise ValueError(f"origin must be three finite numbers, got {self.origin}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def from_array(cls, data: np.ndarray, like: "VoxelGrid" = None,
                   spacing: FloatTriple = None, origin: FloatTriple = None) -> "VoxelGrid":
        """Build a grid, copying geometry from `like` unless given explicitly"""
        if like is not None:
            spacing = spacing if spacing is not None else like.spacing
            origin = origin if origin is not None else like.origin
        return cls(data, spacing or (1.0, 1.0, 1.0), origin or (0.0, 0.0, 0.0))

    @classmethod
    def zeros(cls, dims: Triple, spacing: FloatTriple = (1.0, 1.0, 1.0),
              origin: FloatTriple = (0.0, 0.0, 0.0)) -> "VoxelGrid":
        return cls(np.zeros(tuple(dims), dtype=bool), spacing, origin)

    def empty_like(self) -> "VoxelGrid":
        return VoxelGrid.zeros(self.dims, self.spacing, self.origin)

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        """New grid with this geometry and the given occupancy"""
        if tuple(data.shape) != self.dims:
            raise ValueError(f"data shape {data.shape} does not match dims {self.dims}")
        return VoxelGrid(data, self.spacing, self.origin)

    @property
    def dims(self) -> Triple:
        return tuple(int(d) for d in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def same_geometry(self, other: "VoxelGrid") -> bool:
        # Exact comparison: grids in one pipeline share provenance
        return (self.dims == other.dims
                and self.spacing == other.spacing
                and self.origin == other.origin)

    def describe(self) -> str:
        return f"dims={self.dims} spacing={self.spacing} origin={self.origin}"

    def packed(self) -> bytes:
        """Packed bitset, x-fastest, little bit order"""
        return np.packbits(self.data.ravel(order="F"), bitorder="little").tobytes()

    def __repr__(self) -> str:
        return f"VoxelGrid({self.describe()}, foreground={foreground_count(self)})"


def check_geometry(a: VoxelGrid, b: VoxelGrid) -> None:
    """Raise GeometryMismatch unless dims, spacing and origin all match"""
    if not a.same_geometry(b):
        raise GeometryMismatch(f"grid geometries differ: [{a.describe()}] vs [{b.describe()}]")


def foreground_count(g: VoxelGrid) -> int:
    return int(np.count_nonzero(g.data))


def is_empty(g: VoxelGrid) -> bool:
    return not g.data.any()


def boolean_op(a: VoxelGrid, b: VoxelGrid, kind: Union[BooleanKind, str]) -> VoxelGrid:
    """
    Per-voxel OR / AND / AND-NOT.

    Args:
        a: Left grid, its geometry is copied to the result
        b: Right grid, must match a's geometry exactly
        kind: union, intersect or subtract

    Returns:
        New VoxelGrid
    """
    check_geometry(a, b)
    kind = BooleanKind(kind)
    if kind is BooleanKind.UNION:
        data = a.data | b.data
    elif kind is BooleanKind.INTERSECT:
        data = a.data & b.data
    else:
        data = a.data & ~b.data
    return a.with_data(data)


def union(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    return boolean_op(a, b, BooleanKind.UNION)


def intersect(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    return boolean_op(a, b, BooleanKind.INTERSECT)


def subtract(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    return boolean_op(a, b, BooleanKind.SUBTRACT)


def complement(g: VoxelGrid) -> VoxelGrid:
    return g.with_data(~g.data)


def bounding_box(g: VoxelGrid) -> BBox:
    """Tightest axis-aligned box containing all foreground voxels"""
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        occupied = np.flatnonzero(g.data.any(axis=other))
        if occupied.size == 0:
            raise EmptyVolume(f"bounding_box of an empty grid ({g.describe()})")
        lo.append(int(occupied[0]))
        hi.append(int(occupied[-1]))
    return BBox(tuple(lo), tuple(hi))


def volume_hash(g: VoxelGrid) -> str:
    """SHA-256 over dims and packed occupancy"""
    digest = hashlib.sha256()
    digest.update(np.asarray(g.dims, dtype="<i8").tobytes())
    digest.update(g.packed())
    return digest.hexdigest()

