"""
Binary morphology, boundary extraction and connected components
Structuring elements are Euclidean balls in voxel units; the grid border
is treated as background.
"""

from dataclasses import dataclass, field
from typing import Dict, Union

import numpy as np
from scipy import ndimage

from skullmae import config
from skullmae.distance import squared_edt
from skullmae.schemas import MorphOp
from skullmae.volume import VoxelGrid, check_geometry, subtract


@dataclass(frozen=True)
class StructuringElement:
    """Ball of integer radius: offset o is inside iff |o| <= radius"""
    radius_vox: int
    kind: str = "ball"

    def __post_init__(self):
        if self.kind != "ball":
            raise ValueError(f"Unknown structuring element kind: {self.kind}")
        if int(self.radius_vox) != self.radius_vox or self.radius_vox < 1:
            raise ValueError(f"radius_vox must be a positive integer, got {self.radius_vox}")

    def footprint(self) -> np.ndarray:
        r = self.radius_vox
        offsets = np.arange(-r, r + 1)
        x, y, z = np.meshgrid(offsets, offsets, offsets, indexing="ij")
        return (x * x + y * y + z * z) <= r * r


def ball(radius: int) -> StructuringElement:
    return StructuringElement(radius_vox=radius)


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Component labels 1..K (0 is background) with the source geometry"""
    labels: np.ndarray
    spacing: tuple
    origin: tuple
    component_sizes: Dict[int, int] = field(default_factory=dict)

    @property
    def dims(self):
        return tuple(int(d) for d in self.labels.shape)

    @property
    def count(self) -> int:
        return len(self.component_sizes)


# =============================================================================
# Dilation / erosion
# =============================================================================

def _dilate(data: np.ndarray, radius: int) -> np.ndarray:
    if not data.any():
        return data.copy()
    if radius == 1:
        return ndimage.binary_dilation(data, structure=ball(1).footprint())
    # {v : EDT(v) <= r}; squared voxel distances are exact integers
    return squared_edt(data) <= radius * radius


def _erode(data: np.ndarray, radius: int) -> np.ndarray:
    if radius == 1:
        return ndimage.binary_erosion(data, structure=ball(1).footprint(), border_value=0)
    # Pad with background so the outside counts as background within reach of the ball
    padded = np.pad(~data, radius, mode="constant", constant_values=True)
    far = squared_edt(padded) > radius * radius
    return far[radius:-radius, radius:-radius, radius:-radius]


def morph(g: VoxelGrid, op: Union[MorphOp, str], se: StructuringElement) -> VoxelGrid:
    """
    Apply a binary morphological operator.

    Args:
        g: Input grid
        op: dilate, erode, open (erode then dilate) or close (dilate then erode)
        se: Ball structuring element

    Returns:
        New VoxelGrid with g's geometry
    """
    op = MorphOp(op)
    r = se.radius_vox
    data = g.data
    if op is MorphOp.DILATE:
        out = _dilate(data, r)
    elif op is MorphOp.ERODE:
        out = _erode(data, r)
    elif op is MorphOp.OPEN:
        out = _dilate(_erode(data, r), r)
    else:
        out = _erode(_dilate(data, r), r)
    return g.with_data(out)


def dilate(g: VoxelGrid, radius: int) -> VoxelGrid:
    return morph(g, MorphOp.DILATE, ball(radius))


def erode(g: VoxelGrid, radius: int) -> VoxelGrid:
    return morph(g, MorphOp.ERODE, ball(radius))


def boundary(g: VoxelGrid) -> VoxelGrid:
    """Foreground voxels with at least one 6-connected background or outside neighbour"""
    return g.with_data(g.data & ~_erode(g.data, 1))


# =============================================================================
# Connected components
# =============================================================================

def connected_components(g: VoxelGrid, connectivity: int = 26) -> LabelGrid:
    """
    Label connected components.

    Labels are ordered by decreasing size; ties go to the component holding
    the smallest x-fastest linear index.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    raw, count = ndimage.label(g.data, structure=structure)

    if count == 0:
        return LabelGrid(np.zeros(g.dims, dtype=np.int32), g.spacing, g.origin, {})

    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    _, first = np.unique(flat, return_index=True)
    # np.unique sorts labels 0..count, entry 0 is background
    first = first[1:] if flat[first[0]] == 0 else first

    order = np.lexsort((first, -sizes))
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    labels = remap[raw]

    component_sizes = {int(i + 1): int(sizes[order[i]]) for i in range(count)}
    return LabelGrid(labels, g.spacing, g.origin, component_sizes)


def remove_small_components(g: VoxelGrid, min_vox: int, connectivity: int = 26) -> VoxelGrid:
    """Drop components smaller than min_vox voxels"""
    if min_vox <= 1 or not g.data.any():
        return g
    labeled = connected_components(g, connectivity)
    keep = [label for label, size in labeled.component_sizes.items() if size >= min_vox]
    return g.with_data(np.isin(labeled.labels, keep))


def extract_defect(
    reconstruction: VoxelGrid,
    defective_input: VoxelGrid,
    min_component_vox: int = config.MIN_COMPONENT_VOX,
    open_radius: int = config.OPEN_RADIUS,
) -> VoxelGrid:
    """
    Recover the defect from a full-skull reconstruction.

    Args:
        reconstruction: Network output, binarized
        defective_input: The defective skull fed to the network
        min_component_vox: 26-connected components below this size are dropped
        open_radius: Ball radius of the cleanup opening, 0 disables it

    Returns:
        Defect grid, a subset of reconstruction disjoint from defective_input
    """
    check_geometry(reconstruction, defective_input)
    diff = subtract(reconstruction, defective_input)
    if open_radius > 0:
        diff = morph(diff, MorphOp.OPEN, ball(open_radius))
    return remove_small_components(diff, min_component_vox, connectivity=26)
