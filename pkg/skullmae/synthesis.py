"""
Deformable defect synthesis
Turns a healthy skull into a (defective skull, ground-truth defect) pair
using randomly sized patches, each warped by its own elastic field.

Seed derivation (all streams use a counter-based Philox generator):
    (seed, 0)       patch count
    (seed, 1, i)    geometry of patch i
    (seed, 2, i)    displacement field of patch i
    (seed, 3, a)    sub-seed of retry attempt a
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from skullmae import config
from skullmae.errors import (
    DimensionError, EmptyVolume, GeometryMismatch, NoEligibleCenters, SynthesisFailed,
    VolumeIoError,
)
from skullmae.schemas import CaseMetadata, PatchInfo, ShapeKind, SynthConfig
from skullmae.volume import VoxelGrid, bounding_box, foreground_count, intersect, subtract
from skullmae.volume_io import write_volume

STREAM_COUNT = 0
STREAM_PATCH = 1
STREAM_FIELD = 2
STREAM_RETRY = 3


def make_rng(*path: int) -> np.random.Generator:
    """Generator for a seed path, e.g. make_rng(case_seed, STREAM_PATCH, i)"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(p) for p in path])))


def derive_seed(*path: int) -> int:
    """Deterministic 64-bit child seed of a seed path"""
    return int(np.random.SeedSequence([int(p) for p in path]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel backward displacement in voxel units, shape dims + (3,)"""
    vectors: np.ndarray

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.vectors.shape[:3])

    def max_norm(self) -> float:
        return float(np.abs(self.vectors).max()) if self.vectors.size else 0.0


@dataclass
class Patch:
    """A masking patch and how it was drawn"""
    mask: VoxelGrid
    info: PatchInfo


@dataclass(eq=False)
class CasePair:
    """Training pair; defect_gt = skull minus defective, exactly"""
    defective: VoxelGrid
    defect_gt: VoxelGrid
    seed: int
    config_hash: str
    metadata: Optional[CaseMetadata] = None
    patches: List[Patch] = field(default_factory=list)

    @property
    def skull(self) -> VoxelGrid:
        return self.defective.with_data(self.defective.data | self.defect_gt.data)


# =============================================================================
# Patches
# =============================================================================

def _patch_mask(dims, kind: ShapeKind, center, half_extents) -> np.ndarray:
    x, y, z = np.ogrid[:dims[0], :dims[1], :dims[2]]
    dx = (x - center[0]) / half_extents[0]
    dy = (y - center[1]) / half_extents[1]
    dz = (z - center[2]) / half_extents[2]
    if kind is ShapeKind.CUBOID:
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0) & (np.abs(dz) <= 1.0)
    return (dx * dx + dy * dy + dz * dz) <= 1.0


def eligible_centers(skull: VoxelGrid, cfg: SynthConfig) -> np.ndarray:
    """(k, 3) foreground voxels at or above the z_min_frac height, x-fastest order"""
    box = bounding_box(skull)
    z_min = box.lo[2] + cfg.z_min_frac * box.extent[2]
    coords = np.argwhere(skull.data)
    # argwhere is C-ordered (z fastest); reorder to x-fastest for documented draws
    order = np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))
    coords = coords[order]
    return coords[coords[:, 2] >= z_min]


def _sample_patches(skull: VoxelGrid, cfg: SynthConfig, seed: int) -> List[Patch]:
    if not skull.data.any():
        raise EmptyVolume(f"cannot place patches on an empty skull ({skull.describe()})")

    centers = eligible_centers(skull, cfg)
    if len(centers) == 0:
        raise NoEligibleCenters(
            f"no skull voxel at or above z_min_frac={cfg.z_min_frac} of the bounding box"
        )
    extent = np.asarray(bounding_box(skull).extent, dtype=np.float64)

    count = int(make_rng(seed, STREAM_COUNT).integers(cfg.patch_count_min, cfg.patch_count_max + 1))
    patches = []
    for i in range(count):
        rng = make_rng(seed, STREAM_PATCH, i)
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        center = centers[int(rng.integers(len(centers)))]
        half = rng.uniform(cfg.size_frac_min, cfg.size_frac_max, size=3) * extent
        info = PatchInfo(
            index=i,
            kind=kind,
            center=tuple(int(c) for c in center),
            half_extents=tuple(float(h) for h in half),
            field_seed=derive_seed(seed, STREAM_FIELD, i) if cfg.deform_enabled else None,
        )
        mask = skull.with_data(_patch_mask(skull.dims, kind, info.center, info.half_extents))
        patches.append(Patch(mask=mask, info=info))
    return patches


def sample_patch_set(skull: VoxelGrid, cfg: SynthConfig, seed: int) -> List[VoxelGrid]:
    """
    Draw a random number of cuboid/ellipsoid patch masks.

    Args:
        skull: Healthy skull, nonempty
        cfg: Synthesis parameters
        seed: Case seed

    Returns:
        Patch masks with the skull's geometry, deterministic in (seed, cfg)
    """
    return [p.mask for p in _sample_patches(skull, cfg, seed)]


# =============================================================================
# Elastic deformation
# =============================================================================

def _control_count(n: int, spacing: int) -> int:
    if spacing >= n:
        return 1
    return int(math.ceil((n - 1) / spacing)) + 1


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Truncated Gaussian, radius ceil(3 sigma), normalized to sum 1"""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_normalized(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing, kernel renormalized where it leaves the grid"""
    if sigma <= 0:
        return values
    kernel = gaussian_kernel(sigma)
    out = values
    for axis in range(3):
        weights = ndimage.correlate1d(np.ones(values.shape[axis]), kernel, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = -1
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        out = out / weights.reshape(shape)
    return out


def _interpolate_lattice(lattice: np.ndarray, dims, spacing: int) -> np.ndarray:
    """Trilinear interpolation of a control lattice at voxel v -> lattice coordinate v / spacing"""
    axes = [np.minimum(np.arange(n, dtype=np.float64) / spacing, m - 1)
            for n, m in zip(dims, lattice.shape)]
    coords = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(lattice, coords, order=1, mode="nearest")


def random_displacement_field(dims: Sequence[int], cfg: SynthConfig, seed: int) -> DisplacementField:
    """
    Smooth random backward displacement field.

    Control vectors are uniform in [-max_disp, max_disp] on a lattice with
    control_spacing_vox spacing, trilinearly interpolated to full resolution
    and smoothed with a normalized truncated Gaussian.
    """
    if not cfg.deform_enabled:
        raise ValueError("random_displacement_field requires deform_enabled")
    dims = tuple(int(d) for d in dims)
    rng = make_rng(seed)
    lattice_shape = tuple(_control_count(n, cfg.control_spacing_vox) for n in dims)
    control = rng.uniform(-cfg.max_disp_vox, cfg.max_disp_vox, size=(3,) + lattice_shape)

    vectors = np.empty(dims + (3,), dtype=np.float64)
    for c in range(3):
        dense = _interpolate_lattice(control[c], dims, cfg.control_spacing_vox)
        vectors[..., c] = smooth_normalized(dense, cfg.smooth_sigma_vox)
    return DisplacementField(vectors)


def warp_mask(mask: VoxelGrid, displacement: DisplacementField) -> VoxelGrid:
    """
    Backward warp: output(v) = trilinear sample of mask at v + field(v) >= 0.5.

    Samples outside the grid read as background.
    """
    if displacement.dims != mask.dims:
        raise GeometryMismatch(f"field dims {displacement.dims} do not match mask dims {mask.dims}")
    grid = np.indices(mask.dims, dtype=np.float64)
    coords = grid + np.moveaxis(displacement.vectors, -1, 0)
    sampled = ndimage.map_coordinates(
        mask.data.astype(np.float64), coords, order=1, mode="grid-constant", cval=0.0
    )
    return mask.with_data(sampled >= config.WARP_THRESHOLD)


# =============================================================================
# Cases
# =============================================================================

def _attempt(skull: VoxelGrid, cfg: SynthConfig, seed: int) -> Tuple[VoxelGrid, List[Patch]]:
    patches = _sample_patches(skull, cfg, seed)
    union = np.zeros(skull.dims, dtype=bool)
    for patch in patches:
        mask = patch.mask
        if cfg.deform_enabled:
            displacement = random_displacement_field(skull.dims, cfg, patch.info.field_seed)
            mask = warp_mask(mask, displacement)
            patch.mask = mask
        union |= mask.data
    return intersect(skull.with_data(union), skull), patches


def synthesize_case(skull: VoxelGrid, cfg: SynthConfig, seed: int) -> CasePair:
    """
    Mask a healthy skull with warped patches.

    Attempt 0 uses the case seed; retries use derived sub-seeds until the
    defect is nonempty.

    Raises:
        SynthesisFailed: after MAX_SYNTHESIS_ATTEMPTS empty defects
    """
    if not skull.data.any():
        raise EmptyVolume(f"cannot synthesize a case from an empty skull ({skull.describe()})")

    config_hash = cfg.config_hash()
    for attempt in range(config.MAX_SYNTHESIS_ATTEMPTS):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, STREAM_RETRY, attempt)
        defect, patches = _attempt(skull, cfg, attempt_seed)
        if defect.data.any():
            defective = subtract(skull, defect)
            metadata = CaseMetadata(
                seed=seed,
                config_hash=config_hash,
                attempt=attempt,
                attempt_seed=attempt_seed,
                deform_enabled=cfg.deform_enabled,
                patches=[p.info for p in patches],
                defect_voxels=foreground_count(defect),
                defective_voxels=foreground_count(defective),
            )
            return CasePair(defective, defect, seed, config_hash, metadata, patches)

    raise SynthesisFailed(
        f"seed {seed}: {config.MAX_SYNTHESIS_ATTEMPTS} attempts produced empty defects; "
        f"patches never touch the skull under this config"
    )


def synthesize_cases(skulls: Sequence[VoxelGrid], cfg: SynthConfig, seeds: Sequence[int],
                     jobs: int = 1) -> List[CasePair]:
    """synthesize_case over (skull, seed) pairs; results keep input order"""
    if len(skulls) != len(seeds):
        raise DimensionError(f"{len(skulls)} skulls but {len(seeds)} seeds")
    if jobs <= 1:
        return [synthesize_case(s, cfg, seed) for s, seed in zip(skulls, seeds)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda args: synthesize_case(args[0], cfg, args[1]), zip(skulls, seeds)))


def write_case(pair: CasePair, out_dir: Path) -> List[Path]:
    """Write case_<seed>_defective.mha, case_<seed>_defect.mha and case_<seed>.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"case_{pair.seed}"
    defective_path = out_dir / f"{stem}_defective.mha"
    defect_path = out_dir / f"{stem}_defect.mha"
    meta_path = out_dir / f"{stem}.json"

    write_volume(pair.defective, defective_path)
    write_volume(pair.defect_gt, defect_path)
    try:
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump(pair.metadata.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise VolumeIoError(f"Cannot write case metadata {meta_path}: {e}")
    return [defective_path, defect_path, meta_path]
