"""
Procedural skull phantoms: hollow ellipsoidal shells
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from skullmae.errors import DegenerateConfig, VolumeIoError
from skullmae.morphology import connected_components
from skullmae.schemas import DatasetManifest, PhantomConfig
from skullmae.synthesis import derive_seed, make_rng
from skullmae.volume import VoxelGrid
from skullmae.volume_io import write_volume

# Seed streams under the base seed
TRAIN_STREAM = 101
HELD_OUT_STREAM = 202
TEST_CASE_STREAM = 303

MANIFEST_FILENAME = "manifest.json"


@dataclass(frozen=True)
class PhantomShape:
    """Seeded shell parameters, radii and center in voxels"""
    radii: Tuple[float, float, float]
    center: Tuple[float, float, float]
    thickness: float
    thickness_applied: float

    @property
    def wall_voxels(self) -> float:
        """Widest wall, measured along the longest axis"""
        return self.thickness_applied * max(self.radii)


def sample_phantom_shape(cfg: PhantomConfig, seed: int) -> PhantomShape:
    rng = make_rng(seed)
    dims = np.asarray(cfg.dims, dtype=np.float64)
    fracs = rng.uniform(cfg.axis_frac_min, cfg.axis_frac_max, size=3)
    thickness = float(rng.uniform(cfg.thickness_frac_min, cfg.thickness_frac_max))
    radii = fracs * dims
    # At least one voxel of wall along the shortest axis
    applied = min(max(thickness, 1.0 / float(radii.min())), 1.0)
    return PhantomShape(
        radii=tuple(float(r) for r in radii),
        center=tuple(float(c) for c in (dims - 1.0) / 2.0),
        thickness=thickness,
        thickness_applied=applied,
    )


def generate_phantom(cfg: PhantomConfig, seed: int) -> VoxelGrid:
    """
    Hollow ellipsoidal shell: (1 - t)^2 <= sum(((v - c) / r)^2) <= 1.

    Raises:
        DegenerateConfig: the shell is empty or falls apart at these dims
    """
    shape = sample_phantom_shape(cfg, seed)
    x, y, z = np.ogrid[:cfg.dims[0], :cfg.dims[1], :cfg.dims[2]]
    q = (((x - shape.center[0]) / shape.radii[0]) ** 2
         + ((y - shape.center[1]) / shape.radii[1]) ** 2
         + ((z - shape.center[2]) / shape.radii[2]) ** 2)
    inner = (1.0 - shape.thickness_applied) ** 2
    shell = (q >= inner) & (q <= 1.0)

    phantom = VoxelGrid(shell, cfg.spacing_mm, (0.0, 0.0, 0.0))
    if not shell.any():
        raise DegenerateConfig(f"phantom seed {seed}: empty shell at dims {cfg.dims}")
    components = connected_components(phantom, 26).count
    if components != 1:
        raise DegenerateConfig(
            f"phantom seed {seed}: shell has {components} components at dims {cfg.dims}"
        )
    return phantom


def phantom_seed(base_seed: int, index: int, stream: int = TRAIN_STREAM) -> int:
    return derive_seed(base_seed, stream, index)


def generate_phantoms(cfg: PhantomConfig, count: int, base_seed: int,
                      stream: int = TRAIN_STREAM) -> List[VoxelGrid]:
    return [generate_phantom(cfg, phantom_seed(base_seed, i, stream)) for i in range(count)]


def write_phantom_dataset(out_dir: Path, phantoms: Sequence[VoxelGrid], cfg: PhantomConfig,
                          base_seed: int) -> DatasetManifest:
    """Materialize phantom_XXXX.mha files and manifest.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    count = len(phantoms)
    for i, phantom in enumerate(phantoms):
        name = f"phantom_{i:04d}.mha"
        write_volume(phantom, out_dir / name)
        names.append(name)

    manifest = DatasetManifest(kind="phantoms", count=count, base_seed=base_seed,
                               phantom=cfg, skulls=names)
    try:
        with open(out_dir / MANIFEST_FILENAME, "w", encoding="utf-8") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise VolumeIoError(f"Cannot write manifest in {out_dir}: {e}")
    print(f"[Phantoms] Wrote {count} phantoms to {out_dir}")
    return manifest
