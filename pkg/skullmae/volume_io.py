"""
Volume file I/O
MetaImage (.mha, MET_UCHAR, uncompressed) and raw .bin + .json sidecar pairs.
Both are little-endian, one byte per voxel, x-fastest.
"""

import json
import os
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import ValidationError

from skullmae import config
from skullmae.errors import DimensionError, FormatError, VolumeIoError
from skullmae.schemas import RawVolumeHeader
from skullmae.volume import VoxelGrid

PathLike = Union[str, Path]

# Header lines larger than this are not a MetaImage header
_MAX_HEADER_BYTES = 64 * 1024


def _format_floats(values) -> str:
    # repr() is the shortest string that round-trips a float64 exactly
    return " ".join(repr(float(v)) for v in values)


def _payload(g: VoxelGrid) -> bytes:
    return g.data.astype(np.uint8).tobytes(order="F")


def _grid_from_payload(payload: bytes, dims: Tuple[int, int, int], spacing, origin,
                       source: Path) -> VoxelGrid:
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise DimensionError(
            f"{source}: header dims {tuple(dims)} need {expected} bytes, payload has {len(payload)}"
        )
    values = np.frombuffer(payload, dtype=np.uint8).reshape(tuple(dims), order="F")
    try:
        # Masks are stored as 1 or 255 depending on the dataset
        return VoxelGrid(values != 0, spacing, origin)
    except ValueError as e:
        raise FormatError(f"{source}: {e}")


# =============================================================================
# MetaImage
# =============================================================================

def write_mha(g: VoxelGrid, path: PathLike) -> None:
    """Write the fixed MetaImage key set followed by the raw payload"""
    path = Path(path)
    header = "\n".join([
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        f"Offset = {_format_floats(g.origin)}",
        f"ElementSpacing = {_format_floats(g.spacing)}",
        f"DimSize = {' '.join(str(d) for d in g.dims)}",
        "ElementType = MET_UCHAR",
        "ElementDataFile = LOCAL",
    ]) + "\n"
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(_payload(g))
    except OSError as e:
        raise VolumeIoError(f"Cannot write volume {path}: {e}")


def _parse_header(raw: bytes, path: Path) -> Tuple[Dict[str, str], int]:
    """Parse `Key = Value` lines up to ElementDataFile; returns (fields, payload offset)"""
    fields: Dict[str, str] = {}
    offset = 0
    while True:
        newline = raw.find(b"\n", offset)
        if newline < 0 or newline > _MAX_HEADER_BYTES:
            raise FormatError(f"{path}: MetaImage header has no ElementDataFile line")
        line_bytes = raw[offset:newline]
        offset = newline + 1
        try:
            line = line_bytes.decode("ascii").strip()
        except UnicodeDecodeError:
            raise FormatError(f"{path}: MetaImage header is not ASCII")
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}: malformed MetaImage header line '{line[:60]}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"{path}: MetaImage header line without key")
        fields[key] = value
        if key == "ElementDataFile":
            return fields, offset


def _parse_numbers(fields: Dict[str, str], key: str, cast, default, path: Path):
    if key not in fields:
        if default is None:
            raise FormatError(f"{path}: MetaImage header lacks {key}")
        return default
    parts = fields[key].split()
    if len(parts) != 3:
        raise FormatError(f"{path}: {key} needs 3 values, got '{fields[key]}'")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise FormatError(f"{path}: {key} has non-numeric values '{fields[key]}'")


def read_mha(path: PathLike) -> VoxelGrid:
    """Read a MetaImage subset file (extra keys and any key order tolerated)"""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise VolumeIoError(f"Cannot read volume {path}: {e}")

    fields, offset = _parse_header(raw, path)

    if fields.get("ObjectType", "Image") != "Image":
        raise FormatError(f"{path}: ObjectType must be Image, got {fields['ObjectType']}")
    if fields.get("NDims") != "3":
        raise FormatError(f"{path}: NDims must be 3, got {fields.get('NDims')}")
    if fields.get("ElementType") != "MET_UCHAR":
        raise FormatError(f"{path}: ElementType must be MET_UCHAR, got {fields.get('ElementType')}")
    if fields.get("CompressedData", "False") != "False":
        raise FormatError(f"{path}: compressed MetaImage payloads are not supported")
    if fields.get("ElementDataFile") != "LOCAL":
        raise FormatError(f"{path}: only ElementDataFile = LOCAL is supported")

    dims = _parse_numbers(fields, "DimSize", int, None, path)
    if any(d <= 0 for d in dims):
        raise FormatError(f"{path}: DimSize must be positive, got {dims}")
    spacing = _parse_numbers(fields, "ElementSpacing", float, (1.0, 1.0, 1.0), path)
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise FormatError(f"{path}: ElementSpacing must be positive, got {spacing}")
    origin = _parse_numbers(fields, "Offset", float, (0.0, 0.0, 0.0), path)
    if any(not np.isfinite(o) for o in origin):
        raise FormatError(f"{path}: Offset must be finite, got {origin}")

    return _grid_from_payload(raw[offset:], dims, spacing, origin, path)


# =============================================================================
# Raw pair
# =============================================================================

def _raw_paths(path: Path) -> Tuple[Path, Path]:
    stem = path.with_suffix("")
    return (stem.with_suffix(config.RAW_PAYLOAD_EXTENSION),
            stem.with_suffix(config.RAW_SIDECAR_EXTENSION))


def write_raw(g: VoxelGrid, path: PathLike) -> None:
    payload_path, sidecar_path = _raw_paths(Path(path))
    header = RawVolumeHeader(dims=g.dims, spacing_mm=g.spacing, origin_mm=g.origin)
    try:
        with open(payload_path, "wb") as f:
            f.write(_payload(g))
        with open(sidecar_path, "w", encoding="utf-8") as f:
            json.dump(header.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise VolumeIoError(f"Cannot write volume {payload_path}: {e}")


def read_raw(path: PathLike) -> VoxelGrid:
    payload_path, sidecar_path = _raw_paths(Path(path))
    try:
        with open(sidecar_path, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        with open(payload_path, "rb") as f:
            payload = f.read()
    except json.JSONDecodeError as e:
        raise FormatError(f"{sidecar_path}: sidecar is not valid JSON: {e}")
    except OSError as e:
        raise VolumeIoError(f"Cannot read volume {payload_path}: {e}")

    try:
        header = RawVolumeHeader.model_validate(sidecar)
    except ValidationError as e:
        first = e.errors()[0]
        raise FormatError(f"{sidecar_path}: invalid sidecar field {first['loc']}: {first['msg']}")

    return _grid_from_payload(payload, header.dims, header.spacing_mm, header.origin_mm, payload_path)


# =============================================================================
# Dispatch
# =============================================================================

def read_volume(path: PathLike) -> VoxelGrid:
    """Read a volume, choosing the format from the file extension"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == config.METAIMAGE_EXTENSION:
        return read_mha(path)
    if suffix in (config.RAW_PAYLOAD_EXTENSION, config.RAW_SIDECAR_EXTENSION):
        return read_raw(path)
    raise FormatError(f"Unsupported volume extension '{path.suffix}': {path}")


def write_volume(g: VoxelGrid, path: PathLike) -> None:
    """Write a volume, choosing the format from the file extension"""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == config.METAIMAGE_EXTENSION:
        write_mha(g, path)
    elif suffix in (config.RAW_PAYLOAD_EXTENSION, config.RAW_SIDECAR_EXTENSION):
        write_raw(g, path)
    else:
        raise FormatError(f"Unsupported volume extension '{path.suffix}': {path}")


def find_volumes(directory: PathLike, traverse_subfolders: bool = False) -> List[Path]:
    """
    Single-pass discovery of volume files.

    Args:
        directory: Directory to search
        traverse_subfolders: If True, recursively search subdirectories

    Returns:
        Sorted list of .mha and .bin paths
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise VolumeIoError(f"Not a directory: {directory}")

    found = []
    if traverse_subfolders:
        for root, _dirs, files in os.walk(directory):
            for name in files:
                if os.path.splitext(name)[1].lower() in config.VOLUME_EXTENSIONS:
                    found.append(Path(root) / name)
    else:
        with os.scandir(directory) as entries:
            for entry in entries:
                if entry.is_file() and os.path.splitext(entry.name)[1].lower() in config.VOLUME_EXTENSIONS:
                    found.append(Path(entry.path))

    return sorted(found)
