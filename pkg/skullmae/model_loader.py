"""
Checkpoint storage and model loading
A checkpoint is a directory holding checkpoint.json (manifest) and
checkpoint.bin: every parameter in named_parameters() order, then the AdamW
exp_avg of each, then exp_avg_sq of each, all little-endian float64.
"""

import json
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch
from pydantic import ValidationError

from skullmae import config
from skullmae.errors import FormatError, VolumeIoError
from skullmae.network import build_model, build_optimizer, get_dtype
from skullmae.schemas import CheckpointManifest, OptimConfig, ParameterEntry

# Global state
_MODEL_CACHE: Dict[str, Any] = {}

_LE_FLOAT64 = np.dtype("<f8")


def _to_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float64).contiguous().numpy().astype(_LE_FLOAT64, copy=False).tobytes()


def _optimizer_step(optimizer: torch.optim.Optimizer) -> int:
    for state in optimizer.state.values():
        if "step" in state:
            return int(state["step"])
    return 0


def save_checkpoint(
    out_dir: Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    optim_cfg: OptimConfig,
    epoch: int,
    seed: int,
    config_hash: str,
) -> Path:
    """
    Write the manifest and payload into out_dir.

    Returns:
        Path to checkpoint.json
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())

    chunks = [_to_bytes(p) for _, p in named]
    for key in ("exp_avg", "exp_avg_sq"):
        for _, p in named:
            state = optimizer.state.get(p, {})
            chunks.append(_to_bytes(state[key]) if key in state else _to_bytes(torch.zeros_like(p)))
    payload = b"".join(chunks)

    manifest = CheckpointManifest(
        model=model.cfg,
        optim=optim_cfg,
        epoch=epoch,
        step=_optimizer_step(optimizer),
        seed=seed,
        config_hash=config_hash,
        parameters=[ParameterEntry(name=name, shape=list(p.shape)) for name, p in named],
        payload_bytes=len(payload),
    )

    manifest_path = out_dir / config.CHECKPOINT_MANIFEST_FILENAME
    try:
        with open(out_dir / manifest.payload_file, "wb") as f:
            f.write(payload)
        with open(manifest_path, "w", encoding="utf-8") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise VolumeIoError(f"Cannot write checkpoint in {out_dir}: {e}")
    return manifest_path


def read_manifest(checkpoint_dir: Path) -> CheckpointManifest:
    path = Path(checkpoint_dir)
    if path.is_dir():
        path = path / config.CHECKPOINT_MANIFEST_FILENAME
    try:
        with open(path, "r", encoding="utf-8") as f:
            return CheckpointManifest.model_validate(json.load(f))
    except OSError as e:
        raise VolumeIoError(f"Cannot read checkpoint manifest {path}: {e}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise FormatError(f"{path}: invalid checkpoint manifest: {e}")


def load_checkpoint(checkpoint_dir: Path, force_reload: bool = False) -> Dict[str, Any]:
    """
    Rebuild the model and optimizer state stored in a checkpoint.

    Args:
        checkpoint_dir: Directory holding checkpoint.json, or the manifest path itself
        force_reload: Bypass the in-process cache

    Returns:
        Dict with model, optimizer, manifest
    """
    checkpoint_dir = Path(checkpoint_dir)
    if checkpoint_dir.suffix == ".json":
        checkpoint_dir = checkpoint_dir.parent
    cache_key = str(checkpoint_dir.resolve())
    if not force_reload and cache_key in _MODEL_CACHE:
        print(f"[Model Loader] Using cached model")
        return _MODEL_CACHE[cache_key]

    start = time.time()
    manifest = read_manifest(checkpoint_dir)
    payload_path = checkpoint_dir / manifest.payload_file
    try:
        with open(payload_path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise VolumeIoError(f"Cannot read checkpoint payload {payload_path}: {e}")
    if len(payload) != manifest.payload_bytes:
        raise FormatError(
            f"{payload_path}: manifest declares {manifest.payload_bytes} bytes, payload has {len(payload)}"
        )

    model = build_model(manifest.model, manifest.seed)
    named = list(model.named_parameters())
    expected = [(e.name, tuple(e.shape)) for e in manifest.parameters]
    actual = [(name, tuple(p.shape)) for name, p in named]
    if expected != actual:
        raise FormatError(f"{checkpoint_dir}: parameter layout does not match the model config")

    values = np.frombuffer(payload, dtype=_LE_FLOAT64)
    total = sum(p.numel() for _, p in named)
    if values.size != 3 * total:
        raise FormatError(f"{payload_path}: expected {3 * total} float64 values, found {values.size}")

    dtype = get_dtype(manifest.model.dtype)

    def take(offset: int, like: torch.Tensor) -> torch.Tensor:
        chunk = values[offset:offset + like.numel()].reshape(tuple(like.shape))
        return torch.from_numpy(chunk.astype(np.float64)).to(dtype)

    offset = 0
    with torch.no_grad():
        for _, p in named:
            p.copy_(take(offset, p))
            offset += p.numel()

    optimizer = build_optimizer(model, manifest.optim)
    moments = {"exp_avg": [], "exp_avg_sq": []}
    for key in ("exp_avg", "exp_avg_sq"):
        for _, p in named:
            moments[key].append(take(offset, p))
            offset += p.numel()
    if manifest.step > 0:
        for i, (_, p) in enumerate(named):
            optimizer.state[p] = {
                "step": torch.tensor(float(manifest.step)),
                "exp_avg": moments["exp_avg"][i],
                "exp_avg_sq": moments["exp_avg_sq"][i],
            }

    model_info = {"model": model, "optimizer": optimizer, "manifest": manifest}
    _MODEL_CACHE[cache_key] = model_info
    print(f"[Model Loader] Loaded checkpoint {checkpoint_dir} "
          f"(epoch {manifest.epoch}, step {manifest.step}) in {time.time() - start:.2f}s")
    return model_info


def clear_cache(checkpoint_dir: Optional[Path] = None) -> None:
    if checkpoint_dir is None:
        _MODEL_CACHE.clear()
    else:
        _MODEL_CACHE.pop(str(Path(checkpoint_dir).resolve()), None)
