"""
Configuration for Skull MAE Suite
All default settings in one place for easy tuning
"""

import json
from pathlib import Path
from typing import Any, Dict, Optional

# =============================================================================
# PATHS
# =============================================================================

PROJECT_ROOT = Path(__file__).parent.parent
DEFAULT_OUTPUT_DIR = PROJECT_ROOT / "runs"
EXAMPLE_CONFIG_FILE = PROJECT_ROOT / "experiment_config.json"

# =============================================================================
# VOLUME I/O
# =============================================================================

METAIMAGE_EXTENSION = ".mha"
RAW_PAYLOAD_EXTENSION = ".bin"
RAW_SIDECAR_EXTENSION = ".json"

VOLUME_EXTENSIONS = {METAIMAGE_EXTENSION, RAW_PAYLOAD_EXTENSION}

# Sidecar written next to preprocessed volumes
TRANSFORM_FILENAME = "preproc.json"

# =============================================================================
# SYNTHESIS
# =============================================================================

PATCH_COUNT_MIN = 1
PATCH_COUNT_MAX = 3

# Half-extent as a fraction of the skull bounding-box extent per axis
SIZE_FRAC_MIN = 0.10
SIZE_FRAC_MAX = 0.30

# Lowest allowed patch-center height (fraction of bbox z-extent).
# Keeps defects on the cranial vault instead of the face.
Z_MIN_FRAC = 0.4

CONTROL_SPACING_VOX = 8
MAX_DISP_VOX = 6.0
SMOOTH_SIGMA_VOX = 2.0

# Trilinear samples at or above this value become foreground after warping
WARP_THRESHOLD = 0.5

# Retries with derived sub-seeds until the defect is nonempty
MAX_SYNTHESIS_ATTEMPTS = 16

# =============================================================================
# PHANTOMS
# =============================================================================

PHANTOM_DIMS = (32, 32, 32)
AXIS_FRAC_MIN = 0.30
AXIS_FRAC_MAX = 0.45
THICKNESS_FRAC_MIN = 0.08
THICKNESS_FRAC_MAX = 0.15

# =============================================================================
# MODEL
# =============================================================================

LEVELS = 3
BASE_CHANNELS = 8
BLOCKS_PER_LEVEL = 1
KERNEL_SIZE = 3
NEGATIVE_SLOPE = 0.01

# "float64" keeps gradient checks sharp, "float32" is faster
DTYPE = "float64"

# =============================================================================
# OPTIMIZER
# =============================================================================

LEARNING_RATE = 0.001
WEIGHT_DECAY = 0.01
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
LR_GAMMA = 0.995

SOFT_DICE_EPS = 1e-5

# =============================================================================
# TRAINING
# =============================================================================

EPOCHS = 50
BATCH_SIZE = 1
BASE_SEED = 42
CHECKPOINT_EVERY = 10
THRESHOLD = 0.5
TRAIN_PHANTOMS = 200
HELD_OUT_PHANTOMS = 20

# Bounded queue between case synthesis and the optimization step
PREFETCH_QUEUE_SIZE = 2

TRAIN_LOG_FILENAME = "train_log.jsonl"
CHECKPOINT_MANIFEST_FILENAME = "checkpoint.json"
CHECKPOINT_PAYLOAD_FILENAME = "checkpoint.bin"

# Final checkpoint and periodic snapshots inside a run directory
FINAL_CHECKPOINT_DIRNAME = "checkpoint"
EPOCH_CHECKPOINTS_DIRNAME = "checkpoints"

# =============================================================================
# METRICS
# =============================================================================

BDSC_WIDTH_MM = 2.0
OPEN_RADIUS = 1
MIN_COMPONENT_VOX = 10

# Phantom shells at desk scale are 1-2 voxels thick; a radius-1 opening
# erases them, so experiment runs default to no opening.
EXPERIMENT_OPEN_RADIUS = 0

METRICS_FILENAME = "metrics.jsonl"
SUMMARY_FILENAME = "summary.csv"
ABLATION_FILENAME = "ablation.csv"

# =============================================================================
# GRADIENT CHECK
# =============================================================================

GRADCHECK_STEP = 1e-6
GRADCHECK_FLOAT32_STEP = 1e-2
GRADCHECK_OP_TOLERANCE = 1e-5
GRADCHECK_MODEL_TOLERANCE = 1e-4
GRADCHECK_FLOAT32_TOLERANCE = 1e-2
GRADCHECK_SAMPLES_PER_TENSOR = 4

# =============================================================================
# EXPERIMENT CONFIG FILES
# =============================================================================

CONFIG_SECTIONS = ("synth", "model", "optim", "data", "metrics")


def load_experiment_config(path: Optional[Path]) -> Dict[str, Any]:
    """
    Load a JSON experiment config.

    Args:
        path: JSON file with sections synth/model/optim/data/metrics and
              top-level training keys, or None for an empty config

    Returns:
        Raw dict, validated later by TrainConfig
    """
    if path is None:
        return {}

    from skullmae.errors import UsageError

    path = Path(path)
    if not path.exists():
        raise UsageError(f"Config file does not exist: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"Config file is not valid JSON: {path}: {e}")
    except OSError as e:
        raise UsageError(f"Cannot read config file {path}: {e}")

    if not isinstance(data, dict):
        raise UsageError(f"Config file must contain a JSON object: {path}")

    for section in CONFIG_SECTIONS:
        if section in data and not isinstance(data[section], dict):
            raise UsageError(f"Config section '{section}' must be an object in {path}")

    return data


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge flag overrides into a config dict (overrides win, None is ignored)"""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = merge_overrides(current if isinstance(current, dict) else {}, value)
        else:
            merged[key] = value
    return merged
