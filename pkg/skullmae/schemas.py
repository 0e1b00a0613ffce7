"""
Pydantic schemas for configuration, reports and file sidecars
"""

import hashlib
import json
from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from skullmae import config

PositiveInt = Annotated[int, Field(gt=0)]
NonNegInt = Annotated[int, Field(ge=0)]
PositiveFloat = Annotated[float, Field(gt=0.0, allow_inf_nan=False)]
FiniteFloat = Annotated[float, Field(allow_inf_nan=False)]

Dims = Tuple[PositiveInt, PositiveInt, PositiveInt]
Index3 = Tuple[NonNegInt, NonNegInt, NonNegInt]
Spacing = Tuple[PositiveFloat, PositiveFloat, PositiveFloat]
Vector3 = Tuple[FiniteFloat, FiniteFloat, FiniteFloat]


def hash_model(model: BaseModel) -> str:
    """Short SHA-256 over the canonical JSON of a model"""
    canonical = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class ShapeKind(str, Enum):
    CUBOID = "cuboid"
    ELLIPSOID = "ellipsoid"


class BooleanKind(str, Enum):
    UNION = "union"
    INTERSECT = "intersect"
    SUBTRACT = "subtract"


class MorphOp(str, Enum):
    DILATE = "dilate"
    ERODE = "erode"
    OPEN = "open"
    CLOSE = "close"


class Subcommand(str, Enum):
    SYNTHESIZE = "synthesize"
    PREPROCESS = "preprocess"
    TRAIN = "train"
    INFER = "infer"
    EVALUATE = "evaluate"
    ABLATION = "ablation"
    GRADCHECK = "gradcheck"


# ============================================================================
# Experiment configuration
# ============================================================================

class SynthConfig(BaseModel):
    """Randomized defect parameters"""
    patch_count_min: int = Field(default=config.PATCH_COUNT_MIN, ge=1)
    patch_count_max: int = Field(default=config.PATCH_COUNT_MAX, ge=1)
    shape_kinds: List[ShapeKind] = Field(
        default_factory=lambda: [ShapeKind.CUBOID, ShapeKind.ELLIPSOID], min_length=1
    )
    size_frac_min: float = Field(default=config.SIZE_FRAC_MIN, gt=0.0, lt=1.0)
    size_frac_max: float = Field(default=config.SIZE_FRAC_MAX, gt=0.0, lt=1.0)
    z_min_frac: float = Field(default=config.Z_MIN_FRAC, ge=0.0, le=1.0)
    deform_enabled: bool = True
    control_spacing_vox: int = Field(default=config.CONTROL_SPACING_VOX, ge=2)
    max_disp_vox: float = Field(default=config.MAX_DISP_VOX, ge=0.0)
    smooth_sigma_vox: float = Field(default=config.SMOOTH_SIGMA_VOX, ge=0.0)

    @field_validator("shape_kinds")
    @classmethod
    def _unique_kinds(cls, kinds: List[ShapeKind]) -> List[ShapeKind]:
        if len(set(kinds)) != len(kinds):
            raise ValueError("shape_kinds must not repeat")
        return kinds

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        if self.patch_count_min > self.patch_count_max:
            raise ValueError("patch_count_min must be <= patch_count_max")
        if self.size_frac_min > self.size_frac_max:
            raise ValueError("size_frac_min must be <= size_frac_max")
        return self

    def config_hash(self) -> str:
        return hash_model(self)


class PhantomConfig(BaseModel):
    """Hollow ellipsoidal shell generator parameters"""
    dims: Dims = config.PHANTOM_DIMS
    axis_frac_min: float = Field(default=config.AXIS_FRAC_MIN, gt=0.0, lt=0.5)
    axis_frac_max: float = Field(default=config.AXIS_FRAC_MAX, gt=0.0, lt=0.5)
    thickness_frac_min: float = Field(default=config.THICKNESS_FRAC_MIN, gt=0.0, lt=1.0)
    thickness_frac_max: float = Field(default=config.THICKNESS_FRAC_MAX, gt=0.0, lt=1.0)
    spacing_mm: Spacing = (1.0, 1.0, 1.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "PhantomConfig":
        if self.axis_frac_min > self.axis_frac_max:
            raise ValueError("axis_frac_min must be <= axis_frac_max")
        if self.thickness_frac_min > self.thickness_frac_max:
            raise ValueError("thickness_frac_min must be <= thickness_frac_max")
        return self


class ModelConfig(BaseModel):
    """Residual encoder-decoder configuration"""
    levels: int = Field(default=config.LEVELS, ge=1)
    base_channels: int = Field(default=config.BASE_CHANNELS, ge=1)
    blocks_per_level: int = Field(default=config.BLOCKS_PER_LEVEL, ge=1)
    kernel_size: int = Field(default=config.KERNEL_SIZE, ge=1)
    negative_slope: float = Field(default=config.NEGATIVE_SLOPE, ge=0.0)
    in_channels: Literal[1] = 1
    out_channels: Literal[1] = 1
    dtype: Literal["float64", "float32"] = config.DTYPE

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return value

    @property
    def divisor(self) -> int:
        """Input spatial dims must be divisible by this"""
        return 2 ** (self.levels - 1)


class OptimConfig(BaseModel):
    """AdamW and exponential schedule hyperparameters"""
    lr: float = Field(default=config.LEARNING_RATE, gt=0.0)
    weight_decay: float = Field(default=config.WEIGHT_DECAY, ge=0.0)
    beta1: float = Field(default=config.BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(default=config.BETA2, ge=0.0, lt=1.0)
    eps: float = Field(default=config.ADAM_EPS, gt=0.0)
    gamma: float = Field(default=config.LR_GAMMA, gt=0.0, le=1.0)


class MetricsConfig(BaseModel):
    """Defect extraction and metric parameters"""
    bdsc_width_mm: float = Field(default=config.BDSC_WIDTH_MM, gt=0.0)
    open_radius: int = Field(default=config.EXPERIMENT_OPEN_RADIUS, ge=0)
    min_component_vox: int = Field(default=config.MIN_COMPONENT_VOX, ge=0)


class DataConfig(BaseModel):
    """Healthy skull source: a directory of volumes or procedural phantoms"""
    path: Optional[str] = None
    phantoms: int = Field(default=config.TRAIN_PHANTOMS, ge=1)
    held_out: int = Field(default=config.HELD_OUT_PHANTOMS, ge=1)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)


class TrainConfig(BaseModel):
    """Everything a training or ablation run depends on"""
    data: DataConfig = Field(default_factory=DataConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    epochs: int = Field(default=config.EPOCHS, ge=1)
    batch_size: int = Field(default=config.BATCH_SIZE, ge=1)
    seed: int = Field(default=config.BASE_SEED, ge=0)
    checkpoint_every: int = Field(default=config.CHECKPOINT_EVERY, ge=1)
    out_dir: str = str(config.DEFAULT_OUTPUT_DIR / "train")
    threshold: float = Field(default=config.THRESHOLD, gt=0.0, lt=1.0)
    deterministic: bool = True
    jobs: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_phantom_dims(self) -> "TrainConfig":
        # Loaded volumes are normalized to the same dims as phantoms
        divisor = self.model.divisor
        if any(d % divisor for d in self.data.phantom.dims):
            raise ValueError(
                f"phantom dims {self.data.phantom.dims} must be divisible by {divisor} "
                f"for a {self.model.levels}-level model"
            )
        return self

    def config_hash(self) -> str:
        """Hash of everything that affects results (output paths and job count excluded)"""
        return hash_model(self.model_copy(update={"out_dir": "", "jobs": 1}))


# ============================================================================
# Geometry and synthesis sidecars
# ============================================================================

class GeomTransform(BaseModel):
    """Forward normalization record, inverted by restore()"""
    crop_lo: Index3
    original_dims: Dims
    cropped_dims: Dims
    scale: Tuple[PositiveFloat, PositiveFloat, PositiveFloat]
    target_dims: Dims
    original_spacing: Spacing
    original_origin: Vector3


class RawVolumeHeader(BaseModel):
    """JSON sidecar of the raw .bin volume format"""
    dims: Dims
    spacing_mm: Spacing
    origin_mm: Vector3


class PatchInfo(BaseModel):
    """One masking patch of a synthesized case"""
    index: int
    kind: ShapeKind
    center: Index3
    half_extents: Vector3
    field_seed: Optional[int] = None


class CaseMetadata(BaseModel):
    """Provenance written as case_<seed>.json"""
    seed: int
    config_hash: str
    attempt: int
    attempt_seed: int
    deform_enabled: bool
    patches: List[PatchInfo]
    defect_voxels: int
    defective_voxels: int


class DatasetManifest(BaseModel):
    """Manifest of a materialized phantom dataset"""
    kind: Literal["phantoms", "volumes"] = "phantoms"
    count: int
    base_seed: int
    phantom: Optional[PhantomConfig] = None
    synth_config_hash: Optional[str] = None
    skulls: List[str] = []
    cases: List[str] = []
    failures: List[str] = []


# ============================================================================
# Reports
# ============================================================================

class MetricsReport(BaseModel):
    """Per-case evaluation row"""
    case_id: str
    dsc: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    bdsc: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    hd95_mm: Optional[float] = Field(default=None, ge=0.0)
    hd95_defined: bool = False
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    error: Optional[str] = None


class SummaryRow(BaseModel):
    """Mean/median row shaped like the results table"""
    label: str
    n_cases: int
    n_failed: int = 0
    dsc_mean: Optional[float] = None
    dsc_median: Optional[float] = None
    bdsc_mean: Optional[float] = None
    bdsc_median: Optional[float] = None
    hd95_mean: Optional[float] = None
    hd95_median: Optional[float] = None
    hd95_undefined: int = 0


class TrainLogEntry(BaseModel):
    """One line of train_log.jsonl"""
    epoch: int
    mean_loss: float
    lr: float
    wall_ms: float


class ParameterEntry(BaseModel):
    name: str
    shape: List[int]


class CheckpointManifest(BaseModel):
    """JSON half of a checkpoint; the payload holds raw little-endian float64"""
    format_version: int = 1
    model: ModelConfig
    optim: OptimConfig
    epoch: int
    step: int
    seed: int
    config_hash: str
    parameters: List[ParameterEntry]
    payload_file: str = config.CHECKPOINT_PAYLOAD_FILENAME
    payload_bytes: int
    byte_order: Literal["little"] = "little"
    payload_dtype: Literal["float64"] = "float64"


class CommandPlan(BaseModel):
    """Resolved CLI invocation"""
    subcommand: Subcommand
    config: Dict[str, Any] = {}
    inputs: List[str] = []
    out_dir: str
