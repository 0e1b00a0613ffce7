"""
Tests for Pydantic schemas and experiment config loading
"""

import json

import pytest
from pydantic import ValidationError

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from skullmae import config
from skullmae.errors import UsageError
from skullmae.schemas import (
    CheckpointManifest, DataConfig, GeomTransform, MetricsConfig, MetricsReport, ModelConfig,
    OptimConfig, PhantomConfig, ShapeKind, SynthConfig, TrainConfig,
)


class TestSynthConfig:
    """Tests for SynthConfig schema"""

    def test_default_synth_config(self):
        """Test default synthesis values"""
        cfg = SynthConfig()

        assert cfg.patch_count_min == 1
        assert cfg.patch_count_max == 3
        assert cfg.shape_kinds == [ShapeKind.CUBOID, ShapeKind.ELLIPSOID]
        assert cfg.size_frac_min == 0.10
        assert cfg.size_frac_max == 0.30
        assert cfg.z_min_frac == 0.4
        assert cfg.deform_enabled is True
        assert cfg.control_spacing_vox == 8
        assert cfg.max_disp_vox == 6.0
        assert cfg.smooth_sigma_vox == 2.0

    def test_patch_count_order(self):
        """Test patch_count_min must not exceed patch_count_max"""
        SynthConfig(patch_count_min=2, patch_count_max=2)

        with pytest.raises(ValidationError):
            SynthConfig(patch_count_min=3, patch_count_max=2)

    def test_size_fraction_bounds(self):
        """Test size fractions must lie in (0, 1) and be ordered"""
        with pytest.raises(ValidationError):
            SynthConfig(size_frac_min=0.0)

        with pytest.raises(ValidationError):
            SynthConfig(size_frac_max=1.0)

        with pytest.raises(ValidationError):
            SynthConfig(size_frac_min=0.3, size_frac_max=0.2)

    def test_shape_kinds_nonempty_unique(self):
        """Test shape_kinds must be a nonempty set"""
        SynthConfig(shape_kinds=["ellipsoid"])

        with pytest.raises(ValidationError):
            SynthConfig(shape_kinds=[])

        with pytest.raises(ValidationError):
            SynthConfig(shape_kinds=["cuboid", "cuboid"])

    def test_control_spacing_minimum(self):
        """Test control lattice spacing of at least 2 voxels"""
        with pytest.raises(ValidationError):
            SynthConfig(control_spacing_vox=1)

    def test_config_hash_tracks_content(self):
        """Test hash is stable and changes with any field"""
        assert SynthConfig().config_hash() == SynthConfig().config_hash()
        assert SynthConfig().config_hash() != SynthConfig(deform_enabled=False).config_hash()
        assert len(SynthConfig().config_hash()) == 16


class TestModelConfig:
    """Tests for ModelConfig schema"""

    def test_default_model_config(self):
        """Test default model values"""
        cfg = ModelConfig()

        assert cfg.levels == 3
        assert cfg.base_channels == 8
        assert cfg.blocks_per_level == 1
        assert cfg.kernel_size == 3
        assert cfg.dtype == "float64"
        assert cfg.divisor == 4

    def test_even_kernel_rejected(self):
        """Test kernel_size must be odd"""
        with pytest.raises(ValidationError):
            ModelConfig(kernel_size=4)

    def test_dtype_choices(self):
        """Test only float64 and float32 are accepted"""
        ModelConfig(dtype="float32")

        with pytest.raises(ValidationError):
            ModelConfig(dtype="bfloat16")

    def test_single_channel_io(self):
        """Test in/out channels are fixed at 1"""
        with pytest.raises(ValidationError):
            ModelConfig(in_channels=2)


class TestOptimConfig:
    """Tests for OptimConfig schema"""

    def test_default_optim_config(self):
        """Test default AdamW hyperparameters"""
        cfg = OptimConfig()

        assert cfg.lr == 0.001
        assert cfg.weight_decay == 0.01
        assert cfg.beta1 == 0.9
        assert cfg.beta2 == 0.999
        assert cfg.eps == 1e-8
        assert cfg.gamma == 0.995

    def test_gamma_range(self):
        """Test gamma must lie in (0, 1]"""
        OptimConfig(gamma=1.0)

        with pytest.raises(ValidationError):
            OptimConfig(gamma=0.0)

        with pytest.raises(ValidationError):
            OptimConfig(gamma=1.5)


class TestTrainConfig:
    """Tests for TrainConfig schema"""

    def test_default_train_config(self):
        """Test default training values"""
        cfg = TrainConfig()

        assert cfg.epochs == 50
        assert cfg.batch_size == 1
        assert cfg.seed == 42
        assert cfg.checkpoint_every == 10
        assert cfg.threshold == 0.5
        assert cfg.deterministic is True
        assert cfg.data.phantoms == 200
        assert cfg.data.held_out == 20
        assert cfg.data.phantom.dims == (32, 32, 32)
        assert cfg.metrics.bdsc_width_mm == 2.0
        assert cfg.metrics.min_component_vox == 10

    def test_phantom_dims_divisible_by_model(self):
        """Test phantom dims must be divisible by 2^(levels-1)"""
        TrainConfig(data=DataConfig(phantom=PhantomConfig(dims=(16, 16, 16))))

        with pytest.raises(ValidationError):
            TrainConfig(data=DataConfig(phantom=PhantomConfig(dims=(18, 16, 16))))

        # One level never downsamples
        TrainConfig(model=ModelConfig(levels=1), data=DataConfig(phantom=PhantomConfig(dims=(17, 15, 13))))

    def test_invalid_values(self):
        """Test basic field constraints"""
        with pytest.raises(ValidationError):
            TrainConfig(epochs=0)

        with pytest.raises(ValidationError):
            TrainConfig(seed=-1)

        with pytest.raises(ValidationError):
            TrainConfig(threshold=1.0)

    def test_config_hash_ignores_output_location(self):
        """Test out_dir and jobs do not change the hash"""
        a = TrainConfig(out_dir="/tmp/a", jobs=1)
        b = TrainConfig(out_dir="/tmp/b", jobs=4)

        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != TrainConfig(seed=1).config_hash()

    def test_experiment_open_radius_default(self):
        """Test experiments run defect extraction without an opening by default"""
        assert MetricsConfig().open_radius == config.EXPERIMENT_OPEN_RADIUS == 0


class TestGeomTransform:
    """Tests for GeomTransform schema"""

    def test_json_round_trip(self):
        """Test transform survives a JSON dump and reload"""
        t = GeomTransform(
            crop_lo=(1, 2, 3), original_dims=(20, 20, 20), cropped_dims=(10, 11, 12),
            scale=(1.6, 1.0, 0.5), target_dims=(16, 11, 6),
            original_spacing=(0.5, 0.5, 1.0), original_origin=(-3.0, 0.0, 7.25),
        )
        restored = GeomTransform.model_validate(json.loads(t.model_dump_json()))

        assert restored == t

    def test_negative_crop_rejected(self):
        """Test crop offsets are non-negative"""
        with pytest.raises(ValidationError):
            GeomTransform(
                crop_lo=(-1, 0, 0), original_dims=(4, 4, 4), cropped_dims=(4, 4, 4),
                scale=(1.0, 1.0, 1.0), target_dims=(4, 4, 4),
                original_spacing=(1.0, 1.0, 1.0), original_origin=(0.0, 0.0, 0.0),
            )

    @pytest.mark.parametrize("field,value", [
        ("original_spacing", (1.0, float("inf"), 1.0)),
        ("original_origin", (float("nan"), 0.0, 0.0)),
        ("scale", (1.0, 1.0, float("inf"))),
    ])
    def test_non_finite_geometry_rejected(self, field, value):
        """Test inf and NaN spacing, origin and scale are invalid"""
        fields = dict(
            crop_lo=(0, 0, 0), original_dims=(4, 4, 4), cropped_dims=(4, 4, 4),
            scale=(1.0, 1.0, 1.0), target_dims=(4, 4, 4),
            original_spacing=(1.0, 1.0, 1.0), original_origin=(0.0, 0.0, 0.0),
        )
        fields[field] = value
        with pytest.raises(ValidationError):
            GeomTransform(**fields)

    def test_non_finite_phantom_spacing(self):
        """Test phantom spacing must be finite"""
        with pytest.raises(ValidationError):
            PhantomConfig(spacing_mm=(1.0, float("inf"), 1.0))


class TestReports:
    """Tests for report schemas"""

    def test_metrics_report_ranges(self):
        """Test DSC-like fields stay within [0, 1]"""
        MetricsReport(case_id="a", dsc=1.0, bdsc=0.0, hd95_mm=0.0, hd95_defined=True)

        with pytest.raises(ValidationError):
            MetricsReport(case_id="a", dsc=1.2)

        with pytest.raises(ValidationError):
            MetricsReport(case_id="a", hd95_mm=-1.0)

    def test_checkpoint_manifest_defaults(self):
        """Test checkpoint manifest payload description"""
        manifest = CheckpointManifest(
            model=ModelConfig(), optim=OptimConfig(), epoch=1, step=3, seed=0,
            config_hash="abc", parameters=[], payload_bytes=0,
        )

        assert manifest.byte_order == "little"
        assert manifest.payload_dtype == "float64"
        assert manifest.payload_file == config.CHECKPOINT_PAYLOAD_FILENAME


class TestExperimentConfig:
    """Tests for JSON experiment config loading and flag merging"""

    def test_none_path(self):
        """Test no config file yields an empty dict"""
        assert config.load_experiment_config(None) == {}

    def test_load_and_validate(self, tmp_path, sample_experiment_config):
        """Test a complete config file validates into TrainConfig"""
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(sample_experiment_config))

        cfg = TrainConfig.model_validate(config.load_experiment_config(path))

        assert cfg.seed == 3
        assert cfg.synth.deform_enabled is False
        assert cfg.model.levels == 2
        assert cfg.data.phantom.dims == (16, 16, 16)

    def test_missing_file(self, tmp_path):
        """Test a missing file is a usage error"""
        with pytest.raises(UsageError):
            config.load_experiment_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        """Test malformed JSON is a usage error"""
        path = tmp_path / "bad.json"
        path.write_text("{ not json")

        with pytest.raises(UsageError):
            config.load_experiment_config(path)

    def test_section_must_be_object(self, tmp_path):
        """Test section values must be JSON objects"""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"synth": [1, 2]}))

        with pytest.raises(UsageError):
            config.load_experiment_config(path)

    def test_merge_overrides_precedence(self, sample_experiment_config):
        """Test flags win, None flags are ignored, nested sections merge"""
        merged = config.merge_overrides(sample_experiment_config, {
            "seed": 9,
            "epochs": None,
            "synth": {"deform_enabled": None, "max_disp_vox": 2.0},
            "data": {"phantom": {"dims": None}},
        })

        assert merged["seed"] == 9
        assert merged["epochs"] == 4
        assert merged["synth"] == {"deform_enabled": False, "patch_count_max": 2, "max_disp_vox": 2.0}
        assert merged["data"]["phantom"]["dims"] == [16, 16, 16]
        # Inputs are not mutated
        assert "max_disp_vox" not in sample_experiment_config["synth"]

    def test_shipped_example_config(self):
        """Test the repository's experiment_config.json matches the defaults"""
        cfg = TrainConfig.model_validate(config.load_experiment_config(config.EXAMPLE_CONFIG_FILE))

        assert cfg.model_copy(update={"out_dir": ""}).config_hash() == TrainConfig(out_dir="").config_hash()
