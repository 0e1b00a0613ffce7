"""
Tests for the command-line interface and its exit codes
"""

import json

import numpy as np
import pytest

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from skullmae import config
from skullmae.cli import build_parser, resolve_config, run
from skullmae.model_loader import clear_cache
from skullmae.phantoms import generate_phantom
from skullmae.schemas import DatasetManifest, PhantomConfig, Subcommand
from skullmae.volume import VoxelGrid
from skullmae.volume_io import read_volume, write_volume

SUBCOMMANDS = [s.value for s in Subcommand]


@pytest.fixture(autouse=True)
def empty_cache():
    yield
    clear_cache()


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({
        "model": {"levels": 2, "base_channels": 2},
        "batch_size": 2,
        "metrics": {"open_radius": 0, "min_component_vox": 0},
    }))
    return path


@pytest.fixture
def phantom_file(tmp_path):
    path = tmp_path / "skull.mha"
    write_volume(generate_phantom(PhantomConfig(dims=(16, 16, 16)), 1), path)
    return path


def _tiny_flags(config_file, out):
    return ["--config", str(config_file), "--out", str(out), "--dims", "16", "16", "16",
            "--phantoms", "2", "--held-out", "1", "--seed", "5", "--quiet"]


class TestParsing:
    """Tests for argument handling and config resolution"""

    @pytest.mark.parametrize("command", SUBCOMMANDS)
    def test_help(self, command, capsys):
        """Test every subcommand prints help and exits 0"""
        assert run([command, "--help"]) == 0
        assert "usage" in capsys.readouterr().out

    def test_no_subcommand(self, capsys):
        """Test a missing subcommand is a usage error"""
        assert run([]) == 1
        assert "UsageError" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        """Test unknown flags are usage errors"""
        assert run(["train", "--learning-speed", "9"]) == 1
        assert capsys.readouterr().err.startswith("[CLI] error: UsageError")

    def test_invalid_value(self, capsys):
        """Test a value the config rejects exits 1 as a config error"""
        assert run(["train", "--epochs", "0", "--quiet"]) == 1
        assert "ConfigError: epochs" in capsys.readouterr().err

    def test_indivisible_dims(self, tmp_path, capsys):
        """Test phantom dims the model cannot take are rejected up front"""
        assert run(["train", "--dims", "16", "16", "15", "--out", str(tmp_path), "--quiet"]) == 1
        assert "divisible" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        """Test a missing --config file is a usage error"""
        assert run(["train", "--config", str(tmp_path / "nope.json"), "--quiet"]) == 1

    def test_missing_input(self, tmp_path, capsys):
        """Test a missing input path is a usage error"""
        assert run(["preprocess", str(tmp_path / "gone.mha"), "--out", str(tmp_path), "--quiet"]) == 1
        assert "does not exist" in capsys.readouterr().err

    def test_flags_override_config(self, sample_experiment_config, tmp_path):
        """Test CLI flags > config file > defaults"""
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(sample_experiment_config))
        args = build_parser().parse_args(["train", "--config", str(path), "--epochs", "9", "--no-deform"])
        cfg = resolve_config(args)

        assert cfg.epochs == 9
        assert cfg.seed == 3
        assert cfg.synth.deform_enabled is False
        assert cfg.synth.patch_count_max == 2
        assert cfg.model.base_channels == 4
        assert cfg.out_dir == str(config.DEFAULT_OUTPUT_DIR / "train")

    def test_preprocess_dims_not_phantom_dims(self, tmp_path):
        """Test preprocess --dims leaves the phantom config alone"""
        args = build_parser().parse_args(["preprocess", "x.mha", "--dims", "10", "10", "10"])

        assert resolve_config(args).data.phantom.dims == PhantomConfig().dims


class TestSynthesize:
    """Tests for the synthesize subcommand"""

    def test_phantom_cases(self, tiny_config_file, tmp_path):
        """Test phantoms, case files and the manifest"""
        out = tmp_path / "synth"
        assert run(["synthesize"] + _tiny_flags(tiny_config_file, out) + ["--cases-per-skull", "2"]) == 0

        manifest = DatasetManifest.model_validate(json.loads((out / "cases" / "manifest.json").read_text()))
        assert manifest.kind == "phantoms"
        assert manifest.count == 4
        assert manifest.failures == []
        assert len(list((out / "skulls").glob("*.mha"))) == 2
        for name in manifest.cases:
            defective = read_volume(out / "cases" / f"{name}_defective.mha")
            defect = read_volume(out / "cases" / f"{name}_defect.mha")
            assert not (defective.data & defect.data).any()
            assert defect.data.any()

    def test_volume_inputs(self, phantom_file, tiny_config_file, tmp_path):
        """Test healthy skull files as input"""
        out = tmp_path / "synth"
        assert run(["synthesize", str(phantom_file), "--config", str(tiny_config_file),
                    "--out", str(out), "--quiet"]) == 0

        manifest = json.loads((out / "cases" / "manifest.json").read_text())
        assert manifest["kind"] == "volumes"
        assert manifest["skulls"] == [str(phantom_file)]

    def test_failed_case_recorded(self, phantom_file, tmp_path, capsys):
        """Test an unusable skull is recorded and the command exits 2"""
        empty = tmp_path / "empty.mha"
        write_volume(VoxelGrid.zeros((16, 16, 16)), empty)
        out = tmp_path / "synth"

        assert run(["synthesize", str(phantom_file), str(empty), "--out", str(out), "--quiet"]) == 2
        manifest = json.loads((out / "cases" / "manifest.json").read_text())
        assert manifest["count"] == 1
        assert "EmptyVolume" in manifest["failures"][0]
        assert "warning" in capsys.readouterr().err


class TestPreprocess:
    """Tests for the preprocess subcommand"""

    def test_normalize_files(self, phantom_file, tmp_path):
        """Test the normalized volume and its transform sidecar"""
        out = tmp_path / "pre"
        assert run(["preprocess", str(phantom_file), "--dims", "8", "8", "8", "--margin", "1",
                    "--out", str(out), "--quiet"]) == 0

        assert read_volume(out / "skull.mha").dims == (8, 8, 8)
        transform = json.loads((out / f"skull_{config.TRANSFORM_FILENAME}").read_text())
        assert transform["original_dims"] == [16, 16, 16]

    def test_negative_margin(self, phantom_file, tmp_path):
        """Test a negative margin is a usage error"""
        assert run(["preprocess", str(phantom_file), "--margin", "-1", "--out", str(tmp_path), "--quiet"]) == 1

    @pytest.mark.parametrize("dims", [["0", "4", "4"], ["4", "-2", "4"]])
    def test_non_positive_dims(self, phantom_file, tmp_path, dims, capsys):
        """Test a zero or negative target dim is a usage error"""
        assert run(["preprocess", str(phantom_file), "--dims"] + dims + ["--out", str(tmp_path), "--quiet"]) == 1
        assert "--dims must be three positive ints" in capsys.readouterr().err


class TestEvaluate:
    """Tests for evaluate on files"""

    def test_pred_gt_files(self, tmp_path, box_grid):
        """Test scoring file pairs writes metrics and summary"""
        gt = box_grid((8, 8, 8), (2, 2, 2), (5, 5, 5))
        write_volume(gt, tmp_path / "gt.mha")
        write_volume(gt, tmp_path / "pred.mha")
        out = tmp_path / "eval"

        assert run(["evaluate", "--pred", str(tmp_path / "pred.mha"), "--gt", str(tmp_path / "gt.mha"),
                    "--out", str(out), "--quiet"]) == 0
        report = json.loads((out / config.METRICS_FILENAME).read_text().splitlines()[0])
        assert report["case_id"] == "pred"
        assert report["dsc"] == 1.0
        assert report["hd95_mm"] == 0.0
        assert (out / config.SUMMARY_FILENAME).exists()

    def test_geometry_mismatch(self, tmp_path, box_grid, capsys):
        """Test volumes of different dims exit 2"""
        write_volume(box_grid((8, 8, 8), (2, 2, 2), (5, 5, 5)), tmp_path / "a.mha")
        write_volume(box_grid((8, 8, 9), (2, 2, 2), (5, 5, 5)), tmp_path / "b.mha")

        assert run(["evaluate", "--pred", str(tmp_path / "a.mha"), "--gt", str(tmp_path / "b.mha"),
                    "--out", str(tmp_path / "eval"), "--quiet"]) == 2
        assert "GeometryMismatch" in capsys.readouterr().err

    def test_pair_count_mismatch(self, tmp_path, box_grid):
        """Test --pred and --gt must pair up"""
        write_volume(box_grid((8, 8, 8), (2, 2, 2), (5, 5, 5)), tmp_path / "a.mha")

        assert run(["evaluate", "--pred", str(tmp_path / "a.mha"), str(tmp_path / "a.mha"),
                    "--gt", str(tmp_path / "a.mha"), "--quiet"]) == 1
        assert run(["evaluate", "--quiet"]) == 1


class TestPipeline:
    """Tests for train, infer and evaluate --checkpoint end to end"""

    def test_train_infer_evaluate(self, tiny_config_file, tmp_path):
        """Test a one-epoch model can be loaded, applied and scored"""
        train_out = tmp_path / "train"
        assert run(["train", "--epochs", "1"] + _tiny_flags(tiny_config_file, train_out)) == 0
        checkpoint = train_out / config.FINAL_CHECKPOINT_DIRNAME
        assert (checkpoint / config.CHECKPOINT_MANIFEST_FILENAME).exists()
        assert len((train_out / config.TRAIN_LOG_FILENAME).read_text().splitlines()) == 1

        synth_out = tmp_path / "synth"
        assert run(["synthesize"] + _tiny_flags(tiny_config_file, synth_out)) == 0
        case = sorted((synth_out / "cases").glob("*_defective.mha"))[0]

        infer_out = tmp_path / "infer"
        assert run(["infer", str(case), "--checkpoint", str(checkpoint), "--config", str(tiny_config_file),
                    "--out", str(infer_out), "--quiet"]) == 0
        stem = case.name.split(".")[0]
        reconstruction = read_volume(infer_out / f"{stem}_reconstruction.mha")
        defect = read_volume(infer_out / f"{stem}_defect.mha")
        assert reconstruction.dims == (16, 16, 16)
        assert not (defect.data & read_volume(case).data).any()

        eval_out = tmp_path / "eval"
        assert run(["evaluate", "--checkpoint", str(checkpoint)] + _tiny_flags(tiny_config_file, eval_out)) == 0
        lines = (eval_out / config.METRICS_FILENAME).read_text().splitlines()
        assert len(lines) == 1

    def test_infer_with_transform(self, tiny_config_file, phantom_file, tmp_path):
        """Test --transform restores outputs to the original geometry"""
        train_out = tmp_path / "train"
        assert run(["train", "--epochs", "1"] + _tiny_flags(tiny_config_file, train_out)) == 0
        pre_out = tmp_path / "pre"
        assert run(["preprocess", str(phantom_file), "--dims", "16", "16", "16", "--out", str(pre_out),
                    "--quiet"]) == 0

        infer_out = tmp_path / "infer"
        assert run(["infer", str(pre_out / "skull.mha"), "--checkpoint",
                    str(train_out / config.FINAL_CHECKPOINT_DIRNAME),
                    "--transform", str(pre_out / f"skull_{config.TRANSFORM_FILENAME}"),
                    "--out", str(infer_out), "--quiet"]) == 0
        restored = read_volume(infer_out / "skull_reconstruction.mha")
        original = read_volume(phantom_file)
        assert restored.dims == original.dims
        assert np.allclose(restored.spacing, original.spacing)

    def test_missing_checkpoint(self, tmp_path, phantom_file):
        """Test a missing checkpoint is a usage error"""
        assert run(["infer", str(phantom_file), "--checkpoint", str(tmp_path / "none"), "--quiet"]) == 1

    def test_ablation_repeats(self, tmp_path):
        """Test --repeats below 1 is rejected"""
        assert run(["ablation", "--repeats", "0", "--out", str(tmp_path), "--quiet"]) == 1


class TestGradcheck:
    """Tests for the gradcheck subcommand"""

    def test_passes(self, capsys):
        """Test the float64 suite passes and reports its worst error"""
        assert run(["gradcheck", "--quiet"]) == 0
        assert "max relative error" in capsys.readouterr().out
