"""
Tests for the finite-difference gradient checks
"""

import pytest
import torch

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from skullmae.errors import GradcheckFailed
from skullmae.gradcheck import (
    CheckResult, GradcheckReport, check_op, check_or_raise, model_check, numeric_gradient, op_checks,
    relative_error, run_gradcheck,
)
from skullmae.network import build_model
from skullmae.schemas import ModelConfig


class TestNumericGradient:
    """Tests for the central-difference helpers"""

    def test_quadratic(self):
        """Test central differences are exact up to rounding on a quadratic"""
        t = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        numeric = numeric_gradient(lambda: (t * t).sum(), t, 1e-3)

        assert torch.allclose(numeric, 2.0 * t, rtol=0, atol=1e-9)
        assert t.tolist() == [1.0, -2.0, 0.5]

    def test_selected_indices(self):
        """Test only the requested entries are differenced"""
        t = torch.arange(6, dtype=torch.float64).reshape(2, 3)
        numeric = numeric_gradient(lambda: (3.0 * t).sum(), t, 1e-4, indices=[1, 4])

        assert numeric.shape == (2,)
        assert torch.allclose(numeric, torch.tensor([3.0, 3.0], dtype=torch.float64), atol=1e-9)

    def test_relative_error(self):
        """Test the normalized difference"""
        a = torch.tensor([3.0, 4.0], dtype=torch.float64)

        assert relative_error(a, a) == 0.0
        assert relative_error(a, torch.zeros(2, dtype=torch.float64)) == 1.0
        assert relative_error(torch.zeros(2), torch.zeros(2)) == 0.0

    def test_check_op_catches_wrong_backward(self):
        """Test a function whose backward is wrong fails its check"""
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, grad):
                return grad

        results = check_op("wrong", Wrong.apply, [torch.ones(1, 1, 2, 2, 2, dtype=torch.float64)], 1e-6, 1e-5)

        assert not results[0].passed


class TestSuite:
    """Tests for the per-op suite and the end-to-end model check"""

    def test_op_checks_float64(self):
        """Test every layer op and the loss pass at 1e-5"""
        results = op_checks(torch.float64, 1e-6, 1e-5)
        names = {r.name.split("[")[0] for r in results}

        assert {"conv3d", "leaky_relu", "sigmoid", "nearest_upsample2x", "concat_channels",
                "soft_dice_loss"} <= names
        assert all(r.passed for r in results), [r for r in results if not r.passed]

    def test_op_checks_float32(self):
        """Test the relaxed float32 tolerance"""
        results = op_checks(torch.float32, 1e-2, 1e-2)

        assert all(r.passed for r in results), [r for r in results if not r.passed]

    def test_model_check_covers_every_tensor(self):
        """Test a small model passes with one result per parameter tensor"""
        cfg = ModelConfig(levels=2, base_channels=2)
        results = model_check(cfg, 1e-6, 1e-4, dims=(4, 4, 4))

        assert [r.name for r in results] == [f"model.{name}" for name, _ in build_model(cfg, 0).named_parameters()]
        assert all(r.passed for r in results), [r for r in results if not r.passed]

    @pytest.mark.slow
    def test_run_gradcheck_default(self):
        """Test the full float64 suite on the default model"""
        report = run_gradcheck("float64", quiet=True)

        assert report.passed
        assert check_or_raise(report) <= 1e-4


class TestReport:
    """Tests for GradcheckReport and check_or_raise"""

    def test_check_or_raise(self):
        """Test failures are named in the exception"""
        report = GradcheckReport(dtype="float64", checks=[
            CheckResult("conv3d[0]", 1e-9, 1e-5),
            CheckResult("model.head.weight", 3e-3, 1e-4),
        ])

        assert report.max_rel_error == 3e-3
        assert not report.passed
        with pytest.raises(GradcheckFailed, match="model.head.weight"):
            check_or_raise(report)

    def test_passing_report(self):
        """Test a passing report returns its max error"""
        report = GradcheckReport(dtype="float64", checks=[CheckResult("a", 2e-7, 1e-5), CheckResult("b", 1e-8, 1e-5)])

        assert check_or_raise(report) == 2e-7
        assert GradcheckReport(dtype="float64").max_rel_error == 0.0
