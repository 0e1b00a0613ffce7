"""
Central finite-difference checks of every differentiable op and the full model
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from skullmae import config
from skullmae.errors import GradcheckFailed
from skullmae.network import (
    build_model, concat_channels, conv3d, forward, get_dtype, leaky_relu, nearest_upsample2x,
    sigmoid, soft_dice_loss,
)
from skullmae.schemas import ModelConfig


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance


@dataclass
class GradcheckReport:
    dtype: str
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-12)"""
    diff = torch.linalg.vector_norm(analytic - numeric).item()
    scale = max(torch.linalg.vector_norm(analytic).item(), torch.linalg.vector_norm(numeric).item(), 1e-12)
    return diff / scale


def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float,
                     indices: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Central differences of scalar fn() w.r.t. entries of tensor (all entries by default)"""
    flat = tensor.data.view(-1)
    indices = range(flat.numel()) if indices is None else indices
    grads = []
    with torch.no_grad():
        for i in indices:
            original = flat[i].item()
            flat[i] = original + step
            plus = fn().item()
            flat[i] = original - step
            minus = fn().item()
            flat[i] = original
            grads.append((plus - minus) / (2.0 * step))
    return torch.tensor(grads, dtype=torch.float64)


def check_op(name: str, op: Callable[..., torch.Tensor], inputs: List[torch.Tensor],
             step: float, tolerance: float, seed: int = 0) -> List[CheckResult]:
    """
    Check d/d(input) of sum(op(*inputs) * R) for a fixed random R, one result per input.
    """
    inputs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = op(*inputs)
    generator = torch.Generator().manual_seed(seed)
    weights = torch.rand(out.shape, generator=generator, dtype=torch.float64).to(out.dtype)

    def objective() -> torch.Tensor:
        return (op(*inputs) * weights).sum()

    objective().backward()
    results = []
    for i, t in enumerate(inputs):
        analytic = t.grad.detach().reshape(-1).to(torch.float64)
        numeric = numeric_gradient(objective, t, step)
        results.append(CheckResult(f"{name}[{i}]", relative_error(analytic, numeric), tolerance))
    return results


def _away_from_zero(rng: np.random.Generator, shape, dtype) -> torch.Tensor:
    # leaky_relu has a kink at 0
    magnitude = rng.uniform(0.1, 1.0, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return torch.from_numpy(magnitude * sign).to(dtype)


def op_checks(dtype: torch.dtype, step: float, tolerance: float, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return torch.from_numpy(rng.normal(size=shape)).to(dtype)

    results = []
    results += check_op("conv3d", lambda x, w, b: conv3d(x, w, b),
                        [rand(2, 2, 4, 3, 5), rand(3, 2, 3, 3, 3), rand(3)], step, tolerance, seed)
    results += check_op("conv3d_stride2", lambda x, w, b: conv3d(x, w, b, stride=2),
                        [rand(1, 2, 4, 4, 4), rand(2, 2, 3, 3, 3), rand(2)], step, tolerance, seed)
    results += check_op("conv3d_1x1", lambda x, w, b: conv3d(x, w, b),
                        [rand(1, 3, 3, 3, 3), rand(2, 3, 1, 1, 1), rand(2)], step, tolerance, seed)
    results += check_op("leaky_relu", leaky_relu,
                        [_away_from_zero(rng, (1, 2, 3, 3, 3), dtype)], step, tolerance, seed)
    results += check_op("sigmoid", sigmoid, [rand(1, 2, 3, 3, 3)], step, tolerance, seed)
    results += check_op("nearest_upsample2x", nearest_upsample2x, [rand(1, 2, 2, 3, 2)], step, tolerance, seed)
    results += check_op("concat_channels", concat_channels,
                        [rand(1, 2, 3, 3, 3), rand(1, 1, 3, 3, 3)], step, tolerance, seed)

    target = torch.from_numpy((rng.random((2, 1, 3, 3, 3)) < 0.4).astype(np.float64)).to(dtype)
    probabilities = torch.from_numpy(rng.uniform(0.05, 0.95, size=(2, 1, 3, 3, 3))).to(dtype)
    results += check_op("soft_dice_loss", lambda p: soft_dice_loss(p, target),
                        [probabilities], step, tolerance, seed)
    return results


def model_check(cfg: ModelConfig, step: float, tolerance: float, seed: int = 0,
                dims: Sequence[int] = (8, 8, 8),
                samples_per_tensor: int = config.GRADCHECK_SAMPLES_PER_TENSOR) -> List[CheckResult]:
    """Soft Dice loss gradient w.r.t. sampled entries of every parameter tensor"""
    dtype = get_dtype(cfg.dtype)
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    x = torch.from_numpy((rng.random((1, 1) + tuple(dims)) < 0.3).astype(np.float64)).to(dtype)
    target = torch.from_numpy((rng.random((1, 1) + tuple(dims)) < 0.3).astype(np.float64)).to(dtype)

    def objective() -> torch.Tensor:
        return soft_dice_loss(forward(model, x), target)

    model.zero_grad()
    objective().backward()

    results = []
    for name, param in model.named_parameters():
        count = param.numel()
        picks = rng.choice(count, size=min(samples_per_tensor, count), replace=False)
        picks = [int(i) for i in np.sort(picks)]
        analytic = param.grad.detach().reshape(-1)[picks].to(torch.float64)
        numeric = numeric_gradient(objective, param, step, picks)
        results.append(CheckResult(f"model.{name}", relative_error(analytic, numeric), tolerance))
    return results


def run_gradcheck(dtype: str = "float64", seed: int = 0, quiet: bool = False) -> GradcheckReport:
    """
    Run the per-op suite and the end-to-end model check.

    float64 uses step 1e-6 with tolerances 1e-5 (ops) and 1e-4 (model);
    float32 uses a coarser step and the relaxed tolerance.
    """
    torch_dtype = get_dtype(dtype)
    if torch_dtype == torch.float64:
        step = config.GRADCHECK_STEP
        op_tol, model_tol = config.GRADCHECK_OP_TOLERANCE, config.GRADCHECK_MODEL_TOLERANCE
    else:
        step = config.GRADCHECK_FLOAT32_STEP
        op_tol = model_tol = config.GRADCHECK_FLOAT32_TOLERANCE

    report = GradcheckReport(dtype=dtype)
    report.checks += op_checks(torch_dtype, step, op_tol, seed)
    report.checks += model_check(ModelConfig(dtype=dtype), step, model_tol, seed)

    if not quiet:
        worst = max(report.checks, key=lambda c: c.rel_error)
        print(f"[Gradcheck] {len(report.checks)} checks ({dtype}), "
              f"max relative error {report.max_rel_error:.3e} in {worst.name}")
    return report


def check_or_raise(report: GradcheckReport) -> float:
    """Return the max relative error, or raise GradcheckFailed naming the failing checks"""
    failures = report.failures()
    if failures:
        detail = ", ".join(f"{c.name}={c.rel_error:.3e}>{c.tolerance:.0e}" for c in failures[:5])
        raise GradcheckFailed(f"{len(failures)} gradient checks over tolerance: {detail}")
    return report.max_rel_error
