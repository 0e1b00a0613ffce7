"""
Residual 3D encoder-decoder for skull shape completion
Layer ops are shape-checked wrappers over torch.nn.functional so they can be
gradient-checked one by one; the model, Soft Dice loss, AdamW step and the
exponential learning-rate schedule live here too.
"""

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR

from skullmae import config
from skullmae.errors import NonFiniteGradient, ShapeMismatch
from skullmae.schemas import ModelConfig, OptimConfig


def get_dtype(dtype_str: str) -> torch.dtype:
    """Convert string dtype to torch dtype"""
    dtype_map = {
        "float64": torch.float64,
        "fp64": torch.float64,
        "float32": torch.float32,
        "fp32": torch.float32,
    }
    try:
        return dtype_map[dtype_str.lower()]
    except KeyError:
        raise ValueError(f"Unsupported dtype '{dtype_str}' (use float64 or float32)")


# Thread count torch picked at import, restored when determinism is switched off
_DEFAULT_THREADS = torch.get_num_threads()


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels for bit-identical runs"""
    torch.use_deterministic_algorithms(enabled)
    torch.set_num_threads(1 if enabled else _DEFAULT_THREADS)


# =============================================================================
# Layer ops
# =============================================================================

def _require_5d(x: torch.Tensor, name: str) -> None:
    if x.dim() != 5:
        raise ShapeMismatch(f"{name} must be (batch, channels, x, y, z), got shape {tuple(x.shape)}")


def conv3d(x: torch.Tensor, w: torch.Tensor, b: Optional[torch.Tensor] = None,
           stride: int = 1, padding: Optional[int] = None) -> torch.Tensor:
    """
    Zero-padded 3D cross-correlation.

    Args:
        x: (batch, in_channels, x, y, z)
        w: (out_channels, in_channels, kx, ky, kz), odd kernel extents
        b: (out_channels,) or None
        stride: Stride along every axis
        padding: Zero padding per side, defaults to half the kernel ("same")
    """
    _require_5d(x, "conv3d input")
    _require_5d(w, "conv3d weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv3d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ShapeMismatch(f"conv3d: kernel extents must be odd, got {tuple(w.shape[2:])}")
    if b is not None and tuple(b.shape) != (w.shape[0],):
        raise ShapeMismatch(f"conv3d: bias shape {tuple(b.shape)} does not match {w.shape[0]} outputs")
    if padding is None:
        padding = w.shape[2] // 2
    return F.conv3d(x, w, b, stride=stride, padding=padding)


def leaky_relu(x: torch.Tensor, slope: float = config.NEGATIVE_SLOPE) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def nearest_upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Replicate every voxel into a 2x2x2 block"""
    _require_5d(x, "upsample input")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def concat_channels(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _require_5d(x, "concat input")
    _require_5d(y, "concat input")
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeMismatch(
            f"concat_channels: shapes {tuple(x.shape)} and {tuple(y.shape)} differ outside the channel axis"
        )
    return torch.cat([x, y], dim=1)


# =============================================================================
# Model
# =============================================================================

class ResidualBlock(nn.Module):
    """y = leaky(skip(x) + conv2(leaky(conv1(x)))), 1^3 projection on the skip if channels change"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, slope: float):
        super().__init__()
        self.slope = slope
        self.conv1 = nn.Conv3d(in_channels, out_channels, kernel_size)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel_size)
        self.proj = nn.Conv3d(in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = leaky_relu(conv3d(x, self.conv1.weight, self.conv1.bias), self.slope)
        h = conv3d(h, self.conv2.weight, self.conv2.bias)
        skip = x if self.proj is None else conv3d(x, self.proj.weight, self.proj.bias)
        return leaky_relu(skip + h, self.slope)


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, channels: int, cfg: ModelConfig, downsample: bool):
        super().__init__()
        self.blocks = nn.ModuleList(
            ResidualBlock(in_channels if i == 0 else channels, channels, cfg.kernel_size, cfg.negative_slope)
            for i in range(cfg.blocks_per_level)
        )
        self.down = nn.Conv3d(channels, channels, cfg.kernel_size) if downsample else None
        self.slope = cfg.negative_slope

    def forward(self, x: torch.Tensor):
        for block in self.blocks:
            x = block(x)
        if self.down is None:
            return x, None
        down = leaky_relu(conv3d(x, self.down.weight, self.down.bias, stride=2), self.slope)
        return x, down


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, channels: int, cfg: ModelConfig):
        super().__init__()
        self.up = nn.Conv3d(in_channels, channels, cfg.kernel_size)
        self.blocks = nn.ModuleList(
            ResidualBlock(2 * channels if i == 0 else channels, channels, cfg.kernel_size, cfg.negative_slope)
            for i in range(cfg.blocks_per_level)
        )
        self.slope = cfg.negative_slope

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = leaky_relu(conv3d(nearest_upsample2x(x), self.up.weight, self.up.bias), self.slope)
        x = concat_channels(x, skip)
        for block in self.blocks:
            x = block(x)
        return x


class ResidualUNet3D(nn.Module):
    """Encoder of `levels` stages, symmetric decoder, 1^3 output conv and sigmoid"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        channels = [cfg.base_channels * 2 ** level for level in range(cfg.levels)]
        self.encoder = nn.ModuleList(
            EncoderStage(cfg.in_channels if level == 0 else channels[level - 1], channels[level], cfg,
                         downsample=level < cfg.levels - 1)
            for level in range(cfg.levels)
        )
        self.decoder = nn.ModuleList(
            DecoderStage(channels[level + 1], channels[level], cfg)
            for level in reversed(range(cfg.levels - 1))
        )
        self.head = nn.Conv3d(channels[0], cfg.out_channels, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips: List[torch.Tensor] = []
        for stage in self.encoder:
            features, down = stage(x)
            skips.append(features)
            x = features if down is None else down
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            x = stage(x, skip)
        return conv3d(x, self.head.weight, self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return sigmoid(self.logits(x))


def build_model(cfg: ModelConfig, seed: int) -> ResidualUNet3D:
    """Construct a model with seeded default initialization in cfg.dtype"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed % 2 ** 63)
        model = ResidualUNet3D(cfg)
    return model.to(get_dtype(cfg.dtype))


def check_input(model: ResidualUNet3D, x: torch.Tensor) -> None:
    _require_5d(x, "model input")
    if x.shape[1] != model.cfg.in_channels:
        raise ShapeMismatch(f"model expects {model.cfg.in_channels} input channel(s), got {x.shape[1]}")
    divisor = model.cfg.divisor
    if any(d % divisor for d in x.shape[2:]):
        raise ShapeMismatch(
            f"spatial dims {tuple(x.shape[2:])} must be divisible by {divisor} "
            f"for a {model.cfg.levels}-level model"
        )


def forward(model: ResidualUNet3D, x: torch.Tensor) -> torch.Tensor:
    """Per-voxel probabilities in (0, 1), same shape as x"""
    check_input(model, x)
    param = next(model.parameters())
    return model(x.to(dtype=param.dtype))


# =============================================================================
# Loss and optimization
# =============================================================================

def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = config.SOFT_DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps) per batch item, averaged"""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"soft_dice_loss: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1).to(dtype=pred.dtype)
    intersection = (p * t).sum(dim=1)
    denominator = p.sum(dim=1) + t.sum(dim=1)
    return (1.0 - (2.0 * intersection + eps) / (denominator + eps)).mean()


def build_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def adamw_step(model: nn.Module, optimizer: torch.optim.Optimizer) -> None:
    """
    Decoupled-weight-decay update after a finite-gradient check.

    Raises:
        NonFiniteGradient: a gradient holds NaN or inf; no parameter is touched
    """
    for name, param in model.named_parameters():
        if param.grad is not None and not torch.isfinite(param.grad).all():
            bad = int((~torch.isfinite(param.grad)).sum())
            raise NonFiniteGradient(f"{bad} non-finite gradient entries in {name}")
    optimizer.step()


def lr_at_epoch(epoch: int, lr0: float = config.LEARNING_RATE, gamma: float = config.LR_GAMMA) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return lr0 * gamma ** epoch


def build_scheduler(optimizer: torch.optim.Optimizer, gamma: float = config.LR_GAMMA) -> LambdaLR:
    """Per-epoch schedule whose lr equals lr_at_epoch(epoch)"""
    return LambdaLR(optimizer, lr_lambda=lambda epoch: gamma ** epoch)


def to_tensor(volumes: Sequence, dtype: torch.dtype) -> torch.Tensor:
    """Stack VoxelGrids into a (batch, 1, x, y, z) tensor of 0/1 values"""
    stacked = torch.stack([torch.from_numpy(v.data.astype("float64")) for v in volumes])
    return stacked.unsqueeze(1).to(dtype=dtype)
