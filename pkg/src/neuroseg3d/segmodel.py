"""Segmentation model: pretrained encoder + UNet-style decoder, soft Dice
loss, and sliding-window whole-volume inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .swin3d import ConfigError, EncoderConfig, SwinEncoder3d, build_encoder
from .volumes import ValidationError


@dataclass
class SegConfig:
    out_channels: int = 1
    dropout_rate: float = 0.1
    decoder_features: tuple[int, ...] | None = None  # one width per decoder level, coarse to fine

    def __post_init__(self):
        if self.out_channels < 1:
            raise ConfigError("out_channels must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


class SafeInstanceNorm3d(nn.InstanceNorm3d):
    """Instance norm that passes single-voxel grids through unchanged
    (normalizing one element is degenerate; happens only in micro configs)."""

    def forward(self, x):
        if x.shape[2] * x.shape[3] * x.shape[4] == 1:
            return x
        return super().forward(x)


class ResidualBlock3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, kernel_size=3, padding=1)
        self.norm1 = SafeInstanceNorm3d(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, kernel_size=3, padding=1)
        self.norm2 = SafeInstanceNorm3d(c_out)
        self.act = nn.LeakyReLU(inplace=True)
        self.drop = nn.Dropout3d(dropout)
        self.skip = nn.Conv3d(c_in, c_out, kernel_size=1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        residual = self.skip(x)
        x = self.act(self.norm1(self.conv1(x)))
        x = self.drop(x)
        x = self.norm2(self.conv2(x))
        return self.act(x + residual)


class DecoderStage(nn.Module):
    """Transpose-conv upsampling then a residual block over the concatenated
    skip. Spatial mismatches from odd merge grids are interpolated away."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, dropout: float):
        super().__init__()
        self.up = nn.ConvTranspose3d(c_in, c_out, kernel_size=2, stride=2)
        self.block = ResidualBlock3d(c_out + c_skip, c_out, dropout)

    def forward(self, x, skip):
        x = self.up(x)
        if x.shape[2:] != skip.shape[2:]:
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
        return self.block(torch.cat([x, skip], dim=1))


class SegModel(nn.Module):
    """Encoder + UNet decoder with one skip per encoder level, sigmoid output."""

    def __init__(self, encoder: SwinEncoder3d, seg_config: SegConfig):
        super().__init__()
        dims = encoder.config.level_dims  # (48, 96, 192, 384)
        features = seg_config.decoder_features or dims
        if len(features) != 4:
            raise ConfigError(
                f"decoder_features must list 4 widths (one per encoder level), got {len(features)}"
            )
        self.encoder = encoder
        self.seg_config = seg_config
        drop = seg_config.dropout_rate
        self.stage4 = DecoderStage(encoder.config.bottleneck_dim, dims[3], features[3], drop)
        self.stage3 = DecoderStage(features[3], dims[2], features[2], drop)
        self.stage2 = DecoderStage(features[2], dims[1], features[1], drop)
        self.stage1 = DecoderStage(features[1], dims[0], features[0], drop)
        self.stem_up = nn.ConvTranspose3d(
            features[0], features[0], kernel_size=encoder.config.patch_size,
            stride=encoder.config.patch_size,
        )
        self.stem = ResidualBlock3d(features[0], features[0], drop)
        self.head = nn.Conv3d(features[0], seg_config.out_channels, kernel_size=1)

    @property
    def out_channels(self) -> int:
        return self.head.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        levels, bottleneck = self.encoder(x)
        y = self.stage4(bottleneck, levels[3])
        y = self.stage3(y, levels[2])
        y = self.stage2(y, levels[1])
        y = self.stage1(y, levels[0])
        y = self.stem(self.stem_up(y))
        if y.shape[2:] != x.shape[2:]:
            y = F.interpolate(y, size=x.shape[2:], mode="trilinear", align_corners=False)
        return torch.sigmoid(self.head(y))


def build_seg_model(encoder_config: EncoderConfig, seg_config: SegConfig) -> SegModel:
    return SegModel(build_encoder(encoder_config), seg_config)


def soft_dice_loss(pred_probs: torch.Tensor, target_mask: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """1 - mean over (batch, channel) of (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps)."""
    if pred_probs.shape != target_mask.shape:
        raise ValidationError(
            f"prediction {tuple(pred_probs.shape)} vs target {tuple(target_mask.shape)}"
        )
    p = pred_probs if pred_probs.dim() == 5 else pred_probs.unsqueeze(0)
    t = target_mask if target_mask.dim() == 5 else target_mask.unsqueeze(0)
    t = t.to(p.dtype)
    inter = (p * t).sum(dim=(2, 3, 4))
    denom = p.sum(dim=(2, 3, 4)) + t.sum(dim=(2, 3, 4))
    dice = (2 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def _axis_starts(dim: int, roi: int, stride: int) -> list[int]:
    starts = list(range(0, dim - roi + 1, stride))
    if starts[-1] + roi < dim:
        starts.append(dim - roi)
    return starts


def sliding_window_infer(
    model: nn.Module, volume, roi, overlap: float = 0.25, device=None
) -> np.ndarray:
    """Tile a whole volume with roi-sized windows at stride roi*(1-overlap)
    (last window clamped to the boundary), averaging overlapping predictions
    uniformly. Returns class probabilities with the input's spatial shape."""
    if not 0 <= overlap < 1:
        raise ValidationError(f"overlap must be in [0, 1), got {overlap}")
    x = torch.as_tensor(np.asarray(volume), dtype=torch.float32)
    if x.dim() != 4:
        raise ValidationError(f"expected (C, D, H, W) volume, got rank {x.dim()}")
    if device is not None:
        x = x.to(device)
    spatial = x.shape[1:]
    roi = tuple(roi)

    pads = [max(0, r - s) for r, s in zip(roi, spatial)]
    if any(pads):
        x = F.pad(x, (0, pads[2], 0, pads[1], 0, pads[0]))
    padded = x.shape[1:]

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out_channels = getattr(model, "out_channels", None)
            if out_channels is None:
                out_channels = model(x[None, :, : roi[0], : roi[1], : roi[2]]).shape[1]
            acc = torch.zeros((out_channels, *padded), dtype=torch.float32, device=x.device)
            count = torch.zeros(padded, dtype=torch.float32, device=x.device)
            for d0 in _axis_starts(padded[0], roi[0], max(1, round(roi[0] * (1 - overlap)))):
                for h0 in _axis_starts(padded[1], roi[1], max(1, round(roi[1] * (1 - overlap)))):
                    for w0 in _axis_starts(padded[2], roi[2], max(1, round(roi[2] * (1 - overlap)))):
                        window = x[None, :, d0 : d0 + roi[0], h0 : h0 + roi[1], w0 : w0 + roi[2]]
                        pred = model(window)[0]
                        acc[:, d0 : d0 + roi[0], h0 : h0 + roi[1], w0 : w0 + roi[2]] += pred
                        count[d0 : d0 + roi[0], h0 : h0 + roi[1], w0 : w0 + roi[2]] += 1
    finally:
        model.train(was_training)

    probs = acc / count.clamp(min=1)
    probs = probs[:, : spatial[0], : spatial[1], : spatial[2]]
    return probs.cpu().numpy()
