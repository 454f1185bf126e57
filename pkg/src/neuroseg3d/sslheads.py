"""Proxy-task heads and losses for self-supervised pretraining.

Three tasks share one encoder bottleneck: masked-volume inpainting (a
conv + trilinear-upsample reconstruction stack back to input resolution),
4-way rotation classification, and contrastive coding into a 512-d
L2-normalised embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import SSLSample
from .swin3d import SwinEncoder3d
from .volumes import ValidationError


@dataclass
class SSLLossWeights:
    inpaint: float = 1.0
    rotation: float = 1.0
    contrast: float = 1.0
    temperature: float = 0.5

    def __post_init__(self):
        if min(self.inpaint, self.rotation, self.contrast) < 0:
            raise ValidationError("loss weights must be nonnegative")
        if max(self.inpaint, self.rotation, self.contrast) == 0:
            raise ValidationError("at least one loss weight must be positive")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")


@dataclass
class SSLOutputs:
    reconstruction: torch.Tensor  # (B, C, D, H, W)
    rotation_logits: torch.Tensor  # (B, 4)
    embedding: torch.Tensor  # (B, 512), unit norm


def _recon_block(c_in: int, c_out: int) -> nn.Sequential:
    # upsample before the norm so 1-voxel bottlenecks stay normalisable
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel_size=3, stride=1, padding=1),
        nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False),
        nn.InstanceNorm3d(c_out),
        nn.LeakyReLU(),
    )


class SSLHeads(nn.Module):
    """Heads consuming the (B, dim, d, h, w) encoder bottleneck."""

    def __init__(self, bottleneck_dim: int = 768, out_channels: int = 1, embedding_dim: int = 512):
        super().__init__()
        if bottleneck_dim % 16:
            raise ValidationError(f"bottleneck dim {bottleneck_dim} must be divisible by 16")
        dim = bottleneck_dim
        self.rotation_head = nn.Linear(dim, 4)
        self.contrastive_head = nn.Linear(dim, embedding_dim)
        self.recon_stack = nn.Sequential(
            _recon_block(dim, dim // 2),
            _recon_block(dim // 2, dim // 4),
            _recon_block(dim // 4, dim // 8),
            _recon_block(dim // 8, dim // 16),
            _recon_block(dim // 16, dim // 16),
        )
        self.recon_out = nn.Conv3d(dim // 16, out_channels, kernel_size=1, stride=1)

    @property
    def out_channels(self) -> int:
        return self.recon_out.out_channels

    def rebuild_recon_out(self, out_channels: int, seed: int = 0) -> None:
        """Re-create the final reconstruction conv for a new modality count
        (used when a pretrained model moves to a dataset with different
        channels; the rest of the head transfers unchanged)."""
        gen = torch.Generator().manual_seed(seed)
        conv = nn.Conv3d(self.recon_out.in_channels, out_channels, kernel_size=1, stride=1)
        with torch.no_grad():
            fan_in = conv.in_channels
            conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            conv.bias.zero_()
        self.recon_out = conv

    def forward(self, bottleneck: torch.Tensor, out_spatial) -> SSLOutputs:
        pooled = bottleneck.mean(dim=(2, 3, 4))  # (B, dim)
        logits = self.rotation_head(pooled)
        embedding = F.normalize(self.contrastive_head(pooled), dim=-1)

        rec = self.recon_stack(bottleneck)
        if tuple(rec.shape[2:]) != tuple(out_spatial):
            rec = F.interpolate(rec, size=tuple(out_spatial), mode="trilinear", align_corners=False)
        rec = self.recon_out(rec)
        return SSLOutputs(reconstruction=rec, rotation_logits=logits, embedding=embedding)


class SSLModel(nn.Module):
    """Encoder plus proxy-task heads — the unit that gets pretrained."""

    def __init__(self, encoder: SwinEncoder3d, heads: SSLHeads | None = None):
        super().__init__()
        self.encoder = encoder
        self.heads = heads or SSLHeads(
            bottleneck_dim=encoder.config.bottleneck_dim,
            out_channels=encoder.config.in_channels,
        )

    def forward(self, x: torch.Tensor) -> SSLOutputs:
        _, bottleneck = self.encoder(x)
        return self.heads(bottleneck, out_spatial=x.shape[2:])


# ---------------------------------------------------------------------------
# Losses


def loss_inpaint(reconstruction: torch.Tensor, target: torch.Tensor, cutout_mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over erased voxels only; 0 for an empty mask."""
    if reconstruction.shape != target.shape:
        raise ValidationError(
            f"reconstruction {tuple(reconstruction.shape)} vs target {tuple(target.shape)}"
        )
    mask = cutout_mask.to(reconstruction.dtype)
    if mask.dim() == reconstruction.dim() - 1:
        mask = mask.unsqueeze(-4)  # insert channel axis
    n_masked = mask.sum()
    if n_masked == 0:
        return reconstruction.sum() * 0.0
    channels = reconstruction.shape[-4]
    return ((reconstruction - target).abs() * mask).sum() / (n_masked * channels)


def loss_rotation(logits: torch.Tensor, label) -> torch.Tensor:
    """Cross-entropy over the 4 quarter-turn classes."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    label = torch.as_tensor(label, device=logits.device, dtype=torch.long).reshape(-1)
    return F.cross_entropy(logits, label)


def loss_contrastive(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """NT-Xent over 2B views: positive = the paired view, negatives = the
    other 2B-2 in-batch views, cosine similarity scaled by the temperature."""
    if z1.shape != z2.shape:
        raise ValidationError("view embeddings must have identical shapes")
    b = z1.shape[0]
    if b < 2:
        raise ValidationError("contrastive loss needs batch size >= 2 (no negatives otherwise)")
    z = torch.cat([z1, z2], dim=0)  # (2B, dim)
    sim = (z @ z.t()) / temperature
    eye = torch.eye(2 * b, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, -1e9)  # anchors never match themselves
    targets = torch.cat(
        [torch.arange(b, 2 * b), torch.arange(0, b)]
    ).to(z.device)
    return F.cross_entropy(sim, targets)


@dataclass
class SSLTensorBatch:
    """Stacked, torch-ready pair of augmented views for one step."""

    view1: torch.Tensor
    view2: torch.Tensor
    target1: torch.Tensor
    target2: torch.Tensor
    mask1: torch.Tensor
    mask2: torch.Tensor
    rot1: torch.Tensor
    rot2: torch.Tensor

    def to(self, device) -> "SSLTensorBatch":
        moved = {k: v.to(device) for k, v in self.__dict__.items()}
        return SSLTensorBatch(**moved)


def stack_ssl_samples(samples: list[SSLSample]) -> SSLTensorBatch:
    def _stack(getter, dtype=torch.float32):
        return torch.stack([torch.as_tensor(getter(s), dtype=dtype) for s in samples])

    return SSLTensorBatch(
        view1=_stack(lambda s: s.views[0].view),
        view2=_stack(lambda s: s.views[1].view),
        target1=_stack(lambda s: s.views[0].target),
        target2=_stack(lambda s: s.views[1].target),
        mask1=_stack(lambda s: s.views[0].cutout_mask, dtype=torch.bool),
        mask2=_stack(lambda s: s.views[1].cutout_mask, dtype=torch.bool),
        rot1=torch.tensor([s.views[0].rotation_label for s in samples], dtype=torch.long),
        rot2=torch.tensor([s.views[1].rotation_label for s in samples], dtype=torch.long),
    )


def ssl_step(
    model: SSLModel, batch: SSLTensorBatch, weights: SSLLossWeights
) -> tuple[torch.Tensor, dict[str, float]]:
    """Forward both views and combine the three proxy losses.

    total = w_inpaint * L_inpaint + w_rotation * L_rotation
          + w_contrast * L_contrast, with per-task values returned for logs.
    """
    out1 = model(batch.view1)
    out2 = model(batch.view2)

    zero = out1.reconstruction.sum() * 0.0
    l_inpaint = zero
    if weights.inpaint > 0:
        l_inpaint = 0.5 * (
            loss_inpaint(out1.reconstruction, batch.target1, batch.mask1)
            + loss_inpaint(out2.reconstruction, batch.target2, batch.mask2)
        )
    l_rot = zero
    if weights.rotation > 0:
        l_rot = 0.5 * (
            loss_rotation(out1.rotation_logits, batch.rot1)
            + loss_rotation(out2.rotation_logits, batch.rot2)
        )
    l_con = zero
    if weights.contrast > 0:
        l_con = loss_contrastive(out1.embedding, out2.embedding, weights.temperature)

    total = weights.inpaint * l_inpaint + weights.rotation * l_rot + weights.contrast * l_con
    parts = {
        "inpaint": float(l_inpaint.detach()),
        "rotation": float(l_rot.detach()),
        "contrast": float(l_con.detach()),
    }
    for name, value in parts.items():
        if not np.isfinite(value):
            raise RuntimeError(f"non-finite {name} loss ({value})")
    return total, parts
