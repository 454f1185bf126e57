"""3D shifted-window transformer encoder (Tiny/Small/Big variants).

Four stages of windowed self-attention blocks at dims 48/96/192/384, a patch
merging layer after each stage (spatial dims halved, channels doubled), and a
768-dim bottleneck. For a 96^3 crop the stage outputs are 48x(48^3),
96x(24^3), 192x(12^3), 384x(6^3) with bottleneck 768x(3^3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised for invalid encoder/decoder configurations."""


class ShapeError(ValueError):
    """Raised when input dims are incompatible with the architecture."""


MASK_FILL = -100.0  # large negative bias; softmax weight < 4e-44

VARIANT_DEPTHS = {
    "tiny": (2, 2, 2, 2),
    "small": (2, 2, 6, 2),
    "big": (2, 2, 18, 2),
}


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 2
    patch_size: tuple[int, int, int] = (2, 2, 2)
    embed_dim: int = 48
    depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (3, 6, 12, 24)
    window: tuple[int, int, int] = (7, 7, 7)
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    variant_name: str = "tiny"

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError(
                f"depths/heads must have 4 entries, got {len(self.depths)}/{len(self.heads)}"
            )
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if any(d < 1 for d in self.depths) or any(h < 1 for h in self.heads):
            raise ConfigError("depths and heads must be positive")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ConfigError(f"level {i + 1} dim {self.embed_dim * 2**i} not divisible by {h} heads")

    @classmethod
    def variant(cls, name: str, in_channels: int = 2, **overrides) -> "EncoderConfig":
        key = name.lower()
        if key not in VARIANT_DEPTHS:
            raise ConfigError(f"unknown variant {name!r}, expected one of {sorted(VARIANT_DEPTHS)}")
        return cls(
            in_channels=in_channels, depths=VARIANT_DEPTHS[key], variant_name=key, **overrides
        )

    @property
    def level_dims(self) -> tuple[int, int, int, int]:
        return tuple(self.embed_dim * 2**i for i in range(4))

    @property
    def bottleneck_dim(self) -> int:
        return self.embed_dim * 16


def window_partition(x: torch.Tensor, window) -> torch.Tensor:
    """(B, D, H, W, C) -> (B * nW, wd * wh * ww, C). Dims must be window multiples."""
    b, d, h, w, c = x.shape
    wd, wh, ww = window
    if d % wd or h % wh or w % ww:
        raise ShapeError(f"grid {(d, h, w)} not a multiple of window {tuple(window)}")
    x = x.view(b, d // wd, wd, h // wh, wh, w // ww, ww, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wd * wh * ww, c)


def window_reverse(windows: torch.Tensor, window, grid_dims) -> torch.Tensor:
    """Inverse of window_partition back to (B, D, H, W, C)."""
    d, h, w = grid_dims
    wd, wh, ww = window
    n_windows = (d // wd) * (h // wh) * (w // ww)
    b = windows.shape[0] // n_windows
    x = windows.view(b, d // wd, h // wh, w // ww, wd, wh, ww, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, -1)


def _axis_slices(window: int, shift: int):
    if shift == 0:
        return (slice(None),)
    return (slice(0, -window), slice(-window, -shift), slice(-shift, None))


def compute_attention_mask(grid_dims, window, shift, device=None) -> torch.Tensor:
    """Additive attention bias for shifted windows on a (padded) token grid.

    Token pairs that originate from different pre-shift regions get a large
    negative bias; with zero shift the mask is all zeros. Shape (nW, N, N)
    with N = prod(window).
    """
    for s, w in zip(shift, window):
        if not 0 <= s < w:
            raise ShapeError(f"shift {tuple(shift)} must be in [0, window) per axis")
    n = int(math.prod(window))
    n_windows = int(math.prod(g // w for g, w in zip(grid_dims, window)))
    if all(s == 0 for s in shift):
        return torch.zeros((n_windows, n, n), device=device)

    region = torch.zeros((1, *grid_dims, 1), device=device)
    cnt = 0
    for sd in _axis_slices(window[0], shift[0]):
        for sh in _axis_slices(window[1], shift[1]):
            for sw in _axis_slices(window[2], shift[2]):
                region[:, sd, sh, sw, :] = cnt
                cnt += 1
    region_windows = window_partition(region, window).squeeze(-1)  # (nW, N)
    diff = region_windows.unsqueeze(1) - region_windows.unsqueeze(2)
    return torch.where(diff != 0, torch.full_like(diff, MASK_FILL), torch.zeros_like(diff))


class WindowAttention3d(nn.Module):
    """Multi-head self-attention within 3D windows, with a learned per-head
    relative position bias over the (2wd-1)(2wh-1)(2ww-1) offset table."""

    def __init__(self, dim: int, window, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        self.dim = dim
        self.window = tuple(window)
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        table_size = math.prod(2 * w - 1 for w in self.window)
        self.relative_position_bias_table = nn.Parameter(torch.zeros(table_size, num_heads))

        coords = torch.stack(
            torch.meshgrid(*(torch.arange(w) for w in self.window), indexing="ij")
        ).flatten(1)  # (3, N)
        rel = coords[:, :, None] - coords[:, None, :]  # (3, N, N)
        rel = rel.permute(1, 2, 0).contiguous()
        rel[:, :, 0] += self.window[0] - 1
        rel[:, :, 1] += self.window[1] - 1
        rel[:, :, 2] += self.window[2] - 1
        rel[:, :, 0] *= (2 * self.window[1] - 1) * (2 * self.window[2] - 1)
        rel[:, :, 1] *= 2 * self.window[2] - 1
        self.register_buffer("relative_position_index", rel.sum(-1), persistent=False)

        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape  # (B*nW, N, C)
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = bias.view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            n_windows = mask.shape[0]
            attn = attn.view(bw // n_windows, n_windows, self.num_heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)

        x = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock3d(nn.Module):
    """Pre-norm transformer block with (shifted-)window attention.

    Grids that are not window multiples are zero padded before partitioning
    and cropped back after; the shifted-window region mask is computed on the
    padded grid.
    """

    def __init__(self, dim, num_heads, window, shift, mlp_ratio=4.0, qkv_bias=True):
        super().__init__()
        self.window = tuple(window)
        self.shift = tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, window, num_heads, qkv_bias=qkv_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def _effective(self, grid_dims):
        # the window is fixed (the bias table depends on it); shifting is
        # pointless on axes the grid does not exceed one window
        shift = tuple(
            0 if g <= w else s for s, w, g in zip(self.shift, self.window, grid_dims)
        )
        return self.window, shift

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        window, shift = self._effective((d, h, w))

        shortcut = x
        x = self.norm1(x)

        pd = (window[0] - d % window[0]) % window[0]
        ph = (window[1] - h % window[1]) % window[1]
        pw = (window[2] - w % window[2]) % window[2]
        if pd or ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph, 0, pd))
        dims_p = (d + pd, h + ph, w + pw)

        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
            mask = compute_attention_mask(dims_p, window, shift, device=x.device)
        else:
            mask = None

        windows = window_partition(x, window)
        windows = self.attn(windows, mask=mask)
        x = window_reverse(windows, window, dims_p)

        if any(shift):
            x = torch.roll(x, shifts=tuple(shift), dims=(1, 2, 3))
        if pd or ph or pw:
            x = x[:, :d, :h, :w, :]

        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging3d(nn.Module):
    """Concatenate 2x2x2 neighbourhoods and project 8C -> 2C (odd dims are
    zero padded, so arbitrarily small grids still merge)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        if d % 2 or h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2, 0, d % 2))
        octants = [
            x[:, i::2, j::2, k::2, :] for i in (0, 1) for j in (0, 1) for k in (0, 1)
        ]
        x = torch.cat(octants, dim=-1)
        return self.reduction(self.norm(x))


class PatchEmbed3d(nn.Module):
    def __init__(self, in_channels: int, embed_dim: int, patch_size):
        super().__init__()
        self.patch_size = tuple(patch_size)
        self.proj = nn.Conv3d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)

    @property
    def in_channels(self) -> int:
        return self.proj.in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spatial = x.shape[2:]
        if any(s % p for s, p in zip(spatial, self.patch_size)):
            raise ShapeError(
                f"input spatial dims {tuple(spatial)} must be divisible by patch size "
                f"{self.patch_size}"
            )
        return self.proj(x)  # (B, embed, D/p, H/p, W/p)


class SwinEncoder3d(nn.Module):
    """The full 4-stage encoder. ``forward`` returns the per-stage feature
    grids (before each merge) plus the bottleneck after the final merge."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed3d(config.in_channels, config.embed_dim, config.patch_size)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for level in range(4):
            dim = config.embed_dim * 2**level
            blocks = nn.ModuleList(
                SwinBlock3d(
                    dim=dim,
                    num_heads=config.heads[level],
                    window=config.window,
                    shift=(0, 0, 0)
                    if i % 2 == 0
                    else tuple(w // 2 for w in config.window),
                    mlp_ratio=config.mlp_ratio,
                    qkv_bias=config.qkv_bias,
                )
                for i in range(config.depths[level])
            )
            self.stages.append(blocks)
            self.merges.append(PatchMerging3d(dim))
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # attention bias tables get their own init in WindowAttention3d

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        x = self.patch_embed(x)
        x = x.permute(0, 2, 3, 4, 1)  # channels-last for window ops
        levels = []
        for blocks, merge in zip(self.stages, self.merges):
            for block in blocks:
                x = block(x)
            levels.append(x.permute(0, 4, 1, 2, 3).contiguous())
            x = merge(x)
        bottleneck = x.permute(0, 4, 1, 2, 3).contiguous()
        return levels, bottleneck


def build_encoder(config: EncoderConfig) -> SwinEncoder3d:
    return SwinEncoder3d(config)


def count_parameters(module: nn.Module) -> int:
    """Exact count of trainable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
