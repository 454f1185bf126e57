"""Stochastic augmentations and self-supervised view construction.

All functions operate on (C, D, H, W) float32 arrays, apply identically
across channels, and are deterministic given their seed or Generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import ValidationError


@dataclass
class AugmentConfig:
    crop_size: tuple[int, int, int] = (96, 96, 96)
    cutout_ratio: tuple[float, float] = (0.2, 0.4)
    cutout_blocks: tuple[int, int] = (2, 6)
    rotation_enabled: bool = True

    def __post_init__(self):
        lo, hi = self.cutout_ratio
        if lo < 0 or hi < lo or hi >= 1:
            raise ValidationError(f"cutout_ratio must satisfy 0 <= lo <= hi < 1, got {self.cutout_ratio}")
        if self.cutout_blocks[0] < 1 or self.cutout_blocks[1] < self.cutout_blocks[0]:
            raise ValidationError(f"bad cutout_blocks range {self.cutout_blocks}")


@dataclass
class SSLView:
    """One augmented view: the corrupted input, its pre-cutout reconstruction
    target, the cutout mask (True where erased) and the rotation class."""

    view: np.ndarray
    target: np.ndarray
    cutout_mask: np.ndarray
    rotation_label: int


@dataclass
class SSLSample:
    views: tuple[SSLView, SSLView]
    subject_id: str = ""


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def pad_to_size(array: np.ndarray, size) -> np.ndarray:
    """Symmetric zero padding of the spatial axes up to ``size``."""
    pads = [(0, 0)]
    for dim, want in zip(array.shape[1:], size):
        extra = max(0, want - dim)
        pads.append((extra // 2, extra - extra // 2))
    if all(p == (0, 0) for p in pads):
        return array
    return np.pad(array, pads, mode="constant")


def random_crop(array: np.ndarray, size, seed) -> np.ndarray:
    """Contiguous random crop of all channels; zero-pads dims smaller than size."""
    rng = _as_rng(seed)
    array = pad_to_size(array, size)
    origin = [int(rng.integers(0, dim - want + 1)) for dim, want in zip(array.shape[1:], size)]
    d, h, w = origin
    sd, sh, sw = size
    return array[:, d : d + sd, h : h + sh, w : w + sw].copy()


def random_crop_pair(image: np.ndarray, mask: np.ndarray, size, seed):
    """Crop an image and its label mask at the same origin."""
    rng = _as_rng(seed)
    image = pad_to_size(image, size)
    mask = pad_to_size(mask, size)
    origin = [int(rng.integers(0, dim - want + 1)) for dim, want in zip(image.shape[1:], size)]
    d, h, w = origin
    sd, sh, sw = size
    sl = np.s_[:, d : d + sd, h : h + sh, w : w + sw]
    return image[sl].copy(), mask[sl].copy()


def inner_cutout(sub_volume: np.ndarray, ratio_range, n_blocks_range, seed):
    """Erase random interior cuboids (set to 0) across all channels.

    The total erased fraction targets a uniform draw from ``ratio_range``;
    block overlap can undershoot by up to one block's volume. Cuboids never
    touch the one-voxel border shell. Returns (corrupted, spatial bool mask).
    """
    rng = _as_rng(seed)
    spatial = sub_volume.shape[1:]
    mask = np.zeros(spatial, dtype=bool)
    target = float(rng.uniform(ratio_range[0], ratio_range[1]))
    if target <= 0 or min(spatial) < 3:
        # nothing to erase, or no interior voxels exist at all
        return sub_volume.copy(), mask

    n_blocks = int(rng.integers(n_blocks_range[0], n_blocks_range[1] + 1))
    total_vox = int(np.prod(spatial))
    per_block = target * total_vox / n_blocks
    side = round(per_block ** (1.0 / 3.0))
    for _ in range(n_blocks):
        dims = [int(np.clip(side, 1, axis_len - 2)) for axis_len in spatial]
        origin = [int(rng.integers(1, axis_len - d))
                  for axis_len, d in zip(spatial, dims)]
        d0, h0, w0 = origin
        dd, dh, dw = dims
        mask[d0 : d0 + dd, h0 : h0 + dh, w0 : w0 + dw] = True

    corrupted = sub_volume.copy()
    corrupted[:, mask] = 0.0
    return corrupted, mask


def rotate90(sub_volume: np.ndarray, k: int) -> np.ndarray:
    """Quarter-turn rotation about the depth axis (in the H/W plane)."""
    if k not in (0, 1, 2, 3):
        raise ValidationError(f"rotation class must be in 0..3, got {k}")
    if k == 0:
        return sub_volume.copy()
    return np.ascontiguousarray(np.rot90(sub_volume, k=k, axes=(2, 3)))


def make_ssl_views(volume: np.ndarray, config: AugmentConfig, seed) -> SSLSample:
    """Build two independently augmented views of one volume.

    Pipeline per view: random crop, quarter-turn rotation (label recorded),
    inner cutout (mask recorded). The pre-cutout tensor is kept as the
    inpainting target.
    """
    rng = _as_rng(seed)
    views = []
    for _ in range(2):
        crop = random_crop(volume, config.crop_size, rng)
        k = int(rng.integers(0, 4)) if config.rotation_enabled else 0
        rotated = rotate90(crop, k)
        corrupted, mask = inner_cutout(rotated, config.cutout_ratio, config.cutout_blocks, rng)
        views.append(SSLView(view=corrupted, target=rotated, cutout_mask=mask, rotation_label=k))
    return SSLSample(views=(views[0], views[1]))
