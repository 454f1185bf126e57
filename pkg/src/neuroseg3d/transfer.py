"""Checkpointing and stage-to-stage weight transfer.

Checkpoint container (format version 1): a STORED zip archive holding
``manifest.json`` (version, config snapshot, step, seed, tensor index) and
``weights.bin`` (concatenated little-endian float32 payloads at the offsets
the manifest records). Zip timestamps are pinned so identical states produce
identical files. See docs/checkpoint-format.md.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .swin3d import SwinEncoder3d
from .volumes import ValidationError

FORMAT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    format_version: int
    config: dict
    step: int
    seed: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TransferReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)


def _named_float32(model: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise CheckpointError(f"parameter {name} is {arr.dtype}, only float32 is stored")
        out[name] = np.ascontiguousarray(arr)
    return out


def save_checkpoint(model: nn.Module, meta: dict, path) -> None:
    """Write all model parameters plus run metadata; loading reproduces every
    tensor bit-exactly."""
    weights = _named_float32(model)
    index = {}
    offset = 0
    blobs = []
    for name, arr in weights.items():
        nbytes = arr.size * 4
        index[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": nbytes}
        blobs.append(arr.astype("<f4", copy=False).tobytes())
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": meta.get("config", {}),
        "step": int(meta.get("step", 0)),
        "seed": int(meta.get("seed", 0)),
        "tensors": index,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH),
                    json.dumps(manifest, sort_keys=True))
        zf.writestr(zipfile.ZipInfo("weights.bin", date_time=_ZIP_EPOCH), b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "manifest.json" not in names or "weights.bin" not in names:
                raise CheckpointError(f"{path}: corrupt archive, missing manifest or weights")
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("weights.bin")
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: corrupt archive ({exc})") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint format version {version!r}")

    weights = {}
    for name, entry in manifest["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start)
        weights[name] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        format_version=version,
        config=manifest.get("config", {}),
        step=int(manifest.get("step", 0)),
        seed=int(manifest.get("seed", 0)),
        weights=weights,
    )


def restore_model(model: nn.Module, checkpoint: Checkpoint) -> None:
    """Bit-exact full restore; name or shape mismatches name the offender."""
    params = dict(model.named_parameters())
    for name in params:
        if name not in checkpoint.weights:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
    for name in checkpoint.weights:
        if name not in params:
            raise CheckpointError(f"checkpoint has unexpected tensor {name}")
    with torch.no_grad():
        for name, p in params.items():
            arr = checkpoint.weights[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))


def transfer_encoder(
    checkpoint: Checkpoint, target_model: nn.Module, strict_encoder: bool = True
) -> TransferReport:
    """Copy encoder weights from a checkpoint into ``target_model.encoder``.

    Non-encoder tensors in the checkpoint (SSL heads, decoders) are reported
    as skipped; the target's decoder/head weights keep their fresh init. In
    strict mode any missing or mismatched encoder tensor is an error.
    """
    if not hasattr(target_model, "encoder"):
        raise ValidationError("target model has no encoder submodule")
    report = TransferReport()
    encoder_params = dict(target_model.encoder.named_parameters())
    consumed = set()
    with torch.no_grad():
        for name, p in encoder_params.items():
            full = f"encoder.{name}"
            arr = checkpoint.weights.get(full)
            if arr is None:
                if strict_encoder:
                    raise CheckpointError(f"encoder tensor {full} missing from checkpoint")
                report.missing.append(full)
                continue
            if tuple(arr.shape) != tuple(p.shape):
                if strict_encoder:
                    raise CheckpointError(
                        f"encoder tensor {full}: checkpoint shape {tuple(arr.shape)} "
                        f"vs model shape {tuple(p.shape)} (variant mismatch?)"
                    )
                report.missing.append(full)
                continue
            p.copy_(torch.from_numpy(arr))
            consumed.add(full)
            report.loaded.append(full)
    report.skipped = sorted(set(checkpoint.weights) - consumed)
    return report


def transfer_matching(checkpoint: Checkpoint, target_model: nn.Module) -> TransferReport:
    """Copy every checkpoint tensor whose name and shape match the target.

    Used for proxy-task heads across stage boundaries: heads that still fit
    are transferred, anything else stays freshly initialized.
    """
    report = TransferReport()
    params = dict(target_model.named_parameters())
    with torch.no_grad():
        for name, arr in checkpoint.weights.items():
            p = params.get(name)
            if p is None or tuple(arr.shape) != tuple(p.shape):
                report.skipped.append(name)
                continue
            p.copy_(torch.from_numpy(arr))
            report.loaded.append(name)
    return report


def _resolve_encoder(model: nn.Module) -> SwinEncoder3d:
    enc = getattr(model, "encoder", model)
    if not isinstance(enc, SwinEncoder3d):
        raise ValidationError("model does not contain a Swin encoder")
    return enc


def _replace_patch_conv(encoder: SwinEncoder3d, new_weight: torch.Tensor, bias: torch.Tensor) -> None:
    old = encoder.patch_embed.proj
    new_conv = nn.Conv3d(
        new_weight.shape[1], old.out_channels,
        kernel_size=old.kernel_size, stride=old.stride,
    )
    with torch.no_grad():
        new_conv.weight.copy_(new_weight)
        new_conv.bias.copy_(bias)
    encoder.patch_embed.proj = new_conv
    encoder.config = dataclasses.replace(encoder.config, in_channels=new_weight.shape[1])


def expand_input_channels(model: nn.Module, new_total: int, init_seed: int = 0) -> nn.Module:
    """Grow the patch-embedding convolution to ``new_total`` input channels.

    Existing channel slices are preserved bit-exactly; the new slices are
    Kaiming fan-in normal (std = sqrt(2 / fan_in), fan_in = new channels x
    kernel volume). Every other layer is untouched, so zero-fed new channels
    leave the network output unchanged.
    """
    encoder = _resolve_encoder(model)
    conv = encoder.patch_embed.proj
    current = conv.in_channels
    if new_total <= current:
        raise ValidationError(f"new_total must exceed current {current} channels, got {new_total}")

    n_new = new_total - current
    kernel_volume = math.prod(conv.kernel_size)
    fan_in = n_new * kernel_volume
    std = math.sqrt(2.0 / fan_in)
    gen = torch.Generator().manual_seed(init_seed)
    new_slice = torch.empty(conv.out_channels, n_new, *conv.kernel_size).normal_(0.0, std, generator=gen)
    new_weight = torch.cat([conv.weight.detach(), new_slice], dim=1)
    _replace_patch_conv(encoder, new_weight, conv.bias.detach())
    return model


def restrict_input_channels(model: nn.Module, keep_indices) -> nn.Module:
    """Drop input channels, keeping the listed ones (bit-exact slices).

    The restricted model on x equals the original on x with the dropped
    channels zero-filled.
    """
    encoder = _resolve_encoder(model)
    conv = encoder.patch_embed.proj
    keep = list(keep_indices)
    if not keep:
        raise ValidationError("keep_indices must be nonempty")
    if len(set(keep)) != len(keep):
        raise ValidationError(f"keep_indices contains duplicates: {keep}")
    if any(i < 0 or i >= conv.in_channels for i in keep):
        raise ValidationError(f"keep_indices {keep} out of range for {conv.in_channels} channels")

    new_weight = conv.weight.detach()[:, keep].clone()
    _replace_patch_conv(encoder, new_weight, conv.bias.detach())
    return model
