"""Experiment config files: JSON blocks {data, phantom, encoder, augment,
ssl, seg, train, transfer}, dotted-path overrides, strict key checking."""

from __future__ import annotations

import json
from pathlib import Path

from .augment import AugmentConfig
from .phantom import PhantomSpec
from .segmodel import SegConfig
from .sslheads import SSLLossWeights
from .swin3d import ConfigError, EncoderConfig
from .train import TrainConfig, PRESETS

_KNOWN_KEYS = {
    "data": {"manifest", "root", "val_manifest", "val_fraction", "keep_channels"},
    "phantom": {
        "grid", "n_modalities", "modality_names", "diseased", "n_classes", "n_lesions",
        "lesion_radius", "lesion_delta", "noise_sigma", "contrast_coeffs",
        "n_structures", "spacing", "seed", "n_subjects",
    },
    "encoder": {
        "variant", "in_channels", "embed_dim", "patch_size", "depths", "heads",
        "window", "mlp_ratio", "qkv_bias",
    },
    "augment": {"crop_size", "cutout_ratio", "cutout_blocks", "rotation_enabled"},
    "ssl": {"weights", "temperature", "projection_dim"},
    "seg": {"out_channels", "dropout", "roi", "overlap", "threshold", "connectivity"},
    "train": {
        "preset", "stage", "lr_peak", "warmup_steps", "total_steps", "batch_size",
        "weight_decay", "betas", "dropout", "grad_clip", "val_every", "seed",
    },
    "transfer": {"init_from", "strict_encoder", "init_seed"},
    "fewshot": {"fractions", "n_repeats", "test_fraction"},
    "cv": {"k", "splits_file"},
}


def _check_keys(block_name: str, block: dict) -> None:
    unknown = set(block) - _KNOWN_KEYS[block_name]
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in config block {block_name!r}; "
            f"accepted: {sorted(_KNOWN_KEYS[block_name])}"
        )


class ExperimentConfig:
    """Parsed config file with typed accessors for each module's config."""

    def __init__(self, blocks: dict):
        unknown = set(blocks) - set(_KNOWN_KEYS)
        if unknown:
            raise ConfigError(
                f"unknown config block(s) {sorted(unknown)}; accepted: {sorted(_KNOWN_KEYS)}"
            )
        for name, block in blocks.items():
            if not isinstance(block, dict):
                raise ConfigError(f"config block {name!r} must be an object")
            _check_keys(name, block)
        self.blocks = blocks

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        blocks = json.loads(Path(path).read_text())
        for item in overrides:
            blocks = apply_override(blocks, item)
        return cls(blocks)

    def block(self, name: str) -> dict:
        return dict(self.blocks.get(name, {}))

    def encoder_config(self, in_channels: int | None = None) -> EncoderConfig:
        block = self.block("encoder")
        variant = block.pop("variant", "tiny")
        if in_channels is not None:
            block["in_channels"] = in_channels
        for key in ("patch_size", "depths", "heads", "window"):
            if key in block:
                block[key] = tuple(block[key])
        if "depths" in block:
            return EncoderConfig(variant_name=variant, **block)
        return EncoderConfig.variant(variant, **block)

    def augment_config(self) -> AugmentConfig:
        block = self.block("augment")
        for key in ("crop_size", "cutout_ratio", "cutout_blocks"):
            if key in block:
                block[key] = tuple(block[key])
        return AugmentConfig(**block)

    def ssl_weights(self) -> SSLLossWeights:
        block = self.block("ssl")
        weights = block.get("weights", [1.0, 1.0, 1.0])
        return SSLLossWeights(
            inpaint=weights[0], rotation=weights[1], contrast=weights[2],
            temperature=block.get("temperature", 0.5),
        )

    def projection_dim(self) -> int:
        return int(self.block("ssl").get("projection_dim", 512))

    def seg_config(self) -> SegConfig:
        block = self.block("seg")
        return SegConfig(
            out_channels=block.get("out_channels", 1),
            dropout_rate=block.get("dropout", 0.1),
        )

    def seg_roi(self) -> tuple[int, int, int]:
        return tuple(self.block("seg").get("roi", (64, 64, 64)))

    def train_config(self, **extra) -> TrainConfig:
        block = self.block("train")
        preset = block.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown train preset {preset!r}; available: {sorted(PRESETS)}")
        base = dict(PRESETS[preset]) if preset else {}
        base.pop("in_channels", None)
        base.pop("dropout", None)
        base.update(block)
        base.update(extra)
        if "betas" in base:
            base["betas"] = tuple(base["betas"])
        return TrainConfig(**base)

    def phantom_spec(self) -> tuple[PhantomSpec, int]:
        block = self.block("phantom")
        n_subjects = int(block.pop("n_subjects", 8))
        for key in ("grid", "n_lesions", "lesion_radius", "spacing", "modality_names"):
            if key in block:
                block[key] = tuple(block[key])
        if "contrast_coeffs" in block:
            block["contrast_coeffs"] = tuple(tuple(c) for c in block["contrast_coeffs"])
        return PhantomSpec(**block), n_subjects

    def resolved(self) -> dict:
        return json.loads(json.dumps(self.blocks))


def parse_override(item: str) -> tuple[list[str], object]:
    """Parse ``a.b.c=value``; the value is JSON if it parses, else a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like block.key=value")
    dotted, raw = item.split("=", 1)
    path = dotted.strip().split(".")
    if len(path) < 2 or not all(path):
        raise ConfigError(f"override path {dotted!r} must be block.key[...]")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_override(blocks: dict, item: str) -> dict:
    path, value = parse_override(item)
    blocks = json.loads(json.dumps(blocks))  # deep copy, keeps overrides last-wins
    node = blocks
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends through a non-object")
    node[path[-1]] = value
    return blocks
