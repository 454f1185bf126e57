"""Volume data model, NIfTI I/O, normalization, cohort filtering and splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti


class ValidationError(ValueError):
    """Raised when an operation's inputs violate its contract."""


@dataclass(frozen=True)
class Volume:
    """A multi-channel 3D scalar field.

    ``voxels`` has shape (C, D, H, W); one channel per MRI modality.
    Instances are treated as immutable and are safe to share across threads.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""
    modality_names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 4:
            raise ValidationError(f"voxels must be rank 4 (C,D,H,W), got rank {v.ndim}")
        if any(d < 1 for d in v.shape):
            raise ValidationError(f"all dims must be >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("voxels contain non-finite values")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        names = tuple(self.modality_names) if self.modality_names else tuple(
            f"ch{i}" for i in range(v.shape[0])
        )
        if len(names) != v.shape[0]:
            raise ValidationError(
                f"{len(names)} modality names for {v.shape[0]} channels"
            )
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "modality_names", names)

    @property
    def n_channels(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape[1:]


@dataclass(frozen=True)
class SegMask:
    """Binary label volume, shape (K, D, H, W), one channel per class."""

    labels: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 4:
            raise ValidationError(f"labels must be rank 4 (K,D,H,W), got rank {lab.ndim}")
        uniq = np.unique(lab)
        if not np.all(np.isin(uniq, (0, 1))):
            raise ValidationError("mask labels must be binary")
        names = tuple(self.class_names) if self.class_names else tuple(
            f"class{i + 1}" for i in range(lab.shape[0])
        )
        if len(names) != lab.shape[0]:
            raise ValidationError(f"{len(names)} class names for {lab.shape[0]} classes")
        object.__setattr__(self, "labels", lab.astype(np.uint8))
        object.__setattr__(self, "class_names", names)

    @property
    def n_classes(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape[1:]


@dataclass
class SubjectRecord:
    """One cohort entry: slice counts and file locations per modality."""

    subject_id: str
    slice_counts: dict[str, int] = field(default_factory=dict)
    has_label: bool = False
    image_paths: dict[str, str] = field(default_factory=dict)
    label_path: str | None = None

    def __post_init__(self):
        if any(c < 0 for c in self.slice_counts.values()):
            raise ValidationError("slice counts must be >= 0")

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "slice_counts": dict(self.slice_counts),
            "has_label": self.has_label,
            "image_paths": dict(self.image_paths),
            "label_path": self.label_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectRecord":
        return cls(
            subject_id=d["subject_id"],
            slice_counts={k: int(v) for k, v in d.get("slice_counts", {}).items()},
            has_label=bool(d.get("has_label", False)),
            image_paths=dict(d.get("image_paths", {})),
            label_path=d.get("label_path"),
        )


@dataclass(frozen=True)
class FoldSplit:
    """K disjoint subject-id lists forming a partition of the cohort."""

    folds: tuple[tuple[str, ...], ...]
    seed: int = 0

    def __post_init__(self):
        flat = [s for fold in self.folds for s in fold]
        if len(flat) != len(set(flat)):
            raise ValidationError("folds overlap or contain duplicates")
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise ValidationError(f"fold sizes differ by more than 1: {sizes}")
        object.__setattr__(
            self, "folds", tuple(tuple(str(s) for s in f) for f in self.folds)
        )

    @property
    def k(self) -> int:
        return len(self.folds)

    def subjects(self) -> set[str]:
        return {s for fold in self.folds for s in fold}

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"folds": [list(f) for f in self.folds], "seed": self.seed}, indent=1)
        )

    @classmethod
    def load(cls, path) -> "FoldSplit":
        d = json.loads(Path(path).read_text())
        return cls(folds=tuple(tuple(f) for f in d["folds"]), seed=int(d.get("seed", 0)))


# ---------------------------------------------------------------------------
# NIfTI I/O


def read_nifti(path, subject_id: str = "", modality: str = "") -> Volume:
    """Read a 3D NIfTI-1 file into a single-channel Volume."""
    voxels, spacing = nifti.read_array(path)
    return Volume(
        voxels=voxels[None],
        spacing=spacing,
        subject_id=subject_id or Path(path).name.split(".")[0],
        modality_names=(modality,) if modality else (),
    )


def write_nifti(volume: Volume, path) -> None:
    """Write a single-channel Volume as little-endian float32 NIfTI-1."""
    if volume.n_channels != 1:
        raise ValidationError(
            f"write_nifti expects a single-channel volume, got {volume.n_channels}"
        )
    nifti.write_array(volume.voxels[0], volume.spacing, path, dtype="float32")


def stack_channels(volumes: list[Volume], subject_id: str = "") -> Volume:
    """Stack same-geometry single-channel volumes into one multi-channel Volume."""
    shapes = {v.shape for v in volumes}
    if len(shapes) != 1:
        raise ValidationError(f"channel geometries differ: {sorted(shapes)}")
    return Volume(
        voxels=np.concatenate([v.voxels for v in volumes], axis=0),
        spacing=volumes[0].spacing,
        subject_id=subject_id or volumes[0].subject_id,
        modality_names=tuple(n for v in volumes for n in v.modality_names),
    )


def mask_to_labelmap(mask: SegMask) -> np.ndarray:
    """Encode a nested multi-class mask as one int16 labelmap.

    Voxel value = number of classes containing the voxel, so decoding with
    ``labelmap >= k`` recovers class k. Valid only for nested masks (class 1
    contains class 2 contains class 3), which is what this package produces.
    """
    return mask.labels.sum(axis=0).astype(np.int16)


def labelmap_to_mask(labelmap: np.ndarray, n_classes: int, class_names=()) -> SegMask:
    lab = np.stack([(labelmap >= k + 1) for k in range(n_classes)]).astype(np.uint8)
    return SegMask(labels=lab, class_names=tuple(class_names))


def write_mask_nifti(mask: SegMask, spacing, path) -> None:
    nifti.write_array(mask_to_labelmap(mask), spacing, path, dtype="int16")


def read_mask_nifti(path, n_classes: int, class_names=()) -> SegMask:
    voxels, _ = nifti.read_array(path)
    return labelmap_to_mask(np.rint(voxels).astype(np.int16), n_classes, class_names)


def load_manifest(path) -> list[SubjectRecord]:
    return [SubjectRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_manifest(records: list[SubjectRecord], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1))


def load_subject(record: SubjectRecord, root=None) -> tuple[Volume, SegMask | None]:
    """Load all modalities of one subject (and its mask, if labeled)."""
    root = Path(root) if root is not None else Path(".")
    channels = [
        read_nifti(root / p, subject_id=record.subject_id, modality=m)
        for m, p in record.image_paths.items()
    ]
    volume = stack_channels(channels, subject_id=record.subject_id)
    mask = None
    if record.has_label and record.label_path:
        voxels, _ = nifti.read_array(root / record.label_path)
        labelmap = np.rint(voxels).astype(np.int16)
        mask = labelmap_to_mask(labelmap, n_classes=int(labelmap.max()) if labelmap.max() > 0 else 1)
    return volume, mask


# ---------------------------------------------------------------------------
# Normalization and cohort operations


def normalize_intensity(volume: Volume, eps: float = 1e-8) -> Volume:
    """Per-channel standardization over nonzero (foreground) voxels.

    Zero background voxels stay zero, so the operation is idempotent within
    float tolerance. Constant channels map to all zeros via the eps guard.
    """
    out = np.zeros_like(volume.voxels)
    for c in range(volume.n_channels):
        chan = volume.voxels[c]
        fg = chan != 0
        if not fg.any():
            continue
        vals = chan[fg]
        mean = vals.mean(dtype=np.float64)
        std = vals.std(dtype=np.float64)
        out[c][fg] = ((vals - mean) / (std + eps)).astype(np.float32)
    return Volume(
        voxels=out,
        spacing=volume.spacing,
        subject_id=volume.subject_id,
        modality_names=volume.modality_names,
    )


def filter_min_slices(
    records: list[SubjectRecord], min_slices: int, required_modalities
) -> list[SubjectRecord]:
    """Keep records with at least ``min_slices`` slices in every required modality."""
    if min_slices < 1:
        raise ValidationError(f"min_slices must be >= 1, got {min_slices}")
    required = list(required_modalities)
    return [
        r
        for r in records
        if all(r.slice_counts.get(m, -1) >= min_slices for m in required)
    ]


def make_folds(subject_ids, k: int, seed: int) -> FoldSplit:
    """Seeded shuffle then round-robin deal into k near-equal folds."""
    ids = [str(s) for s in subject_ids]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate subject ids")
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ValidationError(f"need at least {k} subjects for {k} folds, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    folds = tuple(tuple(order[i::k]) for i in range(k))
    return FoldSplit(folds=folds, seed=seed)


def subsample_fraction(subject_ids, fraction: float, seed: int) -> list[str]:
    """Seeded sample without replacement of round-half-up(fraction * N), floor 1."""
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    ids = [str(s) for s in subject_ids]
    n = max(1, math.floor(fraction * len(ids) + 0.5))
    rng = np.random.default_rng(seed)
    picks = rng.permutation(len(ids))[:n]
    return [ids[i] for i in picks]
