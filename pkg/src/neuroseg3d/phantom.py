"""Deterministic synthetic 3D brain phantoms with ground-truth masks.

Healthy phantoms are a smooth ellipsoidal "brain" with internal Gaussian
structures; diseased phantoms additionally carry bright ellipsoidal lesions
with a nested multi-class mask (class 1 contains class 2 contains class 3)
or a single class for stroke-style tasks. Everything is reproducible from
the spec seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .volumes import (
    SegMask,
    SubjectRecord,
    ValidationError,
    Volume,
    save_manifest,
    write_mask_nifti,
    write_nifti,
)


class GenerationError(RuntimeError):
    """Raised when a phantom cannot be realised (e.g. lesion placement fails)."""


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (64, 64, 64)
    n_modalities: int = 2
    modality_names: tuple[str, ...] = ()
    diseased: bool = False
    n_classes: int = 3
    n_lesions: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (4.0, 8.0)
    lesion_delta: float = 2.0
    noise_sigma: float = 0.05
    contrast_coeffs: tuple[tuple[float, float], ...] = ()
    n_structures: int = 6
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.grid) != 3 or any(g < 16 for g in self.grid):
            raise ValidationError(f"grid dims must all be >= 16, got {self.grid}")
        if self.n_modalities < 1:
            raise ValidationError("need at least one modality")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.n_lesions[0] < 0 or self.n_lesions[1] < self.n_lesions[0]:
            raise ValidationError(f"bad n_lesions range {self.n_lesions}")
        if self.lesion_radius[0] <= 0 or self.lesion_radius[1] < self.lesion_radius[0]:
            raise ValidationError(f"bad lesion_radius range {self.lesion_radius}")
        if self.lesion_radius[1] >= min(self.grid) * 0.4:
            raise ValidationError("lesion radius does not fit inside the brain ellipsoid")
        if self.diseased and self.n_classes < 1:
            raise ValidationError("diseased phantoms need n_classes >= 1")
        if not self.modality_names:
            defaults = ("T1w", "T2-FLAIR", "T1-ce", "T2w")
            self.modality_names = tuple(
                defaults[i] if i < len(defaults) else f"mod{i}" for i in range(self.n_modalities)
            )
        if not self.contrast_coeffs:
            # Distinct but fixed per-modality contrast; gain 1 +- 0.25 steps.
            self.contrast_coeffs = tuple(
                (1.0 + 0.25 * i, 0.1 * i) for i in range(self.n_modalities)
            )
        if len(self.modality_names) != self.n_modalities:
            raise ValidationError("modality_names length mismatch")
        if len(self.contrast_coeffs) != self.n_modalities:
            raise ValidationError("contrast_coeffs length mismatch")

    def to_dict(self) -> dict:
        return asdict(self)


def _ellipsoid(grid, center, radii) -> np.ndarray:
    coords = np.meshgrid(*(np.arange(g, dtype=np.float32) for g in grid), indexing="ij")
    dist2 = sum(((c - mu) / r) ** 2 for c, mu, r in zip(coords, center, radii))
    return dist2 <= 1.0


def _base_anatomy(spec: PhantomSpec, rng: np.random.Generator):
    grid = spec.grid
    center = tuple((g - 1) / 2.0 for g in grid)
    radii = tuple(0.42 * g for g in grid)
    brain = _ellipsoid(grid, center, radii)

    coords = np.meshgrid(*(np.arange(g, dtype=np.float32) for g in grid), indexing="ij")
    dist2 = sum(((c - mu) / r) ** 2 for c, mu, r in zip(coords, center, radii))
    base = np.where(brain, 1.0 - 0.3 * dist2, 0.0).astype(np.float32)

    # Internal smooth "structures": additive Gaussian bumps inside the brain.
    for _ in range(spec.n_structures):
        mu = [rng.uniform(0.3, 0.7) * g for g in grid]
        sigma = [rng.uniform(0.05, 0.15) * g for g in grid]
        amp = rng.uniform(-0.4, 0.5)
        bump = amp * np.exp(-0.5 * sum(((c - m) / s) ** 2 for c, m, s in zip(coords, mu, sigma)))
        base += bump.astype(np.float32)
    base[~brain] = 0.0
    return base, brain, coords


def _place_lesions(spec: PhantomSpec, brain, coords, rng, max_tries: int = 50):
    """Sample lesion ellipsoids fully inside the brain; nested shells per class."""
    n = int(rng.integers(spec.n_lesions[0], spec.n_lesions[1] + 1))
    class_masks = np.zeros((spec.n_classes,) + spec.grid, dtype=np.uint8)
    lesion_union = np.zeros(spec.grid, dtype=bool)
    for _ in range(n):
        for attempt in range(max_tries):
            radii = rng.uniform(spec.lesion_radius[0], spec.lesion_radius[1], size=3)
            lo = [1.5 * r for r in radii]
            if any(l >= g - 1 - l for l, g in zip(lo, spec.grid)):
                continue  # no interior center exists for these radii
            center = [rng.uniform(l, g - 1 - l) for l, g in zip(lo, spec.grid)]
            dist2 = sum(((c - mu) / r) ** 2 for c, mu, r in zip(coords, center, radii))
            lesion = dist2 <= 1.0
            if lesion.any() and bool(np.all(brain[lesion])):
                break
        else:
            raise GenerationError(f"could not place a lesion inside the brain after {max_tries} tries")
        lesion_union |= lesion
        for k in range(spec.n_classes):
            # class k+1 = lesion shrunk to (K-k)/K of its radii, so masks nest
            shrink = (spec.n_classes - k) / spec.n_classes
            class_masks[k] |= (dist2 <= shrink**2).astype(np.uint8)
    if n >= 1 and not lesion_union.any():
        raise GenerationError("lesion sampling produced an empty mask")
    return class_masks, lesion_union


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, SegMask | None]:
    """Render one phantom subject; bit-identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    base, brain, coords = _base_anatomy(spec, rng)

    mask = None
    if spec.diseased:
        class_masks, lesion_union = _place_lesions(spec, brain, coords, rng)
        # graded shells: deeper nested classes are brighter, so every class
        # boundary is intensity-separable, not just the outer rim
        depth = class_masks.sum(axis=0).astype(np.float32)
        base = base + spec.lesion_delta * np.where(depth > 0, 1.0 + 0.5 * (depth - 1.0), 0.0)
        mask = SegMask(labels=class_masks)

    channels = []
    for gain, offset in spec.contrast_coeffs:
        chan = gain * base + offset
        if spec.noise_sigma > 0:
            chan = chan + rng.normal(0.0, spec.noise_sigma, size=spec.grid).astype(np.float32)
        chan[~brain] = 0.0
        channels.append(chan.astype(np.float32))

    volume = Volume(
        voxels=np.stack(channels),
        spacing=spec.spacing,
        subject_id=f"phantom-{spec.seed:06d}",
        modality_names=spec.modality_names,
    )
    return volume, mask


def generate_dataset(spec_template: PhantomSpec, n_subjects: int, out_dir) -> list[SubjectRecord]:
    """Write ``n_subjects`` phantoms (one NIfTI per modality, one mask file if
    diseased) plus a JSON cohort manifest. Subject seeds are seed + index."""
    if n_subjects < 1:
        raise ValidationError(f"n_subjects must be >= 1, got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for idx in range(n_subjects):
        spec = PhantomSpec(**{**spec_template.to_dict(), "seed": spec_template.seed + idx})
        volume, mask = generate_phantom(spec)
        sid = volume.subject_id
        image_paths = {}
        for c, name in enumerate(volume.modality_names):
            fname = f"{sid}_{name.replace('/', '-')}.nii.gz"
            write_nifti(
                Volume(volume.voxels[c : c + 1], volume.spacing, sid, (name,)),
                out_dir / fname,
            )
            image_paths[name] = fname
        label_path = None
        if mask is not None:
            label_path = f"{sid}_mask.nii.gz"
            write_mask_nifti(mask, volume.spacing, out_dir / label_path)
        records.append(
            SubjectRecord(
                subject_id=sid,
                slice_counts={m: volume.shape[0] for m in volume.modality_names},
                has_label=mask is not None,
                image_paths=image_paths,
                label_path=label_path,
            )
        )
    save_manifest(records, out_dir / "manifest.json")
    return records


def dataset_checksum(out_dir) -> str:
    """SHA-256 over all NIfTI payloads in a dataset directory (regeneration check)."""
    h = hashlib.sha256()
    for p in sorted(Path(out_dir).glob("*.nii*")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
