"""neuroseg3d: two-stage self-supervised pretraining and fine-tuning for 3D
multimodal brain-MRI segmentation, exercised on synthetic phantom cohorts."""

__version__ = "0.1.0"
