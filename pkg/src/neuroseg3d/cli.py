"""Command-line entry point wiring config files to the pipeline stages.

Subcommands: phantom-gen, pretrain1, pretrain2, finetune, eval, cv, fewshot,
report. Every run writes a ``run_manifest.json`` (resolved config, seed,
version) into its output directory so it can be reproduced verbatim.
Failures print a machine-readable JSON envelope to stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .metrics import aggregate_report, evaluate_case
from .nifti import NiftiFormatError, UnsupportedImageError, read_array
from .phantom import GenerationError, generate_dataset
from .report import plot_fewshot, write_report
from .segmodel import build_seg_model
from .sslheads import SSLHeads, SSLModel
from .swin3d import ConfigError, ShapeError, build_encoder
from .train import (
    PipelineConfig,
    load_cohort,
    run_cv,
    run_fewshot,
    train_ssl,
    train_supervised,
)
from .transfer import (
    CheckpointError,
    expand_input_channels,
    load_checkpoint,
    restrict_input_channels,
    transfer_encoder,
    transfer_matching,
)
from .volumes import FoldSplit, ValidationError, make_folds

_HANDLED_ERRORS = (
    ConfigError,
    ValidationError,
    CheckpointError,
    GenerationError,
    NiftiFormatError,
    UnsupportedImageError,
    ShapeError,
    FileNotFoundError,
    RuntimeError,
)


def _data_root(cfg: ExperimentConfig):
    root = cfg.block("data").get("root") or os.environ.get("NEUROSEG3D_DATA_ROOT")
    return Path(root) if root else None


def _write_manifest(args, cfg: ExperimentConfig | None, out_dir, extra=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "config": cfg.resolved() if cfg else None,
        "overrides": list(getattr(args, "override", []) or []),
        "seed": getattr(args, "seed", None),
        "package_version": __version__,
    }
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, overrides=args.override or [])
    if getattr(args, "seed", None) is not None:
        blocks = cfg.blocks
        blocks.setdefault("train", {})["seed"] = args.seed
        blocks.setdefault("phantom", {})["seed"] = args.seed
        cfg = ExperimentConfig(blocks)
    return cfg


def _split_cohort(cohort, val_fraction: float, seed: int):
    if val_fraction <= 0 or len(cohort) < 2:
        return cohort, []
    n_val = max(1, round(val_fraction * len(cohort)))
    if n_val >= len(cohort):
        n_val = len(cohort) - 1
    order = np.random.default_rng(seed).permutation(len(cohort))
    val_idx = set(order[:n_val].tolist())
    train = [cohort[i] for i in range(len(cohort)) if i not in val_idx]
    val = [cohort[i] for i in sorted(val_idx)]
    return train, val


def cmd_phantom_gen(args) -> int:
    cfg = _load_config(args)
    spec, n_subjects = cfg.phantom_spec()
    records = generate_dataset(spec, n_subjects, args.out)
    _write_manifest(args, cfg, args.out, {"n_subjects": len(records)})
    print(f"wrote {len(records)} subjects to {args.out}")
    return 0


def _prepare_ssl_data(cfg: ExperimentConfig, train_cfg):
    data = cfg.block("data")
    if "manifest" not in data:
        raise ConfigError("config block 'data' needs a 'manifest' path")
    cohort = load_cohort(data["manifest"], root=_data_root(cfg))
    volumes = [volume for volume, _ in cohort]
    if data.get("val_manifest"):
        val = [v for v, _ in load_cohort(data["val_manifest"], root=_data_root(cfg))]
        return volumes, val
    return _split_cohort(volumes, data.get("val_fraction", 0.2), train_cfg.seed)


def cmd_pretrain1(args) -> int:
    cfg = _load_config(args)
    train_cfg = cfg.train_config(stage="pretrain1", out_dir=args.out)
    train_set, val_set = _prepare_ssl_data(cfg, train_cfg)

    encoder_cfg = cfg.encoder_config()
    import torch

    torch.manual_seed(train_cfg.seed)
    encoder = build_encoder(encoder_cfg)
    model = SSLModel(encoder, SSLHeads(
        bottleneck_dim=encoder_cfg.bottleneck_dim,
        out_channels=encoder_cfg.in_channels,
        embedding_dim=cfg.projection_dim(),
    ))
    _write_manifest(args, cfg, args.out)
    _, log = train_ssl(model, train_set, train_cfg, cfg.augment_config(),
                       cfg.ssl_weights(), val_dataset=val_set)
    print(f"pretrain1 done: {len(log.split_rows('train'))} steps, "
          f"final loss {log.split_rows('train')[-1].loss:.4f}")
    return 0


def _adapted_ssl_model(cfg: ExperimentConfig, args, train_cfg):
    """Build an SSL model for stage 2: restore stage-1 weights, then adapt the
    input channels (expand with fresh Kaiming slices, or drop) to the target."""
    import torch

    transfer_block = cfg.block("transfer")
    init_from = args.init_from or transfer_block.get("init_from")
    if not init_from:
        raise ConfigError("pretrain2 needs --init-from (or transfer.init_from)")
    strict = transfer_block.get("strict_encoder", True)
    if args.strict_encoder is not None:
        strict = args.strict_encoder
    init_seed = int(transfer_block.get("init_seed", train_cfg.seed))

    checkpoint = load_checkpoint(init_from)
    patch_key = "encoder.patch_embed.proj.weight"
    if patch_key not in checkpoint.weights:
        raise CheckpointError(f"{init_from}: checkpoint has no {patch_key}")
    source_channels = checkpoint.weights[patch_key].shape[1]

    target_cfg = cfg.encoder_config()
    torch.manual_seed(train_cfg.seed)
    source_encoder_cfg = dataclasses.replace(target_cfg, in_channels=source_channels)
    encoder = build_encoder(source_encoder_cfg)
    model = SSLModel(encoder, SSLHeads(
        bottleneck_dim=source_encoder_cfg.bottleneck_dim,
        out_channels=source_channels,
        embedding_dim=cfg.projection_dim(),
    ))
    transfer_encoder(checkpoint, model, strict_encoder=strict)
    transfer_matching(checkpoint, model.heads)

    target = target_cfg.in_channels
    if target > source_channels:
        expand_input_channels(model, target, init_seed=init_seed)
    elif target < source_channels:
        keep = cfg.block("data").get("keep_channels", list(range(target)))
        restrict_input_channels(model, keep)
    if target != source_channels:
        model.heads.rebuild_recon_out(target, seed=init_seed)
    return model


def cmd_pretrain2(args) -> int:
    cfg = _load_config(args)
    train_cfg = cfg.train_config(stage="pretrain2", out_dir=args.out)
    train_set, val_set = _prepare_ssl_data(cfg, train_cfg)
    model = _adapted_ssl_model(cfg, args, train_cfg)
    _write_manifest(args, cfg, args.out)
    _, log = train_ssl(model, train_set, train_cfg, cfg.augment_config(),
                       cfg.ssl_weights(), val_dataset=val_set)
    print(f"pretrain2 done: final loss {log.split_rows('train')[-1].loss:.4f}")
    return 0


def cmd_finetune(args) -> int:
    import torch

    cfg = _load_config(args)
    train_cfg = cfg.train_config(stage="finetune", out_dir=args.out)
    data = cfg.block("data")
    if "manifest" not in data:
        raise ConfigError("config block 'data' needs a 'manifest' path")
    cohort = load_cohort(data["manifest"], root=_data_root(cfg))
    if any(mask is None for _, mask in cohort):
        raise ValidationError("finetune needs a labeled cohort (masks missing)")
    train_set, val_set = _split_cohort(cohort, data.get("val_fraction", 0.2), train_cfg.seed)

    seg_cfg = dataclasses.replace(cfg.seg_config(), dropout_rate=train_cfg.dropout)
    torch.manual_seed(train_cfg.seed)
    model = build_seg_model(cfg.encoder_config(), seg_cfg)
    init_from = args.init_from or cfg.block("transfer").get("init_from")
    if init_from:
        strict = cfg.block("transfer").get("strict_encoder", True)
        if args.strict_encoder is not None:
            strict = args.strict_encoder
        report = transfer_encoder(load_checkpoint(init_from), model, strict_encoder=strict)
        print(f"transferred {len(report.loaded)} encoder tensors "
              f"({len(report.skipped)} skipped)")
    _write_manifest(args, cfg, args.out)
    _, log = train_supervised(model, train_set, train_cfg,
                              crop_size=cfg.seg_roi(), val_dataset=val_set,
                              val_overlap=cfg.block("seg").get("overlap", 0.25))
    val_rows = log.split_rows("val")
    if val_rows:
        print(f"finetune done: best val Dice {max(1 - r.loss for r in val_rows):.4f}")
    else:
        print("finetune done")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = sorted(p for p in pred_dir.iterdir() if ".nii" in p.suffixes or p.suffix == ".nii")
    if not preds:
        raise ValidationError(f"no NIfTI predictions found in {pred_dir}")
    cases = []
    for pred_path in preds:
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise ValidationError(f"no ground truth for {pred_path.name} in {gt_dir}")
        probs, spacing = read_array(pred_path)
        gt_raw, _ = read_array(gt_path)
        gt = (np.rint(gt_raw) >= 1).astype(np.uint8)
        cases.append(evaluate_case(
            probs, gt, threshold=args.threshold, spacing=spacing,
            connectivity=args.connectivity, subject_id=pred_path.name,
        ))
    report = aggregate_report(cases)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cases.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(cases[0].as_row().keys()))
        writer.writeheader()
        for case in cases:
            writer.writerow(case.as_row())
    (out_dir / "aggregate.json").write_text(
        json.dumps({"n_cases": report.case_count, "mean": report.mean, "std": report.std}, indent=1)
    )
    _write_manifest(args, None, out_dir)
    print(f"evaluated {report.case_count} cases: "
          f"Dice {report.mean['dice_mean']:.4f}, F1 {report.mean['lesion_f1']:.4f}, "
          f"lesion-count diff {report.mean['lesion_count_diff']:.3f}, "
          f"volume diff {report.mean['volume_difference_mm3']:.2f} mm^3")
    return 0


def _pipeline_from_config(cfg: ExperimentConfig, args, train_cfg) -> PipelineConfig:
    init_from = getattr(args, "init_from", None) or cfg.block("transfer").get("init_from")
    seg_cfg = dataclasses.replace(cfg.seg_config(), dropout_rate=train_cfg.dropout)
    return PipelineConfig(
        encoder_config=cfg.encoder_config(),
        seg_config=seg_cfg,
        train_config=train_cfg,
        crop_size=cfg.seg_roi(),
        init_checkpoint=init_from,
        eval_overlap=cfg.block("seg").get("overlap", 0.25),
        eval_threshold=cfg.block("seg").get("threshold", 0.5),
    )


def _labeled_cohort_by_id(cfg: ExperimentConfig):
    data = cfg.block("data")
    if "manifest" not in data:
        raise ConfigError("config block 'data' needs a 'manifest' path")
    cohort = load_cohort(data["manifest"], root=_data_root(cfg))
    by_id = {}
    for volume, mask in cohort:
        if mask is None:
            raise ValidationError(f"subject {volume.subject_id} has no label")
        by_id[volume.subject_id] = (volume, mask)
    return by_id


def cmd_cv(args) -> int:
    cfg = _load_config(args)
    train_cfg = cfg.train_config(stage="finetune", out_dir=None)
    dataset = _labeled_cohort_by_id(cfg)
    cv_block = cfg.block("cv")
    if cv_block.get("splits_file"):
        folds = FoldSplit.load(cv_block["splits_file"])
    else:
        folds = make_folds(sorted(dataset), k=int(cv_block.get("k", 5)), seed=train_cfg.seed)

    result = run_cv(dataset, folds, _pipeline_from_config(cfg, args, train_cfg))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds.save(out_dir / "folds.json")
    result.to_csv(out_dir / "cv_results.csv")
    _write_manifest(args, cfg, out_dir)
    for row in result.rows + [result.average]:
        print(f"{row['fold']}: Dice {row['dice']:.4f}")
    return 0


def cmd_fewshot(args) -> int:
    cfg = _load_config(args)
    train_cfg = cfg.train_config(stage="finetune", out_dir=None)
    dataset = _labeled_cohort_by_id(cfg)
    fs = cfg.block("fewshot")
    pipeline = _pipeline_from_config(cfg, args, train_cfg)
    result = run_fewshot(
        dataset,
        fractions=fs.get("fractions", [0.125, 0.25, 0.5]),
        n_repeats=int(fs.get("n_repeats", 5)),
        pipeline=pipeline,
        test_fraction=fs.get("test_fraction", 0.25),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.to_csv(out_dir / "fewshot_grid.csv")
    result.summary_to_csv(out_dir / "fewshot_summary.csv")
    plot_fewshot(result.summary, out_dir / "fewshot.png")
    _write_manifest(args, cfg, out_dir)
    for row in result.summary:
        print(f"fraction {row['fraction']}: {row['arm']} Dice {row['mean']:.4f} +- {row['std']:.4f}")
    return 0


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    if args.runlog:
        summary = write_report(args.runlog, out_dir)
        print(json.dumps(summary, indent=1))
    if args.fewshot:
        with open(args.fewshot, newline="") as fh:
            rows = [
                {"fraction": float(r["fraction"]), "arm": r["arm"],
                 "mean": float(r["mean"]), "std": float(r["std"])}
                for r in csv.DictReader(fh)
            ]
        out_dir.mkdir(parents=True, exist_ok=True)
        plot_fewshot(rows, out_dir / "fewshot.png")
        print(f"wrote {out_dir / 'fewshot.png'}")
    if not args.runlog and not args.fewshot:
        raise ConfigError("report needs --runlog and/or --fewshot")
    _write_manifest(args, None, out_dir)
    return 0


def _add_common(parser, config_required=True):
    parser.add_argument("--config", required=config_required, help="experiment config JSON")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. train.total_steps=50 (repeatable)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def _add_transfer_flags(parser):
    parser.add_argument("--init-from", default=None, help="checkpoint to transfer the encoder from")
    strict = parser.add_mutually_exclusive_group()
    strict.add_argument("--strict-encoder", dest="strict_encoder", action="store_true",
                        default=None, help="fail on any missing encoder tensor (default)")
    strict.add_argument("--no-strict-encoder", dest="strict_encoder", action="store_false",
                        help="skip missing/mismatched encoder tensors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuroseg3d",
        description="Two-stage self-supervised pretraining and fine-tuning for "
                    "3D brain-MRI segmentation, on synthetic phantom cohorts.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom cohort")
    _add_common(p)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("pretrain1", help="stage-1 SSL pretraining on a healthy cohort")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain1)

    p = sub.add_parser("pretrain2", help="stage-2 SSL pretraining on the task cohort")
    _add_common(p)
    _add_transfer_flags(p)
    p.set_defaults(func=cmd_pretrain2)

    p = sub.add_parser("finetune", help="stage-3 supervised fine-tuning")
    _add_common(p)
    _add_transfer_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate prediction/ground-truth NIfTI pairs")
    p.add_argument("--pred", required=True, help="directory of prediction volumes")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks (same filenames)")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation harness")
    _add_common(p)
    _add_transfer_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("fewshot", help="paired few-shot comparison harness")
    _add_common(p)
    _add_transfer_flags(p)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("report", help="render run logs / few-shot grids to plots")
    p.add_argument("--runlog", default=None, help="runlog CSV to plot and summarize")
    p.add_argument("--fewshot", default=None, help="few-shot summary CSV to plot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _HANDLED_ERRORS as exc:
        envelope = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(envelope), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())
