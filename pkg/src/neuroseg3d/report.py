"""Rendering of run logs and few-shot grids to plots and summary stats."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .train import RunLog


def runlog_summary(log: RunLog) -> dict:
    out = {}
    for split in ("train", "val"):
        rows = log.split_rows(split)
        if not rows:
            continue
        losses = np.array([r.loss for r in rows])
        out[split] = {
            "steps": len(rows),
            "first_loss": float(losses[0]),
            "last_loss": float(losses[-1]),
            "min_loss": float(losses.min()),
            "mean_wall_ms": float(np.mean([r.wall_ms for r in rows])),
        }
    return out


def plot_runlog(log: RunLog, path) -> None:
    """Side-by-side training and validation loss curves."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, split in zip(axes, ("train", "val")):
        rows = log.split_rows(split)
        if rows:
            ax.plot([r.step for r in rows], [r.loss for r in rows], lw=1.2)
        ax.set_title(f"{split} loss")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fewshot(summary_rows: list[dict], path) -> None:
    """Mean Dice vs training fraction per arm, +-1 std error bars."""
    fig, ax = plt.subplots(figsize=(6, 4))
    arms = sorted({r["arm"] for r in summary_rows})
    for arm in arms:
        rows = sorted((r for r in summary_rows if r["arm"] == arm), key=lambda r: r["fraction"])
        fr = [r["fraction"] for r in rows]
        mean = [r["mean"] for r in rows]
        std = [r["std"] for r in rows]
        ax.errorbar(fr, mean, yerr=std, marker="o", capsize=3, label=arm)
    ax.set_xlabel("training fraction")
    ax.set_ylabel("test Dice")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(log_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog.from_csv(log_path)
    summary = runlog_summary(log)
    plot_runlog(log, out_dir / "loss_curves.png")
    (out_dir / "runlog_summary.json").write_text(json.dumps(summary, indent=1))
    return summary
