"""Delimited metric outputs and their companion figures.

Training and evaluation both report through this module: CSV files carry
the numbers, and matplotlib renders a figure next to each one.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evalmetrics import EvalReport

__all__ = [
    "plot_gap_history",
    "plot_loss_curve",
    "plot_per_class_ap",
    "write_eval_csv",
    "write_eval_history_csv",
    "write_loss_csv",
    "write_training_report",
    "write_eval_report",
]


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["step", "loss"])
        for step, value in losses:
            writer.writerow([step, f"{value:.8f}"])


def write_eval_history_csv(path, history) -> None:
    with open(path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["step", "gap"])
        for step, gap in history:
            writer.writerow([step, f"{gap:.6f}"])


def write_eval_csv(summary_path, per_class_path, report: EvalReport) -> None:
    with open(summary_path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["metric", "value"])
        writer.writerow(["gap_at_20", f"{report.gap:.6f}"])
        writer.writerow(["videos", report.num_videos])
        writer.writerow(["positives", report.num_positives])
        writer.writerow(["zero_positives", int(report.zero_positives)])
    with open(per_class_path, "w", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["label", "average_precision"])
        for label in sorted(report.per_class):
            writer.writerow([label, f"{report.per_class[label]:.6f}"])


def plot_loss_curve(path, losses) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    if losses:
        steps, values = zip(*losses)
        ax.plot(steps, values, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gap_history(path, history) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    if history:
        steps, gaps = zip(*history)
        ax.plot(steps, gaps, marker="o", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("GAP@20")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Holdout GAP")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_class_ap(path, per_class: dict) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    if per_class:
        labels = sorted(per_class)
        positions = range(len(labels))
        ax.bar(positions, [per_class[l] for l in labels])
        ax.set_xticks(list(positions), [str(l) for l in labels])
    ax.set_xlabel("label")
    ax.set_ylabel("average precision")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Per-class AP")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_training_report(out_dir, losses, eval_history) -> list:
    """Write the training-run CSVs and figures; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "loss.csv", out_dir / "loss_curve.png"]
    write_loss_csv(paths[0], losses)
    plot_loss_curve(paths[1], losses)
    if eval_history:
        paths += [out_dir / "eval_history.csv", out_dir / "gap_curve.png"]
        write_eval_history_csv(paths[2], eval_history)
        plot_gap_history(paths[3], eval_history)
    return paths


def write_eval_report(out_dir, report: EvalReport) -> list:
    """Write the evaluation CSVs and the per-class AP figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "report.csv", out_dir / "per_class_ap.csv",
             out_dir / "per_class_ap.png"]
    write_eval_csv(paths[0], paths[1], report)
    plot_per_class_ap(paths[2], report.per_class)
    return paths
