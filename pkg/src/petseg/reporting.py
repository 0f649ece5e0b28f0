"""Delimited outputs and matplotlib figures for the report paths."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import EvalReport
from .trainer import TrainHistory


def save_history_figure(history: TrainHistory, path: Path | str) -> Path:
    """Training curves: learning rate, loss, validation Dice, loss weights."""
    epochs = [r.epoch for r in history.records]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), constrained_layout=True)

    axes[0, 0].plot(epochs, [r.lr for r in history.records], color="tab:blue")
    axes[0, 0].set_yscale("log")
    axes[0, 0].set_title("learning rate")

    axes[0, 1].plot(epochs, [r.train_loss for r in history.records], color="tab:red")
    axes[0, 1].set_title("mean train loss")

    axes[1, 0].plot(epochs, [r.val_dice for r in history.records], color="tab:green")
    axes[1, 0].set_ylim(0, 1)
    axes[1, 0].set_title("validation Dice")

    for key, label in (("s_dice", "dice"), ("s_lovasz", "lovasz"), ("s_bce", "bce")):
        axes[1, 1].plot(epochs, [getattr(r, key) for r in history.records], label=label)
    axes[1, 1].legend(fontsize=8)
    axes[1, 1].set_title("loss-weight parameters")

    for ax in axes.flat:
        ax.set_xlabel("epoch")
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_eval_csv(report: EvalReport, path: Path | str) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "dice", "fpv_ml", "fnv_ml"])
        for row in report.rows:
            writer.writerow([row.patient_id, repr(row.dice), repr(row.fpv_ml),
                             repr(row.fnv_ml)])
    return path


def write_eval_summary(report: EvalReport, path: Path | str) -> Path:
    path = Path(path)
    path.write_text(
        "patients: {}\nmean_dice: {!r}\nmean_fpv_ml: {!r}\nmean_fnv_ml: {!r}\n".format(
            len(report.rows), report.mean_dice, report.mean_fpv_ml, report.mean_fnv_ml
        )
    )
    return path


def save_eval_figure(report: EvalReport, path: Path | str) -> Path:
    """Per-patient Dice and false-volume bars."""
    ids = [r.patient_id for r in report.rows]
    x = range(len(ids))
    fig, (ax_dice, ax_vol) = plt.subplots(2, 1, figsize=(max(6, 0.45 * len(ids)), 7),
                                          constrained_layout=True)

    ax_dice.bar(x, [r.dice for r in report.rows], color="tab:green")
    ax_dice.axhline(report.mean_dice, color="k", ls="--", lw=1,
                    label=f"mean {report.mean_dice:.3f}")
    ax_dice.set_ylim(0, 1)
    ax_dice.set_ylabel("Dice")
    ax_dice.legend(fontsize=8)

    width = 0.4
    ax_vol.bar([i - width / 2 for i in x], [r.fpv_ml for r in report.rows],
               width=width, color="tab:orange", label="false positive (mL)")
    ax_vol.bar([i + width / 2 for i in x], [r.fnv_ml for r in report.rows],
               width=width, color="tab:purple", label="false negative (mL)")
    ax_vol.set_ylabel("volume (mL)")
    ax_vol.legend(fontsize=8)

    for ax in (ax_dice, ax_vol):
        ax.set_xticks(list(x))
        ax.set_xticklabels(ids, rotation=90, fontsize=7)
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
