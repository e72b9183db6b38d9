"""File-rendered figures accompanying CSV/JSON reports (headless backend)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_training_curves(metrics_csv: str, out_png: str) -> None:
    """Loss and macro-metric traces over epochs, one panel each."""
    with open(metrics_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(epochs, [float(r["train_loss"]) for r in rows], label="train loss")
    ax_loss.plot(epochs, [float(r["val_loss"]) for r in rows], label="val loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(frameon=False)
    ax_metric.plot(epochs, [float(r["val_auroc_macro"]) for r in rows], label="val AUROC")
    ax_metric.plot(epochs, [float(r["val_auprc_macro"]) for r in rows], label="val AUPRC")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("macro metric")
    ax_metric.set_ylim(0, 1)
    ax_metric.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_label_bars(report: dict, out_png: str, title: str = "") -> None:
    """Per-label AUROC/AUPRC bars for one evaluation report."""
    auroc = report["auroc"]
    auprc = report["auprc"]
    idx = range(len(auroc))
    fig, ax = plt.subplots(figsize=(9, 3.2))
    width = 0.4
    ax.bar([i - width / 2 for i in idx], [v if v is not None else 0.0 for v in auroc], width, label="AUROC")
    ax.bar([i + width / 2 for i in idx], [v if v is not None else 0.0 for v in auprc], width, label="AUPRC")
    ax.set_xticks(list(idx))
    ax.set_xticklabels([f"L{i:02d}" for i in idx], fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("metric")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def render_group_bars(groups: dict[str, float], out_png: str, ylabel: str, title: str = "") -> None:
    """One bar per named condition (suite summaries)."""
    names = list(groups)
    values = [groups[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names)), 3.2))
    ax.bar(names, values)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
    if title:
        ax.set_title(title, fontsize=9)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
