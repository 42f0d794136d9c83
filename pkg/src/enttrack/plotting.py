"""Figure rendering for reports, training curves, and attributions.

All functions write PNG files next to the delimited/JSON outputs; nothing
is shown interactively.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .analysis import Attribution
from .metrics import BIGRAMS, ProParaReport, RecipesReport, SliceReport


def _save(fig, path: str | Path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_recipes_metrics(report: RecipesReport, path: str | Path, title: str = ""):
    names = ["P", "R", "F1", "Acc", "UR", "CR"]
    values = [report.precision, report.recall, report.f1, report.accuracy, report.ur, report.cr]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = range(len(names))
    ax.bar(xs, [0.0 if v is None else 100 * v for v in values], color="#4878a8")
    for x, v in zip(xs, values):
        label = "-" if v is None else f"{100 * v:.1f}"
        ax.text(x, 1.0, label, ha="center", va="bottom", fontsize=8)
    ax.set_xticks(list(xs), names)
    ax.set_ylim(0, 105)
    ax.set_ylabel("percent")
    ax.set_title(title or "ingredient presence metrics")
    _save(fig, path)


def save_propara_metrics(report: ProParaReport, path: str | Path, title: str = ""):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    overall = [report.cat1_accuracy, report.cat2_accuracy, report.macro_avg, report.micro_avg]
    ax1.bar(range(4), [0.0 if v is None else 100 * v for v in overall], color="#4878a8")
    ax1.set_xticks(range(4), ["Cat-1", "Cat-2", "Ma-Avg", "Mi-Avg"])
    ax1.set_ylim(0, 105)
    ax1.set_ylabel("percent")
    events = ["C", "M", "D"]
    width = 0.35
    for offset, (label, by_event) in enumerate(
        [("Cat-1", report.cat1_by_event), ("Cat-2", report.cat2_by_event)]
    ):
        vals = []
        for e in events:
            correct, total = by_event.get(e, (0, 0))
            vals.append(100 * correct / total if total else 0.0)
        ax2.bar([i + offset * width for i in range(3)], vals, width=width, label=label)
    ax2.set_xticks([i + width / 2 for i in range(3)], events)
    ax2.set_ylim(0, 105)
    ax2.legend(fontsize=8)
    fig.suptitle(title or "state-change metrics")
    _save(fig, path)


def save_composition_hist(slices: SliceReport, path: str | Path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    counts = [slices.composition_hist.get(b, 0) for b in BIGRAMS]
    ax.bar(range(len(BIGRAMS)), counts, color="#a85448")
    ax.set_xticks(range(len(BIGRAMS)), list(BIGRAMS))
    ax.set_ylabel("# predicted bigrams")
    acc = slices.composition_accuracy
    ax.set_title(
        "composition bigrams"
        + (f" (accuracy {100 * acc:.1f}%)" if acc is not None else "")
    )
    _save(fig, path)


def save_loss_curves(history: list[dict], path: str | Path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], label="train loss")
    if history and "dev_metric" in history[0]:
        ax2 = ax.twinx()
        ax2.plot(epochs, [h["dev_metric"] for h in history], color="#a85448", label="dev metric")
        ax2.set_ylabel("dev metric")
        ax2.set_ylim(0, 1.05)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training curve")
    _save(fig, path)


def save_attribution_plot(attribution: Attribution, path: str | Path, title: str = ""):
    tokens = attribution.tokens or [str(i) for i in range(len(attribution))]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.28 * len(tokens)), 3.2))
    ax.bar(range(len(tokens)), attribution.scores, color="#48a870")
    ax.set_xticks(range(len(tokens)), tokens, rotation=90, fontsize=7)
    ax.set_ylabel(f"relevance ({attribution.norm})")
    ax.set_title(title or f"input relevance for class {attribution.target_class}")
    _save(fig, path)
