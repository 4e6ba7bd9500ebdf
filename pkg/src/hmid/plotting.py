"""Figures written next to the CLI's JSON/TSV outputs (Agg backend, PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {"figure.dpi": 110, "axes.spines.top": False, "axes.spines.right": False,
         "axes.grid": True, "grid.alpha": 0.3, "font.size": 9}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(metrics: list[dict], path) -> Path:
    """Loss terms, temperature and curvature against the step."""
    steps = [m["step"] for m in metrics]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_scalar) = plt.subplots(1, 2, figsize=(8, 3))
        for key in ("total", "contrastive", "distillation", "entailment"):
            ax_loss.plot(steps, [m[key] for m in metrics], label=key)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        ax_scalar.plot(steps, [m["tau"] for m in metrics], label="tau")
        ax_scalar.plot(steps, [m["c"] for m in metrics], label="c")
        ax_scalar.set_xlabel("step")
        ax_scalar.legend(frameon=False)
        return _save(fig, path)


def plot_mask_ablation(rows: list[dict], path) -> Path:
    """Recall@1 and image-tower throughput against the mask ratio."""
    ratios = [r["mask_ratio"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(ratios, [r["recall_at_1"] for r in rows], "o-", color="C0")
        ax.set_xlabel("mask ratio")
        ax.set_ylabel("recall@1", color="C0")
        if all("images_per_sec" in r for r in rows):
            twin = ax.twinx()
            twin.plot(ratios, [r["images_per_sec"] for r in rows], "s--", color="C1")
            twin.set_ylabel("images / s", color="C1")
        return _save(fig, path)


def plot_loss_ablation(rows: list[dict], path) -> Path:
    labels = [r["label"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(range(len(rows)), [r["recall_at_1"] for r in rows], color="C0")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel("recall@1")
        return _save(fig, path)


def plot_radii(radii: dict[str, float], path) -> Path:
    """Mean distance from the root axis per embedding role."""
    order = ["generic", "mid", "specific", "image"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(order, [radii[k] for k in order], color=["C2", "C1", "C0", "C3"])
        ax.set_ylabel("mean space norm")
        return _save(fig, path)
