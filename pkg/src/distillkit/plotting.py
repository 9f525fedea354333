"""Figure rendering for reports: confusion matrices, saliency overlays, curves.

Saliency heatmaps and overlays are composed with numpy + Pillow (no
matplotlib canvas), so identical inputs give byte-identical PNGs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

SALIENCY_CMAP = "jet"
OVERLAY_ALPHA = 0.45

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
# fixed metadata keeps re-renders of the same figure byte-stable
_PNG_META = {"Software": None}


def _prepare(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def plot_confusion_matrix(confusion, path, title=None, percent=True):
    """Render a confusion matrix (``ConfusionMatrix`` or its ``to_dict()``) as PNG."""
    if hasattr(confusion, "to_dict"):
        confusion = confusion.to_dict()
    counts = np.asarray(confusion["counts"])
    values = np.asarray(confusion["row_percent"]) if percent else counts
    names = confusion["class_names"]
    k = len(names)
    with plt.rc_context(_RC):
        size = max(3.5, 0.45 * k + 1.5)
        fig, ax = plt.subplots(figsize=(size, size))
        im = ax.imshow(values, cmap="Blues", vmin=0, vmax=100 if percent else max(1, counts.max()))
        ax.set_xticks(range(k), names, rotation=60, ha="right")
        ax.set_yticks(range(k), names)
        ax.set_xlabel("Predicted")
        ax.set_ylabel("True")
        if k <= 12:
            thresh = (100 if percent else counts.max()) / 2
            for i in range(k):
                for j in range(k):
                    txt = f"{values[i, j]:.0f}" if percent else str(counts[i, j])
                    ax.text(j, i, txt, ha="center", va="center",
                            color="white" if values[i, j] > thresh else "black", fontsize=7)
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        path = _prepare(path)
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return path


def colorize(heatmap: np.ndarray, cmap: str = SALIENCY_CMAP) -> np.ndarray:
    """Map a [0, 1] heatmap to uint8 RGB with a fixed colormap."""
    rgba = matplotlib.colormaps[cmap](np.clip(heatmap, 0.0, 1.0))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def save_saliency(heatmap: np.ndarray, image_rgb: np.ndarray | None, heatmap_path, overlay_path=None):
    """Write the colorized heatmap and, given an H x W x 3 image in [0, 1], a blended overlay."""
    heat_rgb = colorize(heatmap)
    heatmap_path = _prepare(heatmap_path)
    Image.fromarray(heat_rgb).save(heatmap_path, format="PNG")
    if overlay_path is None or image_rgb is None:
        return heatmap_path, None
    base = np.clip(np.asarray(image_rgb, dtype=np.float64), 0.0, 1.0)
    if base.shape[:2] != heatmap.shape:
        raise ValueError(f"image {base.shape[:2]} and heatmap {heatmap.shape} sizes differ")
    blend = (1 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * heat_rgb / 255.0
    overlay_path = _prepare(overlay_path)
    Image.fromarray((blend * 255).round().astype(np.uint8)).save(overlay_path, format="PNG")
    return heatmap_path, overlay_path


def plot_training_curves(record, path):
    rec = record.to_dict() if hasattr(record, "to_dict") else record
    epochs = [e["epoch"] for e in rec["epochs"]]
    with plt.rc_context(_RC):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
        for split, style in (("train", "-"), ("val", "--")):
            terms = sorted({k for e in rec["epochs"] for k in e[split]})
            for term in terms:
                ax_loss.plot(epochs, [e[split].get(term, np.nan) for e in rec["epochs"]], style, label=f"{split} {term}")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(fontsize=6, ncol=2)
        ax_acc.plot(epochs, [e["val_accuracy"] for e in rec["epochs"]], "o-", ms=3)
        if rec.get("best_epoch") is not None:
            ax_acc.axvline(rec["best_epoch"], color="grey", lw=0.8, ls=":")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("val accuracy")
        fig.suptitle(rec["name"])
        path = _prepare(path)
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return path


def plot_comparison(records, path, average="weighted"):
    """Grouped bars of accuracy / precision / F1 / recall per run."""
    recs = [r.to_dict() if hasattr(r, "to_dict") else r for r in records]
    names = [r["name"] for r in recs]
    metrics = ["accuracy", "precision", "f1", "recall"]
    vals = np.array(
        [[r["test_metrics"]["accuracy"]] + [r["test_metrics"][average][m] for m in metrics[1:]] for r in recs]
    )
    x = np.arange(len(names))
    width = 0.2
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(names) + 1.5), 3.2))
        for i, m in enumerate(metrics):
            ax.bar(x + (i - 1.5) * width, 100 * vals[:, i], width, label=m)
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.legend(fontsize=7, ncol=4, loc="lower right")
        path = _prepare(path)
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
    return path
