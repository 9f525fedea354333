"""Classification metrics, confusion matrices, Grad-CAM and comparison reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError
from .model_zoo import count_parameters

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("Type", "Model", "Fine-Tuning", "Accuracy", "Precision", "F1 Score", "Recall")
REPORT_FORMATS = ("json", "csv", "markdown")


def _check_labels(preds, labels, num_classes):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise InputError(f"preds and labels differ in length: {preds.size} vs {labels.size}")
    if preds.size == 0:
        raise InputError("need at least one prediction")
    if num_classes < 1:
        raise InputError("num_classes must be positive")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise InputError(f"{name} contain a class outside [0, {num_classes})")
    return preds, labels


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted
    class_names: list[str]

    @property
    def total(self):
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-normalized percentages; empty rows stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(rows > 0, 100.0 * self.counts / rows, 0.0)
        return pct

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def to_dict(self):
        return {
            "class_names": list(self.class_names),
            "counts": self.counts.tolist(),
            "row_percent": self.normalized().tolist(),
        }


def confusion_matrix(preds, labels, num_classes: int, class_names=None) -> ConfusionMatrix:
    preds, labels = _check_labels(preds, labels, num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    per_class: list[ClassMetrics]
    n_samples: int
    zero_division: bool = False
    warnings: list[str] = field(default_factory=list)

    def headline(self, average: str = "weighted") -> dict[str, float]:
        avg = self.weighted if average == "weighted" else self.macro
        return {"accuracy": self.accuracy, **avg}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_class"] = [ClassMetrics(**c) for c in d["per_class"]]
        return cls(**d)


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=float), where=den > 0)


def compute_metrics(preds, labels, num_classes: int) -> MetricsReport:
    """Per-class one-vs-rest precision/recall/F1 plus macro and weighted averages.

    Undefined ratios (no predicted or no true samples of a class) count as 0 and
    set ``zero_division``.
    """
    cm = confusion_matrix(preds, labels, num_classes).counts.astype(float)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    fp, fn = predicted - tp, support - tp
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    n = int(support.sum())
    notes = []
    if (predicted == 0).any():
        notes.append(f"classes never predicted: {np.flatnonzero(predicted == 0).tolist()}")
    if (support == 0).any():
        notes.append(f"classes absent from labels: {np.flatnonzero(support == 0).tolist()}")
    for note in notes:
        log.debug("zero division: %s", note)
    w = support / n
    report = MetricsReport(
        accuracy=float(tp.sum() / n),
        macro={"precision": float(precision.mean()), "recall": float(recall.mean()), "f1": float(f1.mean())},
        weighted={
            "precision": float((w * precision).sum()),
            "recall": float((w * recall).sum()),
            "f1": float((w * f1).sum()),
        },
        per_class=[
            ClassMetrics(float(p), float(r), float(f), int(s)) for p, r, f, s in zip(precision, recall, f1, support)
        ],
        n_samples=n,
        zero_division=bool(notes),
        warnings=notes,
    )
    # weighted recall reduces to trace / n
    if abs(report.weighted["recall"] - report.accuracy) > 1e-9:
        raise AssertionError("weighted recall diverged from accuracy")
    return report


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


@dataclass
class SaliencyMap:
    heatmap: np.ndarray
    target_class: int
    source_layer: str


def _resolve_layer(model: nn.Module, layer: str | None):
    if layer is None:
        names = getattr(model, "conv_layer_names", None)
        if names is None:
            convs = [n for n, m in model.named_modules() if isinstance(m, nn.Conv2d)]
            if not convs:
                raise ConfigurationError("model has no convolutional layer")
            layer = convs[-1]
        else:
            layer = names()[-1]
    modules = dict(model.named_modules())
    if layer not in modules:
        raise ConfigurationError(f"no layer named {layer!r}", "layer")
    module = modules[layer]
    if not any(isinstance(m, nn.Conv2d) for m in module.modules()):
        raise ConfigurationError(f"layer {layer!r} is not convolutional", "layer")
    return layer, module


def gradcam(model: nn.Module, image, target_class: int, layer: str | None = None) -> SaliencyMap:
    """Grad-CAM heatmap over the input plane, max-normalized to [0, 1].

    ``layer`` is a module name from ``model.named_modules()``; the default is the
    last convolutional block.
    """
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[0] != 1:
        raise InputError(f"gradcam expects one C x H x W image, got shape {tuple(x.shape)}")
    # input requires grad so activations stay in the graph even for frozen models
    x = x.to(next(model.parameters()).dtype).detach().requires_grad_(True)
    name, module = _resolve_layer(model, layer)
    captured = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        captured["act"] = out

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
            if not 0 <= target_class < logits.shape[-1]:
                raise ConfigurationError(f"target class {target_class} out of range", "target_class")
            model.zero_grad(set_to_none=True)
            logits[0, target_class].backward()
    finally:
        handle.remove()
        model.train(was_training)
    act = captured["act"]
    grads = act.grad if act.grad is not None else torch.zeros_like(act)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp_min(0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    heat = np.nan_to_num(cam.double().numpy(), nan=0.0)
    return SaliencyMap(heat, int(target_class), name)


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------


@dataclass
class ComplexityRow:
    name: str
    total_parameters: int
    trainable_parameters: int
    size_bytes: int


@dataclass
class ComplexityTable:
    rows: list[ComplexityRow]
    reductions: list[dict]  # student vs each teacher

    def to_markdown(self):
        if not self.rows:
            return ""
        lines = ["| Model | Total Number of Parameters | Model Size (bytes) |", "|---|---:|---:|"]
        lines += [f"| {r.name} | {r.total_parameters:,} | {r.size_bytes:,} |" for r in self.rows]
        if self.reductions:
            lines += ["", "| Student vs | Parameter reduction (x) | Size reduction (x) |", "|---|---:|---:|"]
            lines += [
                f"| {d['teacher']} | {d['parameter_factor']:.1f} | {d['size_factor']:.1f} |" for d in self.reductions
            ]
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"rows": [asdict(r) for r in self.rows], "reductions": self.reductions}


def complexity_report(models, student: str | None = None) -> ComplexityTable:
    """Tabulate (name, parameters, bytes) and the student's reduction factor vs every other model.

    ``models`` is a list of ``(name, model)`` pairs (or a dict). The student row
    is ``student`` if given, else the first entry.
    """
    items = list(models.items()) if isinstance(models, dict) else list(models)
    rows = []
    for name, model in items:
        rep = count_parameters(model)
        rows.append(ComplexityRow(name, rep.total_parameters, rep.trainable_parameters, rep.serialized_size_bytes))
    if not rows:
        return ComplexityTable([], [])
    ref = next((r for r in rows if r.name == student), rows[0])
    reductions = [
        {
            "teacher": r.name,
            "parameter_factor": r.total_parameters / ref.total_parameters,
            "size_factor": r.size_bytes / ref.size_bytes,
        }
        for r in rows
        if r is not ref
    ]
    return ComplexityTable(rows, reductions)


# ---------------------------------------------------------------------------
# run reports
# ---------------------------------------------------------------------------


def _row_type(record: dict) -> str:
    mode = record["config"]["mode"]
    if mode == "finetune_teacher":
        return "Teacher Models"
    if mode == "vanilla":
        return "Student Model"
    return "KD Models"


def table_rows(records, average: str = "weighted") -> list[dict]:
    """One comparison-table row per successful run record (dicts as written to JSON)."""
    order = {"Teacher Models": 0, "Student Model": 1, "KD Models": 2}
    rows = []
    for rec in records:
        if rec.get("status", "ok") != "ok" or not rec.get("test_metrics"):
            continue
        m = rec["test_metrics"]
        avg = m[average]
        rows.append(
            {
                "Type": _row_type(rec),
                "Model": rec.get("name") or rec["config"]["mode"],
                "Fine-Tuning": rec.get("fine_tuning", "-"),
                "Accuracy": m["accuracy"],
                "Precision": avg["precision"],
                "F1 Score": avg["f1"],
                "Recall": avg["recall"],
            }
        )
    rows.sort(key=lambda r: order[r["Type"]])
    return rows


def _fmt_pct(v):
    return f"{100 * v:.2f}%"


def render_markdown(rows) -> str:
    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "|".join("---" for _ in TABLE_COLUMNS) + "|"]
    for r in rows:
        cells = [r["Type"], r["Model"], r["Fine-Tuning"]] + [_fmt_pct(r[c]) for c in TABLE_COLUMNS[3:]]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def export_report(records, fmt: str, path, average: str = "weighted") -> Path:
    """Write the comparison table for ``records`` (RunRecord objects or dicts)."""
    if fmt not in REPORT_FORMATS:
        raise ConfigurationError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}", "format")
    records = [r.to_dict() if hasattr(r, "to_dict") else r for r in records]
    if not records:
        raise InputError("no run records to report")
    rows = table_rows(records, average)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "markdown":
        text = render_markdown(rows)
    elif fmt == "csv":
        text = render_csv(rows)
    else:
        text = json.dumps({"columns": list(TABLE_COLUMNS), "average": average, "rows": rows, "records": records},
                          indent=1)
    path.write_text(text)
    return path


def load_json_report(path) -> dict:
    return json.loads(Path(path).read_text())


def evaluate_model(model, loader, num_classes: int, class_names=None):
    """Predict over a loader yielding ``(x, y, ...)``; return (MetricsReport, ConfusionMatrix)."""
    preds, labels = predict(model, loader)
    metrics = compute_metrics(preds, labels, num_classes)
    return metrics, confusion_matrix(preds, labels, num_classes, class_names)


@torch.no_grad()
def predict(model, loader):
    model.eval()
    preds, labels = [], []
    for batch in loader:
        x, y = batch[0], batch[1]
        preds.append(model(x).argmax(dim=1))
        labels.append(torch.as_tensor(y))
    return torch.cat(preds).numpy(), torch.cat(labels).numpy()
