"""Multiclass evaluation: confusion matrix, precision/recall/F1, one-vs-rest
ROC curves, per-class/macro/micro AUC, and report emitters (JSON, CSV, SVG).

Conventions: confusion rows are true classes, columns predicted; argmax
ties break toward the lowest class index; zero-denominator precision/recall
terms are defined as 0 and flagged; classes absent from both truth and
prediction are excluded from macro means; degenerate ROC classes (no
positives or no negatives) are omitted and flagged.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np


class MetricsError(Exception):
    pass


def confusion_matrix(true_labels, predicted_labels, num_classes: int) -> np.ndarray:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise MetricsError(f"label arrays disagree: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise MetricsError(f"labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = int(cm.sum())
    if total == 0:
        raise MetricsError("confusion matrix is empty")
    return int(np.trace(cm)) / total


def per_class_prf(cm: np.ndarray):
    """Per-class (precision, recall, f1); zero-denominator terms are 0."""
    tp = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, tp / col, 0.0)
        recall = np.where(row > 0, tp / row, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return precision, recall, f1


def macro_f1(cm: np.ndarray) -> float:
    """Mean F1 over classes present in truth or prediction."""
    _, _, f1 = per_class_prf(cm)
    present = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    if not present.any():
        raise MetricsError("no class is present in the confusion matrix")
    return float(f1[present].mean())


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self) -> list[list[float]]:
        return [[float(f), float(t)] for f, t in zip(self.fpr, self.tpr)]


def roc_curve(scores, positives) -> RocCurve:
    """Threshold sweep at distinct scores, descending; tied scores cross a
    threshold together. The curve starts at (0,0) and ends at (1,1)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape:
        raise MetricsError(f"scores and indicators disagree: {s.shape} vs {pos.shape}")
    p = int(pos.sum())
    n = int((~pos).sum())
    if p == 0 or n == 0:
        raise MetricsError(f"degenerate class: {p} positives, {n} negatives")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = pos[order]
    # indices where a new distinct threshold ends (ties grouped)
    distinct = np.nonzero(np.diff(s_sorted))[0]
    boundaries = np.concatenate([distinct, [len(s_sorted) - 1]])
    tp_cum = np.cumsum(pos_sorted)
    fp_cum = np.cumsum(~pos_sorted)
    tpr = np.concatenate([[0.0], tp_cum[boundaries] / p])
    fpr = np.concatenate([[0.0], fp_cum[boundaries] / n])
    return RocCurve(fpr, tpr)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    return float(np.trapezoid(curve.tpr, curve.fpr))


def pair_statistic_auc(scores, positives) -> float:
    """Tie-adjusted Mann-Whitney statistic:
    (#correctly ordered pairs + 0.5 * #tied) / (P * N)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    ps = s[pos]
    ns = s[~pos]
    if len(ps) == 0 or len(ns) == 0:
        raise MetricsError("need at least one positive and one negative")
    diff = ps[:, None] - ns[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(ps) * len(ns)))


def macro_micro_auc(probs: np.ndarray, true_labels) -> tuple[float, float]:
    """Macro: mean one-vs-rest AUC over non-degenerate classes. Micro: AUC
    of all (sample, class) score/indicator pairs pooled together."""
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(true_labels, dtype=np.int64)
    n, c = probs.shape
    per_class = []
    for k in range(c):
        try:
            per_class.append(auc(roc_curve(probs[:, k], t == k)))
        except MetricsError:
            continue
    if not per_class:
        raise MetricsError("every class is degenerate; no AUC defined")
    onehot = np.zeros((n, c), dtype=bool)
    onehot[np.arange(n), t] = True
    micro = auc(roc_curve(probs.ravel(), onehot.ravel()))
    return float(np.mean(per_class)), micro


@dataclass
class EvalReport:
    classes: list[str]
    accuracy: float
    loss: float
    auc_macro: float | None
    auc_micro: float | None
    f1_macro: float
    precision_per_class: list[float]
    recall_per_class: list[float]
    f1_per_class: list[float]
    auc_per_class: list[float | None]
    confusion: np.ndarray
    roc: list[RocCurve | None]
    flags: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        per_class = []
        for i, name in enumerate(self.classes):
            per_class.append(
                {
                    "class": name,
                    "precision": self.precision_per_class[i],
                    "recall": self.recall_per_class[i],
                    "f1": self.f1_per_class[i],
                    "auc": self.auc_per_class[i],
                    "roc_defined": self.roc[i] is not None,
                }
            )
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "auc_macro": self.auc_macro,
            "auc_micro": self.auc_micro,
            "f1_macro": self.f1_macro,
            "per_class": per_class,
            "confusion": {"classes": list(self.classes), "counts": self.confusion.tolist()},
            "roc": [
                {"class": name, "points": curve.points() if curve else None}
                for name, curve in zip(self.classes, self.roc)
            ],
        }


def build_report(probs: np.ndarray, true_labels, loss: float, classes=None) -> EvalReport:
    """Assemble the full evaluation report from predicted distributions."""
    probs = np.asarray(probs, dtype=np.float64)
    t = np.asarray(true_labels, dtype=np.int64)
    if probs.ndim != 2 or len(t) != len(probs):
        raise MetricsError(f"shape mismatch: probs {probs.shape} vs {len(t)} labels")
    if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise MetricsError("probability rows must sum to 1 within 1e-6")
    c = probs.shape[1]
    if classes is None:
        classes = [str(i) for i in range(c)]
    if len(classes) != c:
        raise MetricsError(f"{len(classes)} class names for {c} columns")

    predicted = probs.argmax(axis=1)  # lowest index wins ties
    cm = confusion_matrix(t, predicted, c)
    precision, recall, f1 = per_class_prf(cm)

    curves: list[RocCurve | None] = []
    aucs: list[float | None] = []
    flags: list[str] = []
    for k in range(c):
        try:
            curve = roc_curve(probs[:, k], t == k)
            curves.append(curve)
            aucs.append(auc(curve))
        except MetricsError:
            curves.append(None)
            aucs.append(None)
            flags.append(f"class {classes[k]!r} is degenerate (no positives or no negatives); ROC omitted")
    defined = [a for a in aucs if a is not None]
    if defined:
        onehot = np.zeros((len(t), c), dtype=bool)
        onehot[np.arange(len(t)), t] = True
        auc_macro = float(np.mean(defined))
        auc_micro = auc(roc_curve(probs.ravel(), onehot.ravel()))
    else:
        auc_macro = auc_micro = None
        flags.append("all classes degenerate; AUC undefined")

    return EvalReport(
        classes=list(classes),
        accuracy=accuracy(cm),
        loss=float(loss),
        auc_macro=auc_macro,
        auc_micro=auc_micro,
        f1_macro=macro_f1(cm),
        precision_per_class=[float(v) for v in precision],
        recall_per_class=[float(v) for v in recall],
        f1_per_class=[float(v) for v in f1],
        auc_per_class=aucs,
        confusion=cm,
        roc=curves,
        flags=flags,
    )


def emit_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=1)


def emit_confusion_csv(report: EvalReport, path) -> None:
    """(C+1) x (C+1) table: header row/column carry class names."""
    with open(path, "w", encoding="utf-8") as f:
        header = ["true\\predicted"] + list(report.classes)
        f.write(",".join(_csv_quote(h) for h in header) + "\n")
        for i, name in enumerate(report.classes):
            row = [name] + [str(int(v)) for v in report.confusion[i]]
            f.write(",".join(_csv_quote(v) for v in row) + "\n")


def emit_roc_csv(report: EvalReport, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, curve in zip(report.classes, report.roc):
        if curve is None:
            continue
        path = os.path.join(out_dir, f"roc_{_safe_name(name)}.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("fpr,tpr\n")
            for fp, tp in zip(curve.fpr, curve.tpr):
                f.write(f"{fp},{tp}\n")
        written.append(path)
    return written


def emit_roc_svg(report: EvalReport, out_dir, size: int = 320) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    pad, plot = 30, size - 60
    for name, curve, value in zip(report.classes, report.roc, report.auc_per_class):
        if curve is None:
            continue
        pts = " ".join(
            f"{pad + fp * plot:.1f},{pad + (1 - tp) * plot:.1f}" for fp, tp in zip(curve.fpr, curve.tpr)
        )
        svg = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            f'<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="#999"/>'
            f'<line x1="{pad}" y1="{pad + plot}" x2="{pad + plot}" y2="{pad}" stroke="#ccc" stroke-dasharray="4"/>'
            f'<polyline points="{pts}" fill="none" stroke="#1f6f43" stroke-width="2"/>'
            f'<text x="{pad}" y="{pad - 10}" font-size="12">{name} (AUC {value:.3f})</text>'
            "</svg>"
        )
        path = os.path.join(out_dir, f"roc_{_safe_name(name)}.svg")
        with open(path, "w", encoding="utf-8") as f:
            f.write(svg)
        written.append(path)
    return written


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "._-" else "_" for ch in name)


def _csv_quote(value: str) -> str:
    value = str(value)
    if "," in value or '"' in value:
        return '"' + value.replace('"', '""') + '"'
    return value
