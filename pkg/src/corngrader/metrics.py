"""Confusion matrices and classification reports.

Per-class precision/recall/F1 are one-vs-rest; any zero denominator scores 0.
Reports carry accuracy plus macro (unweighted) and weighted (support-scaled)
aggregates, rendered both as aligned text and as a plain dict with identical
numbers. Four decimal places in text output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with true classes as rows and predicted classes as columns."""

    classes: tuple
    counts: np.ndarray

    def __post_init__(self):
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise ValueError(f"counts shape {self.counts.shape} != ({c}, {c})")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def support(self, index: int) -> int:
        return int(self.counts[index].sum())


def confusion(preds: Sequence, truth: Sequence, classes: Sequence) -> ConfusionMatrix:
    if len(preds) != len(truth):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truth)} labels")
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(preds, truth):
        if t not in index:
            raise ValueError(f"unknown true label {t!r}")
        if p not in index:
            raise ValueError(f"unknown predicted label {p!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(classes, counts)


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def class_metrics(cm: ConfusionMatrix) -> list[dict]:
    """One-vs-rest precision/recall/F1/support for each class, in class order."""
    out = []
    for i, name in enumerate(cm.classes):
        tp = float(cm.counts[i, i])
        precision = _safe_div(tp, float(cm.counts[:, i].sum()))
        recall = _safe_div(tp, float(cm.counts[i, :].sum()))
        f1 = _safe_div(2.0 * precision * recall, precision + recall)
        out.append(
            {
                "class": name,
                "precision": precision,
                "recall": recall,
                "f1": f1,
                "support": cm.support(i),
            }
        )
    return out


def accuracy(cm: ConfusionMatrix) -> float:
    n = cm.n
    if n == 0:
        raise ValueError("accuracy undefined for zero samples")
    return float(np.trace(cm.counts)) / n


def aggregate(per_class: Sequence[Mapping], supports: Sequence[int], mode: str) -> dict:
    """Combine per-class metrics: 'macro' weights classes equally, 'weighted'
    scales by support."""
    if mode == "macro":
        return {
            key: sum(m[key] for m in per_class) / len(per_class)
            for key in ("precision", "recall", "f1")
        }
    if mode == "weighted":
        total = sum(supports)
        if total == 0:
            raise ValueError("weighted aggregate undefined for zero total support")
        return {
            key: sum(m[key] * s for m, s in zip(per_class, supports)) / total
            for key in ("precision", "recall", "f1")
        }
    raise ValueError(f"unknown aggregate mode {mode!r}")


@dataclass(frozen=True)
class ClassificationReport:
    classes: tuple
    per_class: tuple[dict, ...]
    accuracy: float
    macro: dict
    weighted: dict
    n: int

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "per_class": [dict(m) for m in self.per_class],
            "accuracy": self.accuracy,
            "macro_avg": dict(self.macro),
            "weighted_avg": dict(self.weighted),
            "n": self.n,
        }

    def to_text(self) -> str:
        name_w = max(12, max(len(str(c)) for c in self.classes) + 2)
        lines = [
            f"{'':>{name_w}}  precision    recall  f1-score   support",
            "",
        ]
        for m in self.per_class:
            lines.append(
                f"{str(m['class']):>{name_w}}  {m['precision']:9.4f} {m['recall']:9.4f}"
                f" {m['f1']:9.4f} {m['support']:9d}"
            )
        lines.append("")
        lines.append(f"{'accuracy':>{name_w}}  {'':9} {'':9} {self.accuracy:9.4f} {self.n:9d}")
        for label, agg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(
                f"{label:>{name_w}}  {agg['precision']:9.4f} {agg['recall']:9.4f}"
                f" {agg['f1']:9.4f} {self.n:9d}"
            )
        return "\n".join(lines) + "\n"


def report_from_confusion(cm: ConfusionMatrix) -> ClassificationReport:
    per_class = class_metrics(cm)
    supports = [m["support"] for m in per_class]
    return ClassificationReport(
        classes=cm.classes,
        per_class=tuple(per_class),
        accuracy=accuracy(cm),
        macro=aggregate(per_class, supports, "macro"),
        weighted=aggregate(per_class, supports, "weighted"),
        n=cm.n,
    )


def report(preds: Sequence, truth: Sequence, classes: Sequence) -> ClassificationReport:
    return report_from_confusion(confusion(preds, truth, classes))
