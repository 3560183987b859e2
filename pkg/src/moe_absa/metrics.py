"""Classification reports and precision-recall curves."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .losses import DegenerateInputError


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class ClassificationReport:
    classes: list[str]
    per_class: dict[str, dict[str, float]]
    weighted: dict[str, float]
    micro: dict[str, float]
    macro: dict[str, float]
    confusion: list[list[int]]
    n_samples: int
    accuracy: float | None = None
    multilabel: bool = False

    def to_dict(self) -> dict:
        out = {
            "classes": self.classes,
            "per_class": self.per_class,
            "weighted": self.weighted,
            "micro": self.micro,
            "macro": self.macro,
            "confusion": self.confusion,
            "n_samples": self.n_samples,
            "multilabel": self.multilabel,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out


def _aggregate(per_class: dict[str, dict[str, float]]) -> tuple[dict[str, float], dict[str, float]]:
    total = sum(v["support"] for v in per_class.values())
    weighted, macro = {}, {}
    for key in ("precision", "recall", "f1"):
        macro[key] = float(np.mean([v[key] for v in per_class.values()]))
        weighted[key] = sum(v[key] * v["support"] for v in per_class.values()) / total if total else 0.0
    weighted["support"] = macro["support"] = total
    return weighted, macro


def classification_report(preds: Sequence, labels: Sequence, classes: Sequence[str] | None = None) -> ClassificationReport:
    """Single-label multiclass report. Zero denominators give 0."""
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    if len(labels) == 0:
        raise ValueError("empty input")
    classes = list(classes) if classes is not None else sorted(set(labels) | set(preds))
    index = {c: k for k, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=int)
    for p, y in zip(preds, labels):
        cm[index[y], index[p]] += 1
    per_class = {}
    for k, c in enumerate(classes):
        tp = cm[k, k]
        p, r, f = _prf(tp, cm[:, k].sum() - tp, cm[k, :].sum() - tp)
        per_class[c] = {"precision": p, "recall": r, "f1": f, "support": int(cm[k, :].sum())}
    weighted, macro = _aggregate(per_class)
    tp = np.trace(cm)
    n = int(cm.sum())
    mp, mr, mf = _prf(tp, n - tp, n - tp)
    return ClassificationReport(
        classes,
        per_class,
        weighted,
        {"precision": mp, "recall": mr, "f1": mf, "support": n},
        macro,
        cm.tolist(),
        n,
        accuracy=float(tp / n),
    )


def multilabel_report(pred: np.ndarray, true: np.ndarray, classes: Sequence[str]) -> ClassificationReport:
    """Per-label binary P/R/F1 with support = positives of that label.

    ``confusion`` holds one [tp, fp, fn, tn] row per label.
    """
    pred = np.asarray(pred, dtype=bool)
    true = np.asarray(true, dtype=bool)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ValueError("pred and true must be matching 2-D indicator arrays")
    if pred.shape[0] == 0:
        raise ValueError("empty input")
    per_class, rows = {}, []
    for k, c in enumerate(classes):
        tp = int(np.sum(pred[:, k] & true[:, k]))
        fp = int(np.sum(pred[:, k] & ~true[:, k]))
        fn = int(np.sum(~pred[:, k] & true[:, k]))
        tn = int(np.sum(~pred[:, k] & ~true[:, k]))
        p, r, f = _prf(tp, fp, fn)
        per_class[c] = {"precision": p, "recall": r, "f1": f, "support": tp + fn}
        rows.append([tp, fp, fn, tn])
    weighted, macro = _aggregate(per_class)
    tp, fp, fn = (sum(r[i] for r in rows) for i in range(3))
    mp, mr, mf = _prf(tp, fp, fn)
    return ClassificationReport(
        list(classes),
        per_class,
        weighted,
        {"precision": mp, "recall": mr, "f1": mf, "support": tp + fn},
        macro,
        rows,
        int(pred.shape[0]),
        multilabel=True,
    )


def pr_curve(scores: Sequence[float], labels: Sequence[int | bool]) -> list[tuple[float, float, float]]:
    """(precision, recall, threshold) at every distinct score, highest first.

    A sample counts as predicted positive when its score >= threshold.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateInputError("pr_curve needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return [(float(tp[i] / (tp[i] + fp[i])), float(tp[i] / n_pos), float(s[i])) for i in ends]


def pr_curves(prob: np.ndarray, true: np.ndarray, classes: Sequence[str]) -> dict[str, list[tuple[float, float, float]]]:
    """One-vs-rest curve per class plus a pooled "micro" curve.

    ``true`` may be class indices (N,) or an indicator matrix (N x C).
    Classes without positives are skipped.
    """
    prob = np.asarray(prob, dtype=float)
    true = np.asarray(true)
    ind = true.astype(bool) if true.ndim == 2 else np.eye(len(classes), dtype=bool)[true]
    out = {}
    for k, c in enumerate(classes):
        if ind[:, k].any():
            out[c] = pr_curve(prob[:, k], ind[:, k])
    if ind.any():
        out["micro"] = pr_curve(prob.reshape(-1), ind.reshape(-1))
    return out
