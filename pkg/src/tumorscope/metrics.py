"""Binary confusion matrix and derived metrics (positive class = tumor = 1).

Metrics whose denominator is zero are ``None`` in memory and serialize as
the token ``undef``; they are never reported as 0.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

UNDEF = "undef"
REPORT_COLUMNS = ("model", "classifier", "accuracy", "precision", "recall", "f1", "specificity")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """The same predictions scored with class 0 as the positive class."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)


@dataclass(frozen=True)
class MetricReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    specificity: float | None
    confusion: ConfusionMatrix

    @property
    def tpr(self) -> float | None:
        return self.recall

    @property
    def tnr(self) -> float | None:
        return self.specificity

    def values(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in REPORT_COLUMNS[2:]}


def confusion(predictions, labels) -> ConfusionMatrix:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    for name, arr in (("predictions", p), ("labels", y)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary (0/1)")
    p = p.astype(bool)
    y = y.astype(bool)
    return ConfusionMatrix(
        tp=int(np.sum(p & y)),
        tn=int(np.sum(~p & ~y)),
        fp=int(np.sum(p & ~y)),
        fn=int(np.sum(~p & y)),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def report(cm: ConfusionMatrix) -> MetricReport:
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricReport(
        accuracy=_ratio(cm.tp + cm.tn, cm.total),
        precision=precision,
        recall=recall,
        f1=f1,
        # true-negative rate; the denominator is the count of actual negatives
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        confusion=cm,
    )


def evaluate(predictions, labels) -> MetricReport:
    return report(confusion(predictions, labels))


def format_value(v: float | None, digits: int = 6) -> str:
    return UNDEF if v is None else f"{v:.{digits}f}"


def parse_value(s: str) -> float | None:
    return None if s == UNDEF else float(s)


def reports_to_csv(rows: list[tuple[str, str, MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for model, clf, rep in rows:
        w.writerow([model, clf, *(format_value(v) for v in rep.values().values())])
    return buf.getvalue()
