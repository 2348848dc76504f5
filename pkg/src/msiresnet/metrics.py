"""Confusion counts and the accuracy / F1 derived from them.

Class 0 is MSI and class 1 is MSS. The four counts follow the MSI-positive
convention: ``tp`` = predicted MSI and actually MSI, ``fp`` = predicted MSI
but actually MSS, ``fn`` = predicted MSS but actually MSI, ``tn`` =
predicted MSS and actually MSS. F1 defaults to MSS as the positive class.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, UndefinedMetricError

MSI, MSS = 0, 1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise InvalidInputError(f"{k} must be a non-negative integer, got {v}")
            object.__setattr__(self, k, int(v))

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def swapped_errors(self):
        """Counts with the fp and fn columns exchanged."""
        return ConfusionCounts(self.tp, self.fn, self.fp, self.tn)


def confusion_matrix(pred, actual):
    pred = np.asarray(pred)
    actual = np.asarray(actual)
    if pred.ndim != 1 or pred.shape != actual.shape:
        raise InvalidInputError(f"pred and actual must be 1-d of equal length, got {pred.shape} and {actual.shape}")
    if pred.size == 0:
        raise InvalidInputError("cannot build a confusion matrix from zero samples")
    for name, a in (("pred", pred), ("actual", actual)):
        bad = np.flatnonzero((a != 0) & (a != 1))
        if bad.size:
            raise InvalidInputError(f"{name}[{bad[0]}] = {a[bad[0]]} is not a class label (0 or 1)")
    p_msi, a_msi = pred == MSI, actual == MSI
    return ConfusionCounts(
        tp=int(np.sum(p_msi & a_msi)),
        fp=int(np.sum(p_msi & ~a_msi)),
        fn=int(np.sum(~p_msi & a_msi)),
        tn=int(np.sum(~p_msi & ~a_msi)),
    )


def accuracy(c):
    if c.total == 0:
        raise UndefinedMetricError("accuracy is undefined for zero samples")
    return (c.tp + c.tn) / c.total


def f1_score(c, positive=MSS):
    """Precision, recall and F1 with ``positive`` (0 = MSI, 1 = MSS) as the positive class."""
    if positive == MSI:
        tp, fp, fn = c.tp, c.fp, c.fn
    elif positive == MSS:
        tp, fp, fn = c.tn, c.fn, c.fp
    else:
        raise InvalidInputError(f"positive class must be 0 or 1, got {positive}")
    if tp + fp == 0:
        raise UndefinedMetricError(f"precision undefined: class {positive} was never predicted")
    if tp + fn == 0:
        raise UndefinedMetricError(f"recall undefined: class {positive} never occurs")
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if tp == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


REPORT_HEADER = ("model", "tp", "fp", "fn", "tn", "accuracy", "precision", "recall", "f1")


def report_rows(rows, positive=MSS):
    out = []
    for name, c in rows:
        try:
            p, r, f = (f"{v:.4f}" for v in f1_score(c, positive))
        except UndefinedMetricError:
            p = r = f = "nan"
        out.append((name, c.tp, c.fp, c.fn, c.tn, f"{accuracy(c):.4f}", p, r, f))
    return out


def report_csv(rows, positive=MSS):
    """CSV text, one line per ``(model name, ConfusionCounts)`` pair.

    Metrics whose denominator vanishes are written as ``nan``.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(report_rows(rows, positive))
    return buf.getvalue()


# Confusion counts per model, in the order they were reported.
REPORTED_COUNTS = (
    ("Logistic Regression", ConfusionCounts(0, 7505, 0, 11728)),
    ("Feed Forward Neural Network", ConfusionCounts(523, 6982, 833, 10895)),
    ("Convolution Neural Network", ConfusionCounts(5880, 1625, 1855, 9873)),
    ("VGG16", ConfusionCounts(0, 7505, 0, 11728)),
    ("ResNet 18", ConfusionCounts(6182, 1323, 1072, 10656)),
    ("ResNet 34", ConfusionCounts(6015, 1490, 1218, 10510)),
    ("ResNet 50", ConfusionCounts(6164, 1341, 972, 10756)),
    ("ResNet 101", ConfusionCounts(5940, 1565, 950, 10778)),
    ("ResNet 152", ConfusionCounts(5828, 1677, 943, 10785)),
    ("Modified ResNet", ConfusionCounts(6338, 1167, 792, 10936)),
)
