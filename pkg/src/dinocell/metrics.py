"""Multi-label precision, recall, F1 and their macro average.

Zero-division convention: precision, recall and F1 are 0 whenever their
denominator is 0, and such classes still count in the macro mean unless
``drop_absent=True`` (classes with neither positives nor predictions are
then skipped).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ShapeError


def _binary(name, y):
    y = np.asarray(y)
    if y.ndim != 2:
        raise ShapeError(f"{name} must be (n_samples, n_classes), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DataError(f"{name} has non-binary entries")
    return y.astype(bool)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def confusion_counts(y_true, y_pred):
    t = _binary("y_true", y_true)
    p = _binary("y_pred", y_pred)
    if t.shape != p.shape:
        raise ShapeError(f"y_true {t.shape} vs y_pred {p.shape}")
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)
    return tp, fp, fn


def prf_per_class(y_true, y_pred):
    """Per-class ``(precision, recall, f1)`` arrays."""
    tp, fp, fn = confusion_counts(y_true, y_pred)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    return precision, recall, f1


def macro_f1(per_class_f1):
    f = np.asarray(per_class_f1, dtype=np.float64)
    if f.size == 0:
        raise DataError("macro F1 of an empty class list")
    return float(f.mean())


@dataclass
class MetricsReport:
    class_names: list
    tp: list
    fp: list
    fn: list
    precision: list
    recall: list
    f1: list
    macro_f1: float
    n_samples: int

    def to_json(self):
        return json.dumps(asdict(self))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1"])
        for row in zip(self.class_names, self.tp, self.fp, self.fn, self.precision,
                       self.recall, self.f1):
            w.writerow(row)
        return buf.getvalue()


def evaluate(y_true, y_pred, class_names=None, drop_absent=False):
    tp, fp, fn = confusion_counts(y_true, y_pred)
    precision, recall, f1 = prf_per_class(y_true, y_pred)
    n_cls = len(tp)
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_cls)]
    keep = np.ones(n_cls, dtype=bool)
    if drop_absent:
        keep = (tp + fp + fn) > 0
        if not keep.any():
            raise DataError("every class is absent")
    return MetricsReport(
        class_names=names,
        tp=tp.tolist(),
        fp=fp.tolist(),
        fn=fn.tolist(),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        macro_f1=macro_f1(f1[keep]),
        n_samples=int(np.asarray(y_true).shape[0]),
    )
