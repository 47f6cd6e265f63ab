"""Confusion-matrix evaluation: OA, F1, Kappa, Precision, Recall.

Convention: confusion rows index the reference (ground truth), columns the
prediction. Area scores report the positive (change) class; moment scores
macro-average F1/Precision/Recall over every class present in the ground
truth, with a second variant that leaves out the never-changed class. All
values are percentages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class MetricsReport:
    area: dict
    moment: dict
    moment_changed_only: dict
    area_confusion: np.ndarray
    moment_confusion: np.ndarray
    degenerate_classes: list = field(default_factory=list)

    def lines(self):
        out = []
        for block, vals in (("area", self.area), ("moment", self.moment),
                            ("moment_changed_only", self.moment_changed_only)):
            for key, v in vals.items():
                out.append(f"{block}.{key}={v:.4f}")
        if self.degenerate_classes:
            out.append("degenerate_classes=" + ",".join(map(str, self.degenerate_classes)))
        return out


def confusion_matrix(reference, prediction, n_classes):
    """[K, K] counts; rows = reference, columns = prediction."""
    ref = np.asarray(reference).ravel().astype(np.int64)
    pred = np.asarray(prediction).ravel().astype(np.int64)
    if ref.shape != pred.shape:
        raise ShapeError("reference and prediction sizes differ")
    if ref.size == 0:
        raise ShapeError("empty input")
    if ref.min() < 0 or ref.max() >= n_classes or pred.min() < 0 or pred.max() >= n_classes:
        raise ShapeError(f"labels outside [0, {n_classes})")
    return np.bincount(ref * n_classes + pred, minlength=n_classes * n_classes) \
             .reshape(n_classes, n_classes)


def _kappa(m):
    total = m.sum()
    po = np.trace(m) / total
    pe = float((m.sum(axis=1) * m.sum(axis=0)).sum()) / (total * total)
    denom = 1.0 - pe
    if abs(denom) < 1e-12:
        return 0.0
    return (po - pe) / denom


def _per_class(m):
    """(precision, recall, f1) fractions per class; zero-denominator classes
    score 0 and are reported back as degenerate."""
    k = m.shape[0]
    col = m.sum(axis=0)
    row = m.sum(axis=1)
    diag = np.diag(m)
    pre = np.zeros(k)
    rec = np.zeros(k)
    f1 = np.zeros(k)
    degenerate = []
    for c in range(k):
        if col[c] > 0:
            pre[c] = diag[c] / col[c]
        if row[c] > 0:
            rec[c] = diag[c] / row[c]
        if col[c] == 0 or row[c] == 0:
            degenerate.append(c)
        if pre[c] + rec[c] > 0:
            f1[c] = 2 * pre[c] * rec[c] / (pre[c] + rec[c])
    return pre, rec, f1, degenerate


def _block(m, classes):
    pre, rec, f1, _ = _per_class(m)
    total = m.sum()
    sel = np.asarray(classes, dtype=np.int64)
    return {
        "OA": 100.0 * np.trace(m) / total,
        "F1": 100.0 * f1[sel].mean(),
        "Kappa": 100.0 * _kappa(m),
        "Pre": 100.0 * pre[sel].mean(),
        "Rec": 100.0 * rec[sel].mean(),
    }


def compute_metrics(pred_moment, pred_area, labels, t_len=None):
    """Score predicted argmax grids against reference ChangeLabels.

    ``pred_moment``/``pred_area`` are integer grids (any leading batch
    shape); ``labels`` is a ChangeLabels or a (moment, area) pair of
    reference grids of the same total size.
    """
    if hasattr(labels, "moment"):
        ref_moment, ref_area = labels.moment, labels.area
    else:
        ref_moment, ref_area = labels
    ref_moment = np.asarray(ref_moment)
    pred_moment = np.asarray(pred_moment)
    if ref_moment.size != pred_moment.size:
        raise ShapeError("moment grids differ in size")
    if t_len is None:
        t_len = int(max(ref_moment.max(), pred_moment.max())) + 1
    t_len = max(t_len, 2)

    m_area = confusion_matrix(ref_area, pred_area, 2)
    m_moment = confusion_matrix(ref_moment, pred_moment, t_len)

    area = _block(m_area, classes=[1])  # score the change class
    present = np.flatnonzero(m_moment.sum(axis=1) > 0)
    moment = _block(m_moment, classes=present)
    changed = present[present != 0]
    if changed.size:
        moment_changed = _block(m_moment, classes=changed)
    else:
        moment_changed = {k: 0.0 for k in ("OA", "F1", "Kappa", "Pre", "Rec")}
        moment_changed["OA"] = moment["OA"]
        moment_changed["Kappa"] = moment["Kappa"]

    _, _, _, degenerate = _per_class(m_moment)
    return MetricsReport(
        area=area,
        moment=moment,
        moment_changed_only=moment_changed,
        area_confusion=m_area,
        moment_confusion=m_moment,
        degenerate_classes=degenerate,
    )
