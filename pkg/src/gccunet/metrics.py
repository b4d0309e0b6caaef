"""Pixel-level segmentation metrics and connectivity/area/length scores.

Metrics whose denominators vanish are reported as ``None`` rather than 0.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage.measure import label as cc_label
from skimage.morphology import binary_dilation, disk

FRACTION_FIELDS = ("Se", "Sp", "Acc", "F1", "Pre", "Rec", "AUROC", "C", "A", "L", "F")


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def confusion_counts(scores, labels, fov=None, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) over field-of-view pixels; a pixel is positive when score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    inside = np.ones(scores.shape, bool) if fov is None else np.asarray(fov).astype(bool)
    pred = scores >= threshold
    s, y = pred[inside], labels[inside]
    tp = int(np.count_nonzero(s & y))
    tn = int(np.count_nonzero(~s & ~y))
    fp = int(np.count_nonzero(s & ~y))
    fn = int(np.count_nonzero(~s & y))
    return tp, tn, fp, fn


def mcc(tp: int, tn: int, fp: int, fn: int) -> Optional[float]:
    den = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    if den == 0:
        return None
    return (float(tp) * tn - float(fp) * fn) / den


def rates(tp: int, tn: int, fp: int, fn: int) -> dict:
    se = _ratio(tp, tp + fn)
    pre = _ratio(tp, tp + fp)
    return {
        "Se": se,
        "Sp": _ratio(tn, tn + fp),
        "Acc": _ratio(tp + tn, tp + tn + fp + fn),
        "Pre": pre,
        "Rec": se,
        "F1": _ratio(2 * tp, 2 * tp + fp + fn),
        "Mcc": mcc(tp, tn, fp, fn),
    }


def auroc(scores, labels) -> Optional[float]:
    """Area under the ROC curve, trapezoidal, one ROC point per distinct score."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    P = int(y.sum())
    N = y.size - P
    if P == 0 or N == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[ends].astype(np.float64)
    fps = (ends + 1 - tps)
    tpr = np.r_[0.0, tps / P]
    fpr = np.r_[0.0, fps / N]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def thin(mask) -> np.ndarray:
    """Two-subiteration Zhang-Suen thinning of a binary mask."""
    img = np.pad(np.asarray(mask).astype(bool), 1)
    while True:
        changed = False
        for step in (0, 1):
            p2, p3, p4 = img[:-2, 1:-1], img[:-2, 2:], img[1:-1, 2:]
            p5, p6, p7 = img[2:, 2:], img[2:, 1:-1], img[2:, :-2]
            p8, p9 = img[1:-1, :-2], img[:-2, :-2]
            ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = sum(r.astype(np.int8) for r in ring[:8])
            a = sum((~ring[k] & ring[k + 1]).astype(np.int8) for k in range(8))
            if step == 0:
                c = ~(p2 & p4 & p6) & ~(p4 & p6 & p8)
            else:
                c = ~(p2 & p4 & p8) & ~(p2 & p6 & p8)
            remove = img[1:-1, 1:-1] & (b >= 2) & (b <= 6) & (a == 1) & c
            if remove.any():
                img[1:-1, 1:-1] &= ~remove
                changed = True
        if not changed:
            return img[1:-1, 1:-1].copy()


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D mask, got {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary")
    return a.astype(bool)


def cal_metrics(pred, gt, radius: int = 2) -> tuple[Optional[float], ...]:
    """(C, A, L, F) for binary masks; all None when ``gt`` is empty.

    C penalizes the difference in 8-connected component counts relative to
    the vessel area, A is the overlap of each mask with the dilated other,
    L compares skeletons against the dilated other mask; F = C*A*L.
    """
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred {p.shape} and gt {g.shape} differ")
    n_gt = int(g.sum())
    if n_gt == 0:
        return None, None, None, None
    fp = disk(radius)
    dp, dg = binary_dilation(p, fp), binary_dilation(g, fp)
    cc_p = int(cc_label(p, connectivity=2).max())
    cc_g = int(cc_label(g, connectivity=2).max())
    C = 1.0 - min(1.0, abs(cc_p - cc_g) / n_gt)
    A = np.count_nonzero((dp & g) | (p & dg)) / np.count_nonzero(p | g)
    sp, sg = thin(p), thin(g)
    union = np.count_nonzero(sp | sg)
    L = np.count_nonzero((sp & dg) | (dp & sg)) / union if union else 0.0
    return C, A, L, C * A * L


@dataclass
class MetricsReport:
    TP: int
    TN: int
    FP: int
    FN: int
    Se: Optional[float]
    Sp: Optional[float]
    Acc: Optional[float]
    F1: Optional[float]
    Pre: Optional[float]
    Rec: Optional[float]
    AUROC: Optional[float]
    Mcc: Optional[float]
    C: Optional[float]
    A: Optional[float]
    L: Optional[float]
    F: Optional[float]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check(self) -> None:
        for name in FRACTION_FIELDS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise AssertionError(f"{name}={v} outside [0, 1]")
        if self.Mcc is not None and not -1.0 <= self.Mcc <= 1.0:
            raise AssertionError(f"Mcc={self.Mcc} outside [-1, 1]")


def _mean_defined(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def metrics_report(scores, labels, fovs, threshold: float = 0.5) -> MetricsReport:
    """Pool confusion counts and AUROC over all FOV pixels; C/A/L are per-image means.

    ``scores``, ``labels`` and ``fovs`` are [N,H,W] (or a single [H,W]).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    fovs = np.asarray(fovs)
    if scores.ndim == 2:
        scores, labels, fovs = scores[None], labels[None], fovs[None]
    tp, tn, fp, fn = confusion_counts(scores, labels, fovs, threshold)
    inside = fovs.astype(bool)
    area = auroc(scores[inside], labels[inside])
    cal = []
    for s, y, f in zip(scores, labels, fovs):
        pred = ((s >= threshold) & f.astype(bool)).astype(np.uint8)
        cal.append(cal_metrics(pred, (y.astype(bool) & f.astype(bool)).astype(np.uint8)))
    C, A, L = (_mean_defined(c[i] for c in cal) for i in range(3))
    F = None if None in (C, A, L) else C * A * L
    r = rates(tp, tn, fp, fn)
    return MetricsReport(tp, tn, fp, fn, r["Se"], r["Sp"], r["Acc"], r["F1"], r["Pre"], r["Rec"],
                         area, r["Mcc"], C, A, L, F)


TABLE_COLUMNS = ("F1", "Se", "Sp", "Acc", "AUROC", "Mcc", "C", "A", "L", "F")


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Fixed-width table, one row per named report; undefined values print as n/a."""
    head = f"{'run':<16}" + "".join(f"{c:>8}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        cells = []
        for c in TABLE_COLUMNS:
            v = getattr(rep, c)
            cells.append(f"{'n/a':>8}" if v is None else f"{v:>8.4f}")
        lines.append(f"{name:<16}" + "".join(cells))
    return "\n".join(lines)
