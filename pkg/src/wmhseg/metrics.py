"""Voxel, boundary, curve and lesion-level evaluation metrics.

Empty-set conventions (every metric is defined on every input except HD95):

* precision / recall with a zero denominator: 1.0 when prediction and truth
  are both empty, else 0.0
* dice / jaccard of two empty masks: 1.0
* hd95 with either mask empty: :class:`UndefinedMetricError`; reports carry
  it as a missing value with ``hd95_missing=1``, never as 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import GeometryError, UndefinedMetricError

EIGHT = np.ones((3, 3), dtype=bool)

# classes scored by default: ventricle, normal WMH, abnormal WMH
EVAL_CLASSES = {1: "ventricle", 2: "normal_wmh", 3: "abnormal_wmh"}
METRIC_NAMES = ("precision", "recall", "dice", "jaccard", "hd95_mm")
CSV_COLUMNS = ("case_id", "class", "precision", "recall", "dice", "jaccard", "hd95_mm",
               "hd95_missing", "pred_empty", "truth_empty", "hd95_mode")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise GeometryError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def confusion(pred, truth) -> ConfusionCounts:
    pred, truth = _pair(pred, truth)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred)) - tp
    fn = int(np.count_nonzero(truth)) - tp
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def dice(pred, truth) -> float:
    c = confusion(pred, truth)
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def jaccard(pred, truth) -> float:
    c = confusion(pred, truth)
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the mask
    (the image exterior counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    face = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=face, border_value=0)


def nearest_rank(values: np.ndarray, pct: int = 95) -> float:
    """Smallest value with at least ``pct`` percent of the sample at or below it."""
    n = values.size
    k = (pct * n + 99) // 100  # ceil(pct * n / 100) in exact integer arithmetic
    return float(np.partition(values, k - 1)[k - 1])


def directed_distances(a, b, spacing) -> np.ndarray:
    """Distance (mm) from each boundary voxel of ``a`` to the nearest boundary voxel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dt = ndimage.distance_transform_edt(~bb, sampling=spacing)
    return dt[ba]


def hd95(pred, truth, spacing=(0.9, 0.9)) -> float:
    """Symmetric 95th-percentile boundary distance in mm.

    ``spacing`` is per array axis, e.g. ``(row_mm, col_mm)`` for a slice or
    ``(thickness, row_mm, col_mm)`` for a stacked volume.
    """
    pred, truth = _pair(pred, truth)
    if len(spacing) != pred.ndim:
        raise GeometryError(f"spacing has {len(spacing)} entries for a {pred.ndim}-D mask")
    if not pred.any() or not truth.any():
        raise UndefinedMetricError("undefined boundary distance: a mask is empty")
    d_ab = directed_distances(pred, truth, spacing)
    d_ba = directed_distances(truth, pred, spacing)
    return max(nearest_rank(d_ab), nearest_rank(d_ba))


# -- curves -------------------------------------------------------------------

@dataclass
class Curve:
    kind: str
    thresholds: np.ndarray
    x: np.ndarray  # recall (PR) or false-positive rate (ROC)
    y: np.ndarray  # precision (PR) or true-positive rate (ROC)
    auc: float

    def to_dict(self) -> dict:
        xk, yk = ("recall", "precision") if self.kind == "pr" else ("fpr", "tpr")
        return {"kind": self.kind, "auc": self.auc, "thresholds": self.thresholds.tolist(),
                xk: self.x.tolist(), yk: self.y.tolist()}


def _sweep(scores, truth, n_thresholds):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if scores.shape != truth.shape:
        raise GeometryError("scores and truth differ in size")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    # last position of each run of equal scores = one operating point per distinct value
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    if n_thresholds is not None and last.size > n_thresholds:
        pick = np.unique(np.rint(np.linspace(0, last.size - 1, n_thresholds)).astype(int))
        last = last[pick]
    return s[last], tp[last], fp[last], int(t.sum()), int((~t).sum())


def pr_curve(scores, truth, n_thresholds: int | None = 1000) -> Curve:
    """Precision/recall at every distinct score (descending), predicting
    positive where ``score >= threshold``; AUC is the average precision
    ``sum (R_i - R_{i-1}) P_i``."""
    thr, tp, fp, npos, _ = _sweep(scores, truth, n_thresholds)
    if npos == 0:
        raise UndefinedMetricError("PR curve undefined: truth has no positive voxels")
    prec = tp / (tp + fp)
    rec = tp / npos
    return Curve("pr", thr, rec, prec, _average_precision(tp, fp, npos))


def _average_precision(tp, fp, npos) -> float:
    # The counts are integers, so the sum is a rational number; summing it
    # exactly and rounding once keeps e.g. 1/2 + 1/2 * 2/3 at exactly 5/6.
    acc, prev = Fraction(0), 0
    for a, b in zip(tp.tolist(), fp.tolist()):
        if a != prev:
            acc += Fraction((a - prev) * a, a + b)
            prev = a
    return float(acc / npos)


def roc_curve(scores, truth, n_thresholds: int | None = 1000) -> Curve:
    thr, tp, fp, npos, nneg = _sweep(scores, truth, n_thresholds)
    if npos == 0 or nneg == 0:
        raise UndefinedMetricError("ROC curve undefined: truth contains a single class")
    tpr = np.r_[0.0, tp / npos]
    fpr = np.r_[0.0, fp / nneg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return Curve("roc", np.r_[np.inf, thr], fpr, tpr, auc)


# -- lesion level ---------------------------------------------------------------

@dataclass(frozen=True)
class LesionCounts:
    """Lesion-level confusion; true negatives are not defined for lesions."""

    tp: int
    fp: int
    fn: int
    tn: int = 0
    tn_defined: bool = False


def lesion_confusion(pred_labels, truth_labels, class_id: int) -> LesionCounts:
    """8-connected lesions; a truth lesion is detected if any of its voxels
    is predicted as the class (one prediction may cover several lesions)."""
    p = np.asarray(pred_labels) == class_id
    t = np.asarray(truth_labels) == class_id
    p, t = _pair(p, t)
    structure = np.ones((3,) * p.ndim, dtype=bool)
    t_lab, nt = ndimage.label(t, structure=structure)
    p_lab, np_ = ndimage.label(p, structure=structure)
    hit_truth = np.unique(t_lab[p & t])
    hit_pred = np.unique(p_lab[p & t])
    tp = int(np.count_nonzero(hit_truth))
    matched_pred = int(np.count_nonzero(hit_pred))
    return LesionCounts(tp=tp, fp=np_ - matched_pred, fn=nt - tp)


@dataclass
class NormalAbnormalMatrix:
    """Rows: truth (normal, abnormal); columns: prediction (normal, abnormal).

    Restricted to voxels that are WMH (class 2 or 3) in the truth.
    ``missed`` counts those of them the label map put outside both WMH
    classes; they are tabulated in the normal column.
    """

    matrix: np.ndarray
    missed: int = 0

    @property
    def sensitivity(self) -> float:
        row = self.matrix[1].sum()
        return float(self.matrix[1, 1] / row) if row else float("nan")

    @property
    def specificity(self) -> float:
        row = self.matrix[0].sum()
        return float(self.matrix[0, 0] / row) if row else float("nan")

    @property
    def precision(self) -> float:
        col = self.matrix[:, 1].sum()
        return float(self.matrix[1, 1] / col) if col else float("nan")

    @property
    def dice(self) -> float:
        tp, fp, fn = self.matrix[1, 1], self.matrix[0, 1], self.matrix[1, 0]
        d = 2 * tp + fp + fn
        return float(2 * tp / d) if d else float("nan")

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "rows": ["truth_normal", "truth_abnormal"],
                "cols": ["pred_normal", "pred_abnormal"], "missed": self.missed,
                "sensitivity": self.sensitivity, "specificity": self.specificity,
                "precision": self.precision, "dice": self.dice}


def normal_vs_abnormal_matrix(pred_labels, truth_labels, probs=None, threshold: float = 0.3) -> NormalAbnormalMatrix:
    """Cross-tabulate normal vs abnormal WMH on truth-WMH voxels.

    With ``probs`` (class-first probability maps) a voxel is called abnormal
    where ``p_abn / (p_abn + p_norm) >= threshold``; otherwise where its
    predicted label is 3.
    """
    truth = np.asarray(truth_labels)
    wmh = (truth == 2) | (truth == 3)
    if not wmh.any():
        raise UndefinedMetricError("normal/abnormal matrix undefined: no WMH voxels in truth")
    truth_abn = truth[wmh] == 3
    missed = 0
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape[1:] != truth.shape:
            raise GeometryError("probability maps do not match truth geometry")
        pn, pa = probs[2][wmh], probs[3][wmh]
        tot = pn + pa
        ratio = np.divide(pa, tot, out=np.zeros_like(pa), where=tot > 0)
        pred_abn = ratio >= threshold
    else:
        pred = np.asarray(pred_labels)
        if pred.shape != truth.shape:
            raise GeometryError("prediction and truth differ in shape")
        pred_abn = pred[wmh] == 3
        missed = int(np.count_nonzero((pred[wmh] != 2) & (pred[wmh] != 3)))
    m = np.zeros((2, 2), dtype=np.int64)
    for ti in (0, 1):
        for pi in (0, 1):
            m[ti, pi] = np.count_nonzero((truth_abn == bool(ti)) & (pred_abn == bool(pi)))
    return NormalAbnormalMatrix(m, missed)


# -- per-case rows and aggregation -----------------------------------------------

def class_row(case_id: str, class_name: str, pred, truth, spacing, hd_mode: str = "3d") -> dict:
    """One CSV row of voxel and boundary metrics for a binary class mask."""
    pred, truth = _pair(pred, truth)
    c = confusion(pred, truth)
    row = {"case_id": case_id, "class": class_name,
           "precision": precision(c), "recall": recall(c),
           "dice": dice(pred, truth), "jaccard": jaccard(pred, truth),
           "hd95_mm": None, "hd95_missing": 0,
           "pred_empty": int(not pred.any()), "truth_empty": int(not truth.any()),
           "hd95_mode": hd_mode}
    try:
        if hd_mode == "3d" or pred.ndim == 2:
            row["hd95_mm"] = hd95(pred, truth, spacing)
        else:
            per_slice = []
            for p2, t2 in zip(pred, truth):
                try:
                    per_slice.append(hd95(p2, t2, spacing[1:]))
                except UndefinedMetricError:
                    pass
            if not per_slice:
                raise UndefinedMetricError("no slice with both masks non-empty")
            row["hd95_mm"] = float(np.mean(per_slice))
    except UndefinedMetricError:
        row["hd95_missing"] = 1
    return row


def summarize(values) -> dict:
    v = np.asarray([x for x in values if x is not None and not (isinstance(x, float) and math.isnan(x))],
                   dtype=np.float64)
    out = {"n": int(v.size), "n_missing": len(values) - int(v.size)}
    if v.size == 0:
        out.update({k: None for k in ("mean", "sd", "median", "q1", "q3", "min", "max")})
        return out
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    out.update({"mean": float(v.mean()), "sd": float(v.std()), "median": float(med),
                "q1": float(q1), "q3": float(q3), "min": float(v.min()), "max": float(v.max())})
    return out


@dataclass
class MetricsReport:
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"summary": self.summary, "curves": self.curves, **self.extra}


def aggregate(rows: list[dict]) -> MetricsReport:
    """Mean, population sd, median, quartiles and range per class and metric."""
    if not rows:
        raise ValueError("cannot aggregate an empty list of rows")
    by_class: dict[str, list[dict]] = {}
    for r in rows:
        by_class.setdefault(r["class"], []).append(r)
    summary = {cls: {m: summarize([r.get(m) for r in rs]) for m in METRIC_NAMES if any(m in r for r in rs)}
               for cls, rs in by_class.items()}
    return MetricsReport(list(rows), summary)


def write_rows_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_COLUMNS})


def read_rows_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            row = dict(r)
            for k in ("precision", "recall", "dice", "jaccard", "hd95_mm"):
                row[k] = float(row[k]) if row[k] != "" else None
            for k in ("hd95_missing", "pred_empty", "truth_empty"):
                row[k] = int(row[k])
            out.append(row)
    return out


def write_report_json(report: MetricsReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
