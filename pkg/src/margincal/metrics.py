"""Confusion counting, IoU-family metrics, and the empirical lower bounds.

IoU is computed both from raw counts, TP/(TP+FP+FN), and from the empirical
probabilities, (P_k - P_k0)/(P_k + P_0k); the two must agree to 1e-12.  The
lower bound replaces the miss probabilities with their margin-loss envelopes:
IoU_lower_k = (P_k - l_k0)/(P_k + l_0k) where l_k0 sums the rho-margin loss
of the true-class margins and l_0k that of the negated background margins.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError, DegenerateError, NumericError, ShapeError
from .losses import ScoreBatch, _phi, compute_margins_lambda
from .margins import MarginOffsets
from .segdata import LabelStats, MaskBatch


@dataclass
class ConfusionCounts:
    """Exact per-class true-positive / false-positive / false-negative counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    total: int

    def __post_init__(self) -> None:
        self.tp = np.asarray(self.tp, dtype=np.int64)
        self.fp = np.asarray(self.fp, dtype=np.int64)
        self.fn = np.asarray(self.fn, dtype=np.int64)
        if np.any(self.tp < 0) or np.any(self.fp < 0) or np.any(self.fn < 0):
            raise DataError("confusion counts must be non-negative")
        if int(self.tp.sum()) > self.total:
            raise DataError("sum of true positives exceeds the evaluated total")

    @property
    def k_classes(self) -> int:
        return self.tp.size

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        """Exact, order-independent accumulation of partial counts."""
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
            self.total + other.total,
        )


@dataclass
class MetricsReport:
    """Evaluation quantities for one prediction/label pairing.

    Classes absent from both truth and prediction get NaN IoU/DSC and are
    excluded from the means; ``present`` records which classes counted.
    The lower-bound fields stay None until filled by ``lower_bound_report``,
    whose ``bound_scope`` says whether the 1/N normalization used the whole
    dataset or just the evaluated batch.
    """

    iou_per_class: np.ndarray
    dsc_per_class: np.ndarray
    miou: float
    pixel_accuracy: float
    p_k: np.ndarray
    p_k0: np.ndarray
    p_0k: np.ndarray
    present: np.ndarray
    iou_lower_per_class: Optional[np.ndarray] = None
    miou_lower: Optional[float] = None
    ell_k0: Optional[np.ndarray] = None
    ell_0k: Optional[np.ndarray] = None
    bound_scope: Optional[str] = None


def confusion(pred: MaskBatch, truth: MaskBatch, k_classes: int) -> ConfusionCounts:
    """Tally exact confusion counts, skipping pixels the truth marks as ignore."""
    if (pred.width, pred.height, pred.n_images) != (
        truth.width,
        truth.height,
        truth.n_images,
    ):
        raise ShapeError("prediction and truth masks have different shapes")
    valid = truth.valid_mask()
    t = truth.labels[valid].astype(np.int64)
    p = pred.labels[valid].astype(np.int64)
    if t.size and (int(t.max()) >= k_classes or int(p.max()) >= k_classes):
        raise DataError(f"labels exceed k_classes={k_classes}")
    matrix = np.bincount(t * k_classes + p, minlength=k_classes * k_classes)
    matrix = matrix.reshape(k_classes, k_classes)
    tp = np.diag(matrix).copy()
    fn = matrix.sum(axis=1) - tp
    fp = matrix.sum(axis=0) - tp
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, total=int(t.size))


def iou_report(counts: ConfusionCounts) -> MetricsReport:
    """IoU, DSC, pixel accuracy and the empirical probabilities from counts."""
    tp = counts.tp.astype(np.float64)
    fp = counts.fp.astype(np.float64)
    fn = counts.fn.astype(np.float64)
    total = float(counts.total)
    if total <= 0:
        raise DegenerateError("no evaluated pixels")

    union = tp + fp + fn
    present = union > 0
    iou = np.full(counts.k_classes, np.nan)
    dsc = np.full(counts.k_classes, np.nan)
    iou[present] = tp[present] / union[present]
    dsc[present] = 2.0 * tp[present] / (2.0 * tp[present] + fp[present] + fn[present])

    p_k = (tp + fn) / total
    p_k0 = fn / total
    p_0k = fp / total
    # probability form must agree with the count form
    iou_prob = np.full(counts.k_classes, np.nan)
    iou_prob[present] = (p_k[present] - p_k0[present]) / (p_k[present] + p_0k[present])
    if present.any() and np.max(np.abs(iou_prob[present] - iou[present])) > 1e-12:
        raise NumericError("count-form and probability-form IoU disagree")

    if not present.any():
        raise DegenerateError("every class is absent from truth and prediction")
    return MetricsReport(
        iou_per_class=iou,
        dsc_per_class=dsc,
        miou=float(np.mean(iou[present])),
        pixel_accuracy=float(tp.sum() / total),
        p_k=p_k,
        p_k0=p_k0,
        p_0k=p_0k,
        present=present,
    )


def predict_labels(s: ScoreBatch, like: MaskBatch) -> MaskBatch:
    """Argmax-of-raw-scores predictions shaped like the reference mask.

    Ties break to the lowest class index, matching the loss subgradient rule.
    """
    if s.n_pixels != like.n_pixels:
        raise ShapeError("scores and mask cover different pixel counts")
    labels = np.argmax(s.scores, axis=1).astype(np.uint8)
    return MaskBatch(
        labels=labels,
        width=like.width,
        height=like.height,
        n_images=like.n_images,
        ignore_index=like.ignore_index,
    )


def lower_bound_report(
    s: ScoreBatch,
    y: MaskBatch,
    m: MarginOffsets,
    stats: Optional[LabelStats] = None,
) -> MetricsReport:
    """Full report plus the margin-loss lower bounds on IoU.

    The normalizing pixel count is always the evaluated batch's own valid
    count; ``bound_scope`` is "dataset" when that matches ``stats.n_total``
    (full-dataset evaluation) and "batch" otherwise.  The sandwich
    P_k0 <= l_k0, P_0k <= l_0k, IoU_lower_k <= IoU_k is verified before
    returning.
    """
    pred = predict_labels(s, y)
    report = iou_report(confusion(pred, y, s.k_classes))

    valid = y.valid_mask()
    n = int(valid.sum())
    lam = compute_margins_lambda(s).margins
    rows = np.flatnonzero(valid)
    labels = y.labels[rows].astype(np.int64)
    k_cls = s.k_classes

    phi_fg = _phi(lam[rows, labels], m.rho_k0[labels])
    ell_k0 = np.bincount(labels, weights=phi_fg, minlength=k_cls) / n

    phi_bg = _phi(-lam, m.rho_0k[None, :])
    is_fg = np.zeros_like(lam, dtype=bool)
    is_fg[rows, labels] = True
    phi_bg = np.where(valid[:, None] & ~is_fg, phi_bg, 0.0)
    ell_0k = phi_bg.sum(axis=0) / n

    denom = report.p_k + ell_0k
    if np.any(denom[report.present] == 0):
        raise DegenerateError("P_k + l_0k vanished for a present class")
    iou_lower = np.full(k_cls, np.nan)
    iou_lower[report.present] = (
        report.p_k[report.present] - ell_k0[report.present]
    ) / denom[report.present]

    pr = report.present
    if (
        np.any(report.p_k0[pr] > ell_k0[pr] + 1e-12)
        or np.any(report.p_0k[pr] > ell_0k[pr] + 1e-12)
        or np.any(iou_lower[pr] > report.iou_per_class[pr] + 1e-12)
    ):
        raise NumericError("lower-bound sandwich violated; margin-offsets corrupt?")

    report.iou_lower_per_class = iou_lower
    report.miou_lower = float(np.mean(iou_lower[pr]))
    report.ell_k0 = ell_k0
    report.ell_0k = ell_0k
    report.bound_scope = (
        "dataset" if stats is not None and stats.n_total == n else "batch"
    )
    return report


METRICS_CSV_HEADER = ["class_index", "iou", "dsc", "p_k", "p_k0", "p_0k", "iou_lower"]


def write_metrics_csv(report: MetricsReport, path) -> None:
    """Per-class rows followed by miou / miou_lower / pixel_acc summary rows."""
    k_cls = report.iou_per_class.size
    lower = report.iou_lower_per_class
    if lower is None:
        lower = np.full(k_cls, np.nan)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for k in range(k_cls):
            writer.writerow(
                [
                    k,
                    f"{report.iou_per_class[k]:.12g}",
                    f"{report.dsc_per_class[k]:.12g}",
                    f"{report.p_k[k]:.12g}",
                    f"{report.p_k0[k]:.12g}",
                    f"{report.p_0k[k]:.12g}",
                    f"{lower[k]:.12g}",
                ]
            )
        writer.writerow(["miou", f"{report.miou:.12g}", "", "", "", "", ""])
        miou_lower = "" if report.miou_lower is None else f"{report.miou_lower:.12g}"
        writer.writerow(["miou_lower", miou_lower, "", "", "", "", ""])
        writer.writerow(["pixel_acc", f"{report.pixel_accuracy:.12g}", "", "", "", "", ""])
