"""Margin-based and baseline per-pixel losses with analytic gradients.

The margin of pixel i for class k is lambda_ik = s_ik - max_{j!=k} s_ij.
Calibration shifts it by the class margin-offsets (minus rho_k0 on the true
class, plus rho_0k elsewhere), and the trainable objective replaces the
piecewise-linear rho-margin loss min(1, max(0, 1 - lambda/rho)) with its
smooth upper bound log2(1 + 2^(-sbar)), whose gradient never vanishes.

All losses are pure functions of (scores, labels); reductions run in a fixed
order so repeated evaluations are bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ConfigError, NumericError, ShapeError
from .margins import MarginOffsets
from .segdata import MaskBatch

_LN2 = float(np.log(2.0))
#: |sbar| clamp before exponentiation; the tail it cuts is < 2^-500
_EXP_CLAMP = 500.0

BASELINE_FOCAL_GAMMA = 0.4
BASELINE_DICE_EPS = 1e-6
BASELINE_TVERSKY_ALPHA = 0.3
BASELINE_TVERSKY_BETA = 0.7

LOSS_NAMES = ("margin_calibration", "cross_entropy", "focal", "soft_dice", "tversky")


@dataclass
class ScoreBatch:
    """Raw per-pixel class scores, one row per pixel."""

    scores: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ShapeError("scores must be a (n_pixels, k_classes) array")
        if not np.all(np.isfinite(self.scores)):
            bad = np.argwhere(~np.isfinite(self.scores))[0]
            raise NumericError(
                f"non-finite score at pixel {int(bad[0])}, class {int(bad[1])}"
            )

    @property
    def n_pixels(self) -> int:
        return self.scores.shape[0]

    @property
    def k_classes(self) -> int:
        return self.scores.shape[1]


@dataclass
class CalibratedScores:
    """Margins and margin-offset-shifted scores for a batch.

    ``ignored`` marks pixels whose shifted scores were left equal to the raw
    margins because their label is the ignore index.
    """

    margins: np.ndarray
    calibrated: np.ndarray
    ignored: Optional[np.ndarray] = None


@dataclass
class LossResult:
    """Scalar loss with its gradient and the per-class decomposition.

    ``per_class_fg[k]`` holds the true-class (k-versus-background) part and
    ``per_class_bg[k]`` the background-scored-as-k part; their total equals
    ``value``.  ``grad`` is None for objectives reported without gradients.
    """

    value: float
    grad: Optional[np.ndarray]
    per_class_fg: np.ndarray
    per_class_bg: np.ndarray


def _check_pair(s: ScoreBatch, y: MaskBatch) -> np.ndarray:
    if s.n_pixels != y.n_pixels:
        raise ShapeError(
            f"scores cover {s.n_pixels} pixels but mask has {y.n_pixels}"
        )
    valid = y.valid_mask()
    bad = valid & (y.labels >= s.k_classes)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise ShapeError(
            f"label {int(y.labels[idx])} at pixel {idx} exceeds k_classes={s.k_classes}"
        )
    return valid


def _top2(scores: np.ndarray):
    """First and second maxima per row with their (first-occurrence) indices."""
    n = scores.shape[0]
    rows = np.arange(n)
    j1 = np.argmax(scores, axis=1)
    m1 = scores[rows, j1]
    masked = scores.copy()
    masked[rows, j1] = -np.inf
    j2 = np.argmax(masked, axis=1)
    m2 = masked[rows, j2]
    return j1, m1, j2, m2


def compute_margins_lambda(s: ScoreBatch) -> CalibratedScores:
    """Fill the margin array lambda_ik = s_ik - max_{j!=k} s_ij (margins only)."""
    if s.k_classes < 2:
        raise ConfigError("margins need at least 2 classes")
    j1, m1, _, m2 = _top2(s.scores)
    lam = s.scores - _best_other(s.scores, j1, m1, m2)
    return CalibratedScores(margins=lam, calibrated=lam.copy())


def rho_margin_loss(lam: float, rho: float) -> float:
    """Piecewise-linear margin loss min(1, max(0, 1 - lam/rho))."""
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    return min(1.0, max(0.0, 1.0 - lam / rho))


def _phi(lam: np.ndarray, rho) -> np.ndarray:
    return np.clip(1.0 - lam / rho, 0.0, 1.0)


def calibrated_log_loss_scalar(sbar) -> np.ndarray:
    """Stable log2(1 + 2^(-sbar)) via max(x,0) + log2(1 + 2^-|x|) with x = -sbar."""
    x = np.clip(np.asarray(-sbar, dtype=np.float64), -_EXP_CLAMP, _EXP_CLAMP)
    return np.maximum(x, 0.0) + np.log1p(np.exp2(-np.abs(x))) / _LN2


def rho_calibrated_log_loss(lam, rho) -> np.ndarray:
    """Smooth upper bound of the rho-margin loss: log2(1 + 2^(rho - lam))."""
    if np.any(np.asarray(rho) <= 0):
        raise ConfigError("rho must be positive")
    return calibrated_log_loss_scalar(np.asarray(lam, dtype=np.float64) - rho)


def calibrate(s: ScoreBatch, y: MaskBatch, m: MarginOffsets) -> CalibratedScores:
    """Shift margins by the per-class offsets: -rho_k0 on the labelled class,
    +rho_0k everywhere else.  Ignore-index pixels keep their raw margins."""
    valid = _check_pair(s, y)
    if m.k_classes != s.k_classes:
        raise ShapeError("margin-offsets and scores disagree on the class count")
    cal = compute_margins_lambda(s)
    lam = cal.margins
    sbar = lam + m.rho_0k[None, :]
    rows = np.flatnonzero(valid)
    labels = y.labels[rows].astype(np.int64)
    sbar[rows, labels] = lam[rows, labels] - m.rho_k0[labels]
    sbar[~valid] = lam[~valid]
    return CalibratedScores(margins=lam, calibrated=sbar, ignored=~valid)


def _softplus2_sigmoid2(x: np.ndarray):
    """log2(1 + 2^x) and its derivative 1/(1 + 2^-x), without overflow.

    The sigmoid uses the algebraically identical (1 + tanh(x*ln2/2))/2, which
    needs no branching on the sign of x.
    """
    mag = np.abs(x)
    np.minimum(mag, _EXP_CLAMP, out=mag)
    t = np.exp2(-mag)
    term = np.maximum(x, 0.0)
    term += np.log1p(t) * (1.0 / _LN2)
    sig = np.tanh(x * (0.5 * _LN2))
    sig += 1.0
    sig *= 0.5
    return term, sig


def _best_other(scores: np.ndarray, j1, m1, m2) -> np.ndarray:
    """Per (pixel, class) entry, the best score among the *other* classes."""
    out = np.broadcast_to(m1[:, None], scores.shape).copy()
    out[np.arange(scores.shape[0]), j1] = m2
    return out


def calibrated_log_loss(
    s: ScoreBatch, y: MaskBatch, m: MarginOffsets, *, use_fast_path: bool = True
) -> LossResult:
    """Smoothed margin objective with its full analytic gradient.

    Value: (1/N_s) * sum_k [ sum_{i in class k} log2(1 + 2^(-sbar_ik))
    + sum_{i not in class k} log2(1 + 2^(sbar_ik)) ] over non-ignored pixels.
    The gradient chains through the margin's max term, routed to the single
    lowest-indexed best competitor of each (pixel, class) entry.

    When numba is available a fused one-pass kernel computes the identical
    quantities; ``use_fast_path=False`` forces the vectorized numpy route,
    mainly so tests can compare the two.
    """
    valid = _check_pair(s, y)
    n_valid = int(valid.sum())
    k_cls = s.k_classes
    if k_cls < 2:
        raise ConfigError("margins need at least 2 classes")
    if m.k_classes != k_cls:
        raise ShapeError("margin-offsets and scores disagree on the class count")
    if n_valid == 0:
        raise ShapeError("no valid pixels in batch")
    has_ignored = n_valid != s.n_pixels

    if use_fast_path and _kernels.HAVE_NUMBA:
        scores = np.ascontiguousarray(s.scores)
        grad = np.empty_like(scores)
        value, per_fg, per_bg, _ = _kernels.margin_loss_kernel(
            scores, y.labels, y.ignore_index, m.rho_0k, m.rho_k0, grad
        )
        return LossResult(float(value), grad, per_fg, per_bg)

    j1, m1, j2, m2 = _top2(s.scores)
    best_other = _best_other(s.scores, j1, m1, m2)
    rows = np.flatnonzero(valid)
    labels = y.labels[rows].astype(np.int64)
    lam_fg = s.scores[rows, labels] - best_other[rows, labels]

    # background-orientation shifted scores everywhere; labelled slots are
    # fixed up from lam_fg afterwards.  Large intermediates are reused via
    # out= since this is the training hot path.
    sbar = np.subtract(s.scores, best_other, out=best_other)
    sbar += m.rho_0k[None, :]

    mag = np.abs(sbar)
    np.minimum(mag, _EXP_CLAMP, out=mag)
    np.negative(mag, out=mag)
    t = np.exp2(mag, out=mag)
    term = np.maximum(sbar, 0.0)
    np.log1p(t, out=t)
    t *= 1.0 / _LN2
    term += t  # term = log2(1 + 2^sbar)

    sig = np.multiply(sbar, 0.5 * _LN2, out=sbar)
    np.tanh(sig, out=sig)
    sig += 1.0
    sig *= 0.5  # sig = 1/(1 + 2^-sbar)

    term_fg, sig_fg = _softplus2_sigmoid2(-(lam_fg - m.rho_k0[labels]))
    if has_ignored:
        term[~valid] = 0.0
        sig[~valid] = 0.0

    col_sums = term.sum(axis=0)
    fg_slot_bg = np.bincount(labels, weights=term[rows, labels], minlength=k_cls)
    per_class_bg = (col_sums - fg_slot_bg) / n_valid
    per_class_fg = np.bincount(labels, weights=term_fg, minlength=k_cls) / n_valid
    value = float(per_class_fg.sum() + per_class_bg.sum())

    # d term / d sbar: background 1/(1+2^-sbar), foreground -1/(1+2^sbar)
    grad = sig
    grad *= 1.0 / n_valid
    grad[rows, labels] = -sig_fg / n_valid

    # d lambda_ik/ds routes -1 to the best competitor: column j1 for every
    # k != j1, and column j2 for k = j1
    n = s.n_pixels
    ar = np.arange(n)
    g_at_j1 = grad[ar, j1].copy()
    row_sums = grad.sum(axis=1)
    grad[ar, j1] += g_at_j1 - row_sums
    grad[ar, j2] -= g_at_j1
    if has_ignored:
        grad[~valid] = 0.0
    return LossResult(value, grad, per_class_fg, per_class_bg)


def rho_margin_objective(s: ScoreBatch, y: MaskBatch, m: MarginOffsets) -> LossResult:
    """Piecewise-linear margin objective (value only; its gradient is reported
    nowhere because it explodes for small offsets and vanishes elsewhere)."""
    valid = _check_pair(s, y)
    n_valid = int(valid.sum())
    k_cls = s.k_classes
    if n_valid == 0:
        raise ShapeError("no valid pixels in batch")
    lam = compute_margins_lambda(s).margins
    rows = np.flatnonzero(valid)
    labels = y.labels[rows].astype(np.int64)

    phi_fg = _phi(lam[rows, labels], m.rho_k0[labels])
    phi_bg = _phi(-lam, m.rho_0k[None, :])
    is_fg = np.zeros_like(lam, dtype=bool)
    is_fg[rows, labels] = True
    phi_bg = np.where(valid[:, None] & ~is_fg, phi_bg, 0.0)

    per_class_fg = np.bincount(labels, weights=phi_fg, minlength=k_cls) / n_valid
    per_class_bg = phi_bg.sum(axis=0) / n_valid
    value = float(per_class_fg.sum() + per_class_bg.sum())
    return LossResult(value, None, per_class_fg, per_class_bg)


# ---------------------------------------------------------------------------
# Baseline losses (softmax-probability based)
# ---------------------------------------------------------------------------


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def _nll_parts(s: ScoreBatch, y: MaskBatch):
    valid = _check_pair(s, y)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("no valid pixels in batch")
    rows = np.flatnonzero(valid)
    labels = y.labels[rows].astype(np.int64)
    probs = _softmax(s.scores)
    return valid, n_valid, rows, labels, probs


def _per_class_from_rows(
    rows_loss: np.ndarray, labels: np.ndarray, k_cls: int, n_valid: int
):
    fg = np.bincount(labels, weights=rows_loss, minlength=k_cls) / n_valid
    return fg, np.zeros(k_cls)


def cross_entropy(
    s: ScoreBatch, y: MaskBatch, *, use_fast_path: bool = True
) -> LossResult:
    """Mean softmax negative log-likelihood over non-ignored pixels."""
    if use_fast_path and _kernels.HAVE_NUMBA:
        valid = _check_pair(s, y)
        if not valid.any():
            raise ShapeError("no valid pixels in batch")
        scores = np.ascontiguousarray(s.scores)
        grad = np.empty_like(scores)
        value, per_fg, _ = _kernels.cross_entropy_kernel(
            scores, y.labels, y.ignore_index, grad
        )
        return LossResult(float(value), grad, per_fg, np.zeros(s.k_classes))
    valid, n_valid, rows, labels, probs = _nll_parts(s, y)
    p_true = probs[rows, labels]
    nll = -np.log(np.maximum(p_true, 1e-300))
    grad = probs
    grad *= 1.0 / n_valid
    grad[rows, labels] -= 1.0 / n_valid
    if n_valid != s.n_pixels:
        grad[~valid] = 0.0
    fg, bg = _per_class_from_rows(nll, labels, s.k_classes, n_valid)
    return LossResult(float(fg.sum()), grad, fg, bg)


def focal(s: ScoreBatch, y: MaskBatch, gamma: float = BASELINE_FOCAL_GAMMA) -> LossResult:
    """Focal loss: NLL scaled by (1 - p_true)^gamma to emphasize hard pixels."""
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    valid, n_valid, rows, labels, probs = _nll_parts(s, y)
    q = probs[rows, labels]
    log_q = np.log(np.maximum(q, 1e-300))
    w = (1.0 - q) ** gamma
    loss_rows = -w * log_q

    # dL/dq, guarded where 1-q underflows (the limit of both terms is 0 there)
    one_minus = np.maximum(1.0 - q, 0.0)
    safe = one_minus > 1e-12
    dl_dq = np.zeros_like(q)
    if gamma > 0:
        dl_dq[safe] = (
            gamma * one_minus[safe] ** (gamma - 1.0) * log_q[safe]
            - one_minus[safe] ** gamma / q[safe]
        )
        dl_dq[~safe] = 0.0
    else:
        dl_dq = -1.0 / q
    # chain rule through softmax: dq/ds_ij = q * (1[j = label] - p_ij)
    grad = np.zeros_like(s.scores)
    coef = dl_dq * q / n_valid
    grad[rows] = -coef[:, None] * probs[rows]
    grad[rows, labels] += coef
    grad[~valid] = 0.0
    fg, bg = _per_class_from_rows(loss_rows, labels, s.k_classes, n_valid)
    return LossResult(float(fg.sum()), grad, fg, bg)


def _softmax_vjp(probs: np.ndarray, dp: np.ndarray) -> np.ndarray:
    inner = (dp * probs).sum(axis=1, keepdims=True)
    return probs * (dp - inner)


def soft_dice(s: ScoreBatch, y: MaskBatch, eps: float = BASELINE_DICE_EPS) -> LossResult:
    """Soft Dice loss 1 - mean_k (2*I_k + eps)/(A_k + B_k + eps) on softmax scores."""
    valid, n_valid, rows, labels, probs = _nll_parts(s, y)
    k_cls = s.k_classes
    onehot = np.zeros((n_valid, k_cls))
    onehot[np.arange(n_valid), labels] = 1.0
    p = probs[rows]
    inter = (p * onehot).sum(axis=0)
    a = p.sum(axis=0)
    b = onehot.sum(axis=0)
    denom = a + b + eps
    dice = (2.0 * inter + eps) / denom
    per_class = (1.0 - dice) / k_cls
    value = float(per_class.sum())

    # d dice_k / d p_ik = (2*t_ik*denom - (2*I_k + eps)) / denom^2
    ddice_dp = (2.0 * onehot * denom[None, :] - (2.0 * inter + eps)[None, :]) / (
        denom[None, :] ** 2
    )
    dp = -ddice_dp / k_cls
    grad = np.zeros_like(s.scores)
    grad[rows] = _softmax_vjp(p, dp)
    grad[~valid] = 0.0
    return LossResult(value, grad, per_class, np.zeros(k_cls))


def tversky(
    s: ScoreBatch,
    y: MaskBatch,
    alpha: float = BASELINE_TVERSKY_ALPHA,
    beta: float = BASELINE_TVERSKY_BETA,
    eps: float = BASELINE_DICE_EPS,
) -> LossResult:
    """Tversky loss: soft Dice with separate false-positive/negative weights."""
    valid, n_valid, rows, labels, probs = _nll_parts(s, y)
    k_cls = s.k_classes
    onehot = np.zeros((n_valid, k_cls))
    onehot[np.arange(n_valid), labels] = 1.0
    p = probs[rows]
    inter = (p * onehot).sum(axis=0)
    fp = (p * (1.0 - onehot)).sum(axis=0)
    fn = ((1.0 - p) * onehot).sum(axis=0)
    denom = inter + alpha * fp + beta * fn + eps
    index = (inter + eps) / denom
    per_class = (1.0 - index) / k_cls
    value = float(per_class.sum())

    # dI/dp = t, dFP/dp = 1-t, dFN/dp = -t
    ddenom_dp = onehot + alpha * (1.0 - onehot) - beta * onehot
    dindex_dp = (onehot * denom[None, :] - (inter + eps)[None, :] * ddenom_dp) / (
        denom[None, :] ** 2
    )
    dp = -dindex_dp / k_cls
    grad = np.zeros_like(s.scores)
    grad[rows] = _softmax_vjp(p, dp)
    grad[~valid] = 0.0
    return LossResult(value, grad, per_class, np.zeros(k_cls))


def loss_by_name(name: str):
    """Map a loss name to a (scores, mask, margins) -> LossResult callable.

    Baselines ignore the margins argument; it keeps one calling convention
    for the trainer.
    """
    if name == "margin_calibration":
        return calibrated_log_loss
    if name == "cross_entropy":
        return lambda s, y, m: cross_entropy(s, y)
    if name == "focal":
        return lambda s, y, m: focal(s, y)
    if name == "soft_dice":
        return lambda s, y, m: soft_dice(s, y)
    if name == "tversky":
        return lambda s, y, m: tversky(s, y)
    raise ConfigError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
