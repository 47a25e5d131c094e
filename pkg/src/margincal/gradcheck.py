"""Central finite-difference verification of the analytic loss gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LOSS_NAMES, ScoreBatch, loss_by_name
from .margins import compute_margins
from .segdata import LabelStats, MaskBatch

FD_STEP = 1e-5
#: entries where both gradients are below this scale are compared against it,
#: which keeps finite-difference roundoff noise from inflating the ratio
REL_ERR_FLOOR = 1e-6


def fd_gradient(value_fn, scores: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar loss over every score entry."""
    grad = np.zeros_like(scores)
    flat = scores.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value_fn(scores)
        flat[i] = orig - h
        down = value_fn(scores)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckResult:
    loss_name: str
    max_rel_err: float
    n_probes: int


def _random_case(rng: np.random.Generator, n_pixels: int, k_classes: int):
    """Scores and labels with every class present and no near-tied maxima."""
    while True:
        scores = rng.normal(size=(n_pixels, k_classes))
        top2 = np.sort(scores, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) > 1e-3:
            break
    labels = rng.integers(0, k_classes, size=n_pixels).astype(np.uint8)
    labels[:k_classes] = np.arange(k_classes, dtype=np.uint8)
    return scores, labels


def check_loss_gradient(
    loss_name: str,
    seed: int,
    n_batches: int = 50,
    n_pixels: int = 16,
    k_classes: int = 3,
    h: float = FD_STEP,
) -> GradCheckResult:
    """Max relative error between analytic and finite-difference gradients."""
    loss_fn = loss_by_name(loss_name)
    rng = np.random.default_rng(seed)
    stats = LabelStats.from_counts([90, 7, 3][:k_classes] + [5] * max(0, k_classes - 3))
    margins = compute_margins(stats, tau=2.0, upsilon=1.0)
    worst = 0.0
    probes = 0
    for _ in range(n_batches):
        scores, labels = _random_case(rng, n_pixels, k_classes)
        mask = MaskBatch(labels=labels, width=n_pixels, height=1, n_images=1)

        def value(arr: np.ndarray) -> float:
            return loss_fn(ScoreBatch(scores=arr.copy()), mask, margins).value

        analytic = loss_fn(ScoreBatch(scores=scores.copy()), mask, margins).grad
        numeric = fd_gradient(value, scores, h=h)
        worst = max(worst, float(relative_errors(analytic, numeric).max()))
        probes += scores.size
    return GradCheckResult(loss_name=loss_name, max_rel_err=worst, n_probes=probes)


def check_all(seed: int, n_batches: int = 50) -> list[GradCheckResult]:
    return [check_loss_gradient(name, seed, n_batches) for name in LOSS_NAMES]
