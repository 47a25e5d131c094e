"""A small per-pixel model and deterministic training loop for loss ablations.

The model is two dense layers (d -> hidden -> K) with a rectified-linear
hidden activation, trained by plain SGD with momentum.  Everything is a pure
function of (seed, config, dataset): image order, initialization and updates
are all driven by one seeded generator, so runs are bitwise repeatable.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ConfigError, ShapeError, TrainError
from .losses import LOSS_NAMES, ScoreBatch, loss_by_name
from .margins import MarginOffsets
from .metrics import MetricsReport, confusion, iou_report, predict_labels
from .segdata import FeatureBatch, MaskBatch

MODEL_MAGIC = b"PMC1"


@dataclass
class PixelMLP:
    """Two-layer per-pixel scorer: scores = relu(x @ w1 + b1) @ w2 + b2."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    init_scale: float = 1.0

    @classmethod
    def init(
        cls, d: int, hidden: int, k_classes: int, seed: int, init_scale: float = 1.0
    ) -> "PixelMLP":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, init_scale * np.sqrt(2.0 / d), size=(d, hidden))
        w2 = rng.normal(0.0, init_scale * np.sqrt(2.0 / hidden), size=(hidden, k_classes))
        return cls(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(k_classes),
                   init_scale=init_scale)

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def k_classes(self) -> int:
        return self.w2.shape[1]

    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)


def forward(model: PixelMLP, features: FeatureBatch) -> ScoreBatch:
    """Deterministic forward pass producing one score row per pixel."""
    scores, _ = _forward_cache(model, features.features)
    return ScoreBatch(scores=scores)


def _forward_cache(model: PixelMLP, x: np.ndarray):
    if x.shape[1] != model.d:
        raise ShapeError(f"feature dim {x.shape[1]} != model d={model.d}")
    if _kernels.HAVE_NUMBA:
        x = np.ascontiguousarray(x)
        act = np.empty((x.shape[0], model.hidden))
        scores = np.empty((x.shape[0], model.k_classes))
        _kernels.mlp_forward_kernel(x, model.w1, model.b1, model.w2, model.b2,
                                    act, scores)
        return scores, act
    pre = x @ model.w1 + model.b1
    act = np.maximum(pre, 0.0)
    scores = act @ model.w2 + model.b2
    return scores, act


def backward(
    model: PixelMLP, x: np.ndarray, act: np.ndarray, grad_scores: np.ndarray
) -> tuple[np.ndarray, ...]:
    """Parameter gradients for a given upstream d(loss)/d(scores).

    The hidden relu mask is act > 0 (identical to pre > 0 for the gradient
    convention that puts the kink's subgradient at zero).
    """
    if _kernels.HAVE_NUMBA:
        gw1 = np.empty_like(model.w1)
        gb1 = np.empty_like(model.b1)
        gw2 = np.empty_like(model.w2)
        gb2 = np.empty_like(model.b2)
        _kernels.mlp_backward_kernel(
            np.ascontiguousarray(x), act, model.w2,
            np.ascontiguousarray(grad_scores), gw1, gb1, gw2, gb2,
        )
        return gw1, gb1, gw2, gb2
    gw2 = act.T @ grad_scores
    gb2 = grad_scores.sum(axis=0)
    gact = grad_scores @ model.w2.T
    gpre = gact * (act > 0.0)
    gw1 = x.T @ gpre
    gb1 = gpre.sum(axis=0)
    return gw1, gb1, gw2, gb2


@dataclass
class TrainConfig:
    loss_name: str = "margin_calibration"
    epochs: int = 100
    batch_images: int = 25
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    tau: float = 10.0
    upsilon: float = 1.0
    eval_every: int = 25
    hidden: int = 16

    def __post_init__(self) -> None:
        if self.loss_name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss_name!r}; expected {LOSS_NAMES}")
        if self.epochs < 1 or self.batch_images < 1:
            raise ConfigError("epochs and batch_images must be positive")
        if self.learning_rate < 0 or not (0.0 <= self.momentum < 1.0):
            raise ConfigError("need learning_rate >= 0 and momentum in [0, 1)")


@dataclass
class TrainLogRecord:
    epoch: int
    train_loss: float
    train_miou: float
    val_miou: float
    seconds: float


@dataclass
class TrainLog:
    records: list[TrainLogRecord] = field(default_factory=list)

    def append(self, record: TrainLogRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise TrainError("log epochs must be strictly increasing")
        self.records.append(record)


def evaluate(
    model: PixelMLP, features: FeatureBatch, masks: MaskBatch
) -> MetricsReport:
    """Score all pixels, take the raw-score argmax, and report IoU metrics."""
    scores = forward(model, features)
    pred = predict_labels(scores, masks)
    return iou_report(confusion(pred, masks, model.k_classes))


def train(
    model: PixelMLP,
    train_features: FeatureBatch,
    train_masks: MaskBatch,
    cfg: TrainConfig,
    margins: Optional[MarginOffsets] = None,
    val_features: Optional[FeatureBatch] = None,
    val_masks: Optional[MaskBatch] = None,
) -> tuple[PixelMLP, TrainLog]:
    """Mini-batch SGD with momentum on the configured loss.

    Batches are whole images; their order reshuffles every epoch from the
    seeded generator.  For the margin-calibration loss the offsets must be
    precomputed from training-split statistics and passed in.
    """
    if cfg.loss_name == "margin_calibration" and margins is None:
        raise ConfigError("margin_calibration training needs precomputed margin-offsets")
    loss_fn = loss_by_name(cfg.loss_name)
    rng = np.random.default_rng(cfg.seed)
    ppi = train_masks.pixels_per_image
    n_images = train_masks.n_images
    x_all = train_features.features
    velocity = [np.zeros_like(p) for p in model.params()]
    log = TrainLog()
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_images)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_images, cfg.batch_images):
            image_ids = order[start : start + cfg.batch_images]
            pixel_rows = (image_ids[:, None] * ppi + np.arange(ppi)[None, :]).reshape(-1)
            x = x_all[pixel_rows]
            y = MaskBatch(
                labels=train_masks.labels[pixel_rows],
                width=train_masks.width,
                height=train_masks.height,
                n_images=len(image_ids),
                ignore_index=train_masks.ignore_index,
            )
            scores, act = _forward_cache(model, x)
            result = loss_fn(ScoreBatch(scores=scores), y, margins)
            if not np.isfinite(result.value):
                raise TrainError(
                    f"NaN loss at epoch {epoch}, batch {n_batches} "
                    f"({cfg.loss_name})"
                )
            grads = backward(model, x, act, result.grad)
            for p, v, g in zip(model.params(), velocity, grads):
                v *= cfg.momentum
                v += g
                p -= cfg.learning_rate * v
            epoch_loss += result.value
            n_batches += 1
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            train_report = evaluate(model, train_features, train_masks)
            val_miou = float("nan")
            if val_features is not None and val_masks is not None:
                val_miou = evaluate(model, val_features, val_masks).miou
            log.append(
                TrainLogRecord(
                    epoch=epoch,
                    train_loss=epoch_loss / n_batches,
                    train_miou=train_report.miou,
                    val_miou=val_miou,
                    seconds=time.perf_counter() - started,
                )
            )
    return model, log


# ---------------------------------------------------------------------------
# Model persistence: magic + (d, hidden, K) header + little-endian f64 params
# ---------------------------------------------------------------------------


def save_model(model: PixelMLP, path) -> None:
    header = MODEL_MAGIC + struct.pack("<III", model.d, model.hidden, model.k_classes)
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params()
    )
    Path(path).write_bytes(header + blob)


def load_model(path) -> PixelMLP:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ConfigError(f"not a model file: magic {raw[:4]!r}")
    d, hidden, k = struct.unpack("<III", raw[4:16])
    expected = (d * hidden + hidden + hidden * k + k) * 8
    body = raw[16:]
    if len(body) != expected:
        raise ConfigError(
            f"model payload has {len(body)} bytes, expected {expected}"
        )
    flat = np.frombuffer(body, dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = flat[pos : pos + size].reshape(shape).astype(np.float64)
        pos += size
        return out

    return PixelMLP(
        w1=take((d, hidden)), b1=take((hidden,)), w2=take((hidden, k)), b2=take((k,))
    )


TRAIN_LOG_HEADER = ["epoch", "train_loss", "train_miou", "val_miou", "seconds"]


def write_train_log_csv(log: TrainLog, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
        for rec in log.records:
            writer.writerow(
                [
                    rec.epoch,
                    f"{rec.train_loss:.12g}",
                    f"{rec.train_miou:.12g}",
                    f"{rec.val_miou:.12g}",
                    f"{rec.seconds:.12g}",
                ]
            )
