"""Inference, evaluation and the six-arm ablation suite."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import hourglass
from .errors import ConfigError, ValidationError
from .froc import FrocPoint, froc_curve, operating_point
from .hourglass import HourglassConfig, Model
from .peaks import PeakParams
from .trainer import VARIANTS, TrainConfig, Trainer, variant_config

logger = logging.getLogger(__name__)

THREADS_ENV = "BLOBSENSE_THREADS"
ABLATION_HEADER = ("variant", "max_sensitivity", "fpi_at_max")


def thread_count(default: int = 1) -> int:
    """Evaluation parallelism from ``BLOBSENSE_THREADS`` (>= 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def predict_heatmaps(model: Model, images, threads: int = 1) -> List[np.ndarray]:
    """One [H, W] heatmap per image; order is preserved whatever ``threads`` is."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3:
        raise ValidationError(f"images must be [N, H, W], got {images.shape}")

    def one(x):
        return hourglass.predict_heatmap(model, x[None])

    if threads <= 1 or len(images) < 2:
        return [one(x) for x in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, images))


def evaluate(model: Model, images, annotations, peak_params: PeakParams = PeakParams(),
             thresholds: Optional[Sequence[float]] = None, threads: int = 1) -> List[FrocPoint]:
    heatmaps = predict_heatmaps(model, images, threads)
    return froc_curve(heatmaps, annotations, thresholds, peak_params)


@dataclass
class AblationRow:
    variant: str
    max_sensitivity: float
    fpi_at_max: float
    curve: List[FrocPoint] = field(default_factory=list, repr=False)
    seconds: float = 0.0


def run_variant(variant: str, train_images, train_annotations, test_images, test_annotations,
                config: TrainConfig, model_config: HourglassConfig, max_fpi: float = 5.0,
                threads: int = 1, checkpoint_dir=None) -> tuple:
    """Train one arm from scratch and evaluate it; returns ``(row, trainer)``."""
    cfg = variant_config(config, variant)
    start = time.perf_counter()
    trainer = Trainer(hourglass.build(model_config), train_images, train_annotations, cfg, checkpoint_dir)
    trainer.fit()
    curve = evaluate(trainer.model, test_images, test_annotations, cfg.loss.peak_params, threads=threads)
    op = operating_point(curve, max_fpi)
    sens, fpi = (0.0, math.nan) if op is None else (op.sensitivity, op.fpi)
    seconds = time.perf_counter() - start
    logger.info("variant %s: sensitivity %.4f at fpi %.3f (%.0fs)", variant, sens, fpi, seconds)
    return AblationRow(variant, sens, fpi, curve, seconds), trainer


def ablation_suite(train_images, train_annotations, test_images, test_annotations, config: TrainConfig,
                   model_config: HourglassConfig, max_fpi: float = 5.0, variants: Sequence[str] = VARIANTS,
                   threads: int = 1) -> List[AblationRow]:
    """Train and evaluate every arm with identical seeds and schedule.

    ``max_sensitivity`` is the operating-point sensitivity under the
    ``max_fpi`` budget; unconstrained, every arm would reach 1.0 at
    threshold 0 through low-confidence maxima.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    if len(test_images) == 0 or len(train_images) == 0:
        raise ValidationError("ablation needs non-empty train and test splits")
    rows = []
    for v in variants:
        row, _ = run_variant(v, train_images, train_annotations, test_images, test_annotations,
                             config, model_config, max_fpi, threads)
        rows.append(row)
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r.variant, repr(float(r.max_sensitivity)), repr(float(r.fpi_at_max))])
    os.replace(tmp, path)


def read_ablation(path) -> List[AblationRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ABLATION_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(ABLATION_HEADER)}")
    try:
        return [AblationRow(v, float(s), float(f)) for v, s, f in rows[1:]]
    except ValueError as exc:
        raise ValidationError(f"{path}: bad ablation row ({exc})") from None
