"""Peak-to-box matching and sensitivity / false-positives-per-image curves.

Only malignant boxes are positives.  A peak counts as a hit for the
smallest-area malignant box containing it (ties: lowest annotation index);
every peak outside all malignant boxes is a false positive, including peaks
inside benign or high-risk boxes.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .annotation import EVAL_POSITIVE, Annotation
from .errors import ValidationError
from .peaks import Peak, PeakParams, find_peaks

CURVE_HEADER = ("threshold", "sensitivity", "fpi")


class FrocPoint(NamedTuple):
    threshold: float
    sensitivity: float
    fpi: float


@dataclass
class MatchResult:
    # per image: list of (peak, matched annotation index or None)
    matches: List[List[tuple]]
    # per image: one hit flag per annotation (always False for non-malignant ones)
    hits: List[List[bool]]

    def false_positives(self) -> int:
        return sum(1 for per_image in self.matches for _, m in per_image if m is None)

    def hit_count(self) -> int:
        return sum(sum(flags) for flags in self.hits)


def _assign(peak_row: float, peak_col: float, anns: Sequence[Annotation]) -> Optional[int]:
    best, best_area = None, np.inf
    for j, a in enumerate(anns):
        if a.label in EVAL_POSITIVE and a.contains(peak_row, peak_col) and a.area < best_area:
            best, best_area = j, a.area
    return best


def match(peaks_per_image: Sequence[Sequence[Peak]], annotations_per_image: Sequence[Sequence[Annotation]]) -> MatchResult:
    if len(peaks_per_image) != len(annotations_per_image):
        raise ValueError("peaks and annotations must cover the same images")
    matches, hits = [], []
    for peaks, anns in zip(peaks_per_image, annotations_per_image):
        flags = [False] * len(anns)
        per_image = []
        for p in peaks:
            j = _assign(p.row, p.col, anns)
            per_image.append((p, j))
            if j is not None:
                flags[j] = True
        matches.append(per_image)
        hits.append(flags)
    return MatchResult(matches, hits)


def count_positives(annotations_per_image) -> int:
    return sum(1 for anns in annotations_per_image for a in anns if a.label in EVAL_POSITIVE)


def froc_curve(heatmaps, annotations_per_image, thresholds: Optional[Sequence[float]] = None,
               peak_params: PeakParams = PeakParams()) -> List[FrocPoint]:
    """One (threshold, sensitivity, fpi) point per threshold.

    Peaks are extracted once at the lowest threshold; the peak set at a
    higher threshold is the subset with confidence at or above it.  With
    ``thresholds=None`` the sweep is ``default_thresholds()`` plus every
    confidence at which sensitivity changes, so the operating point is exact
    even when the heatmap is far from saturated.
    """
    exact = thresholds is None
    thresholds = default_thresholds() if exact else [float(t) for t in thresholds]
    if not thresholds:
        return []
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    n_images = len(heatmaps)
    if n_images != len(annotations_per_image):
        raise ValueError("heatmaps and annotations must cover the same images")
    n_pos = count_positives(annotations_per_image)
    if n_pos == 0:
        raise ValidationError("no malignant annotations: sensitivity is undefined")

    base = PeakParams(thresholds[0], peak_params.nms_window)
    peaks = [find_peaks(h, base) for h in heatmaps]
    result = match(peaks, annotations_per_image)

    # best confidence among peaks assigned to each positive annotation
    best_hit = []
    fp_conf = []
    for per_image, anns in zip(result.matches, annotations_per_image):
        best = {}
        for p, j in per_image:
            if j is None:
                fp_conf.append(p.confidence)
            else:
                best[j] = max(best.get(j, -np.inf), p.confidence)
        for j, a in enumerate(anns):
            if a.label in EVAL_POSITIVE:
                best_hit.append(best.get(j, -np.inf))
    best_hit = np.sort(np.asarray(best_hit, dtype=np.float64))
    fp_conf = np.sort(np.asarray(fp_conf, dtype=np.float64))
    if exact:
        steps = best_hit[best_hit >= thresholds[0]]
        thresholds = [float(t) for t in np.union1d(thresholds, steps)]

    curve = []
    for t in thresholds:
        hit = best_hit.size - np.searchsorted(best_hit, t, side="left")
        fps = fp_conf.size - np.searchsorted(fp_conf, t, side="left")
        curve.append(FrocPoint(t, float(hit / n_pos), float(fps / n_images)))
    return curve


def operating_point(curve: Sequence[FrocPoint], max_fpi: float) -> Optional[FrocPoint]:
    """Most sensitive point with fpi <= max_fpi (ties: lowest fpi); None if none qualifies."""
    if not curve:
        raise ValueError("empty curve")
    ok = [p for p in curve if p.fpi <= max_fpi]
    if not ok:
        return None
    return min(ok, key=lambda p: (-p.sensitivity, p.fpi, p.threshold))


def default_thresholds(n: int = 201) -> List[float]:
    return [float(t) for t in np.linspace(0.0, 1.0, n)]


def write_curve(curve: Sequence[FrocPoint], path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for p in curve:
            w.writerow([repr(p.threshold), repr(p.sensitivity), repr(p.fpi)])
    os.replace(tmp, path)


def read_curve(path) -> List[FrocPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(CURVE_HEADER)}")
    try:
        return [FrocPoint(float(a), float(b), float(c)) for a, b, c in rows[1:]]
    except ValueError as exc:
        raise ValidationError(f"{path}: bad curve row ({exc})") from None
