"""Heatmap peak extraction by windowed non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError


class Peak(NamedTuple):
    row: int
    col: int
    confidence: float


@dataclass(frozen=True)
class PeakParams:
    threshold: float = 0.0
    nms_window: int = 3

    def __post_init__(self):
        if self.threshold < 0:
            raise ConfigError(f"threshold must be >= 0, got {self.threshold}")
        if self.nms_window < 3 or self.nms_window % 2 == 0:
            raise ConfigError(f"nms_window must be an odd integer >= 3, got {self.nms_window}")


def as_map(heatmap) -> np.ndarray:
    """Accept [H, W], [1, H, W] arrays or Tensors and return a 2-D array."""
    arr = getattr(heatmap, "data", heatmap)
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"expected a single-channel heatmap, got shape {arr.shape}")
    return arr


def local_maxima(heatmap, nms_window: int = 3) -> np.ndarray:
    """Boolean map of windowed maxima with the row-major plateau tie-break.

    A pixel qualifies when it is >= every pixel of its window and strictly
    greater than the window pixels that precede it in row-major order.
    """
    a = as_map(heatmap)
    h, w = a.shape
    r = nms_window // 2
    padded = np.pad(a, r, mode="constant", constant_values=-np.inf)
    keep = np.ones(a.shape, dtype=bool)
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr == 0 and dc == 0:
                continue
            nb = padded[r + dr:r + dr + h, r + dc:r + dc + w]
            if dr < 0 or (dr == 0 and dc < 0):
                keep &= a > nb
            else:
                keep &= a >= nb
    return keep


def find_peaks(heatmap, params: PeakParams = PeakParams()) -> List[Peak]:
    """Peaks at or above ``params.threshold``, sorted by confidence then (row, col)."""
    a = as_map(heatmap)
    keep = local_maxima(a, params.nms_window) & (a >= params.threshold)
    rows, cols = np.nonzero(keep)
    conf = a[rows, cols]
    order = np.lexsort((cols, rows, -conf))
    return [Peak(int(rows[i]), int(cols[i]), float(conf[i])) for i in order]


def in_window(row: float, col: float, window: Sequence[float]) -> bool:
    r0, c0, r1, c1 = window
    return r0 <= row <= r1 and c0 <= col <= c1


def top_k_peaks(heatmap, params: PeakParams, k: int, exclusion_windows: Iterable[Tuple] = ()) -> List[Peak]:
    """The ``k`` tallest peaks whose centres avoid every exclusion window.

    Windows are inclusive ``(row_min, col_min, row_max, col_max)`` tuples.
    """
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    windows = list(exclusion_windows)
    out = []
    for peak in find_peaks(heatmap, params):
        if any(in_window(peak.row, peak.col, win) for win in windows):
            continue
        out.append(peak)
        if len(out) == k:
            break
    return out
