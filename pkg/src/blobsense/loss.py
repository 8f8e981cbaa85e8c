"""Hypersensitive detection loss.

Total loss = detection term + omega * background term.

* Detection: for each training-positive annotation a fixed P x P window of
  the output is compared with an amplitude-1 Gaussian.  The Gaussian is
  recentred on the window's centre of mass (tolerates misaligned boxes) and
  its width is the best-fitting entry of a bank of widths (tolerates size
  variation).
* Background: squared output everywhere except the detection windows and
  windows around the ``k`` tallest remaining peaks (a few false positives
  per image cost nothing).
* ``omega`` < 1 makes false positives cheaper than misses.

Norms are squared sums throughout.  References, the centre of mass, the
width selection and the background mask are constants for backprop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .annotation import TRAIN_POSITIVE, Annotation
from .errors import ConfigError, DimensionError, RangeError
from .peaks import PeakParams, as_map, top_k_peaks
from .tensor import Tensor, add, scale, sub, sum_squares, window


@dataclass(frozen=True)
class ReferenceBank:
    sigmas: Tuple[float, ...] = (1.5, 3.0, 6.0)

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigmas)
        object.__setattr__(self, "sigmas", s)
        if not s:
            raise ConfigError("reference bank needs at least one sigma")
        if any(v <= 0 for v in s) or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"bank sigmas must be positive and strictly increasing, got {s}")

    def __len__(self):
        return len(self.sigmas)


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``recenter=False`` pins the reference on the annotation centre instead of
    the centre of mass.  ``objective="l2"`` swaps the whole loss for plain
    squared error against fixed annotation-centred Gaussians of width
    ``l2_sigma`` (the classic heatmap-regression baseline).
    """

    patch_size: int = 33
    bank: ReferenceBank = field(default_factory=ReferenceBank)
    k: int = 3
    omega: float = 0.01
    mass_epsilon: float = 1e-6
    nms_window: int = 3
    recenter: bool = True
    objective: str = "hypersensitive"
    l2_sigma: float = 3.0

    def __post_init__(self):
        if isinstance(self.bank, (list, tuple)):
            object.__setattr__(self, "bank", ReferenceBank(tuple(self.bank)))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega must lie in [0, 1], got {self.omega}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.mass_epsilon <= 0:
            raise ConfigError("mass_epsilon must be positive")
        if self.objective not in ("hypersensitive", "l2"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.l2_sigma <= 0:
            raise ConfigError("l2_sigma must be positive")

    @property
    def peak_params(self) -> PeakParams:
        return PeakParams(threshold=0.0, nms_window=self.nms_window)


@dataclass
class Target:
    """Detection target chosen for one annotation during the forward pass."""

    annotation_id: int
    center: Tuple[int, int]
    x0: Tuple[float, float]
    sigma_index: int
    reference: np.ndarray


@dataclass
class LossBreakdown:
    l_det: float
    l_bg: float
    total: float
    per_annotation: List[Tuple[int, int, float]]
    masked_centers: List[Tuple[int, int]]
    tensor: Optional[Tensor] = field(default=None, repr=False)
    targets: List[Target] = field(default_factory=list, repr=False)
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def backward(self) -> None:
        self.tensor.backward()


# ---------------------------------------------------------------------------
# detection term
# ---------------------------------------------------------------------------


def patch_origin(center: Tuple[int, int], patch_size: int) -> Tuple[int, int]:
    half = patch_size // 2
    return center[0] - half, center[1] - half


def patch_window(center: Tuple[int, int], patch_size: int) -> Tuple[int, int, int, int]:
    """Inclusive (row_min, col_min, row_max, col_max) of the patch around ``center``."""
    r0, c0 = patch_origin(center, patch_size)
    return (r0, c0, r0 + patch_size - 1, c0 + patch_size - 1)


def extract_patch(O, center: Tuple[int, int], patch_size: int) -> Tensor:
    """P x P window of the output centred on ``center``; out-of-image cells are zero."""
    if not isinstance(O, Tensor):
        O = Tensor(O)
    h, w = O.shape[-2:]
    r, c = center
    if not (0 <= r < h and 0 <= c < w):
        raise RangeError(f"patch centre {center} outside image of size {h}x{w}")
    top, left = patch_origin(center, patch_size)
    return window(O, top, left, patch_size, patch_size)


def center_of_mass(patch, epsilon: float = 1e-6) -> Tuple[float, float]:
    """Intensity-weighted centroid in patch coordinates, or the patch centre if the mass is < epsilon."""
    a = np.asarray(getattr(patch, "data", patch), dtype=np.float64)
    total = a.sum()
    if total < epsilon:
        return ((a.shape[0] - 1) / 2.0, (a.shape[1] - 1) / 2.0)
    rows = np.arange(a.shape[0], dtype=np.float64)
    cols = np.arange(a.shape[1], dtype=np.float64)
    return (float((a.sum(axis=1) / total) @ rows), float((a.sum(axis=0) / total) @ cols))


def make_reference(x0: Tuple[float, float], sigma: float, patch_size: int) -> np.ndarray:
    """Amplitude-1 isotropic Gaussian centred on ``x0`` over a P x P grid (float64)."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    g = np.arange(patch_size, dtype=np.float64)
    dr = np.exp(-((g - x0[0]) ** 2) / (2.0 * sigma * sigma))
    dc = np.exp(-((g - x0[1]) ** 2) / (2.0 * sigma * sigma))
    return np.outer(dr, dc)


def select_reference(patch, x0: Tuple[float, float], bank: ReferenceBank) -> Tuple[np.ndarray, int]:
    """Bank Gaussian closest to the patch in squared error (ties -> smallest sigma)."""
    a = np.asarray(getattr(patch, "data", patch), dtype=np.float64)
    best, best_idx, best_ref = np.inf, 0, None
    for i, sigma in enumerate(bank.sigmas):
        ref = make_reference(x0, sigma, a.shape[0])
        d = float(np.sum((a - ref) ** 2))
        if d < best:
            best, best_idx, best_ref = d, i, ref
    return best_ref, best_idx


def detection_loss(patch: Tensor, reference) -> Tensor:
    return sum_squares(sub(patch, reference))


# ---------------------------------------------------------------------------
# background term
# ---------------------------------------------------------------------------


def positive_annotations(annotations: Sequence[Annotation]) -> List[Tuple[int, Annotation]]:
    return [(i, a) for i, a in enumerate(annotations) if a.label in TRAIN_POSITIVE]


def background_mask(O, annotations: Sequence[Annotation], k: int, patch_size: int,
                    peak_params: PeakParams = PeakParams()) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Binary background mask [1, H, W] and the centres of the forgiven peaks.

    Zeroed: the detection patch of every training-positive annotation, then a
    patch around each of the ``k`` tallest peaks lying outside those patches.
    """
    heat = as_map(O)
    h, w = heat.shape
    mask = np.ones((h, w), dtype=heat.dtype)
    det_windows = []
    for _, ann in positive_annotations(annotations):
        win = patch_window(ann.pixel_center, patch_size)
        det_windows.append(win)
        _zero_window(mask, win)
    peaks = top_k_peaks(heat, PeakParams(0.0, peak_params.nms_window), k, det_windows)
    centers = []
    for p in peaks:
        _zero_window(mask, patch_window((p.row, p.col), patch_size))
        centers.append((p.row, p.col))
    return mask[None], centers


def _zero_window(mask: np.ndarray, win) -> None:
    r0, c0, r1, c1 = win
    mask[max(r0, 0):max(r1 + 1, 0), max(c0, 0):max(c1 + 1, 0)] = 0


def background_loss(O: Tensor, mask) -> Tensor:
    m = np.asarray(mask)
    if m.shape != O.shape:
        raise DimensionError(f"mask shape {m.shape} != output shape {O.shape}")
    return sum_squares(O, m)


# ---------------------------------------------------------------------------
# totals
# ---------------------------------------------------------------------------


def _zero_scalar(O: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=O.dtype))


def total_loss(O, annotations: Sequence[Annotation], config: LossConfig = LossConfig(),
               targets: Optional[List[Target]] = None, mask: Optional[np.ndarray] = None) -> LossBreakdown:
    """Loss of a [1, H, W] output against an image's annotations.

    Passing ``targets`` and ``mask`` from an earlier breakdown re-evaluates the
    loss with those adaptive choices frozen (used for gradient checks).
    """
    if not isinstance(O, Tensor):
        O = Tensor(O)
    if O.data.ndim == 2:
        raise DimensionError("total_loss expects a [1, H, W] output")
    if config.objective == "l2":
        return l2_loss(O, annotations, config)
    h, w = O.shape[-2:]
    P = config.patch_size

    positives = positive_annotations(annotations)
    for i, ann in positives:
        r, c = ann.pixel_center
        if not (0 <= r < h and 0 <= c < w):
            raise RangeError(f"annotation {i} centre {(r, c)} outside image of size {h}x{w}")

    if targets is None:
        targets = []
        for i, ann in positives:
            center = ann.pixel_center
            patch_vals = extract_patch(Tensor(O.data), center, P).data
            if config.recenter:
                x0 = center_of_mass(patch_vals, config.mass_epsilon)
            else:
                x0 = ((P - 1) / 2.0, (P - 1) / 2.0)
            ref, idx = select_reference(patch_vals, x0, config.bank)
            targets.append(Target(i, center, x0, idx, ref))

    l_det = _zero_scalar(O)
    per_annotation = []
    for t in targets:
        term = detection_loss(extract_patch(O, t.center, P), t.reference)
        per_annotation.append((t.annotation_id, t.sigma_index, float(term.data)))
        l_det = add(l_det, term)

    masked_centers: List[Tuple[int, int]] = []
    if mask is None:
        mask, masked_centers = background_mask(O.data, annotations, config.k, P, config.peak_params)
    l_bg = background_loss(O, mask)
    total = add(l_det, scale(l_bg, config.omega))
    return LossBreakdown(
        l_det=float(l_det.data), l_bg=float(l_bg.data), total=float(total.data),
        per_annotation=per_annotation, masked_centers=masked_centers,
        tensor=total, targets=targets, mask=mask,
    )


def gaussian_target(shape: Tuple[int, int], annotations: Sequence[Annotation], sigma: float) -> np.ndarray:
    """Max-composite of amplitude-1 Gaussians at the training-positive box centres."""
    h, w = shape
    target = np.zeros((h, w), dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for _, ann in positive_annotations(annotations):
        r, c = ann.pixel_center
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma * sigma))
        np.maximum(target, g, out=target)
    return target


def l2_loss(O: Tensor, annotations: Sequence[Annotation], config: LossConfig = LossConfig()) -> LossBreakdown:
    """Plain squared error to fixed box-centred Gaussians, no masking or weighting."""
    target = gaussian_target(O.shape[-2:], annotations, config.l2_sigma)
    term = sum_squares(sub(O, target[None]))
    zero = _zero_scalar(O)
    total = add(term, scale(zero, config.omega))
    return LossBreakdown(
        l_det=float(term.data), l_bg=0.0, total=float(total.data),
        per_annotation=[], masked_centers=[], tensor=total,
        mask=np.ones(O.shape, dtype=O.dtype),
    )
