"""Bounding-box annotations and label semantics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

from .errors import ValidationError

LABELS = ("benign", "high_risk", "malignant")
# Image strata ordered by severity; an image takes the stratum of its most severe annotation.
STRATA = ("normal", "benign", "high_risk", "malignant")
_SEVERITY = {name: i for i, name in enumerate(STRATA)}

# Detection targets while training; only malignant counts as positive at evaluation.
TRAIN_POSITIVE = frozenset({"high_risk", "malignant"})
EVAL_POSITIVE = frozenset({"malignant"})


@dataclass(frozen=True)
class Annotation:
    """Loose axis-aligned box ``(row_min, col_min, row_max, col_max)`` with a label.

    ``true_center`` is the generator's hidden finding centre, kept only for
    diagnostics; nothing in training or evaluation reads it.
    """

    box: Tuple[float, float, float, float]
    label: str
    true_center: Optional[Tuple[float, float]] = None

    @property
    def center(self) -> Tuple[float, float]:
        r0, c0, r1, c1 = self.box
        return ((r0 + r1) / 2.0, (c0 + c1) / 2.0)

    @property
    def pixel_center(self) -> Tuple[int, int]:
        # floor(v + 0.5) commutes with integer shifts, so crops agree with full images
        r, c = self.center
        return (math.floor(r + 0.5), math.floor(c + 0.5))

    @property
    def area(self) -> float:
        r0, c0, r1, c1 = self.box
        return (r1 - r0) * (c1 - c0)

    def contains(self, row: float, col: float) -> bool:
        r0, c0, r1, c1 = self.box
        return r0 <= row <= r1 and c0 <= col <= c1

    def validate(self, shape: Optional[Sequence[int]] = None, where: str = "") -> "Annotation":
        prefix = f"{where}: " if where else ""
        if self.label not in LABELS:
            raise ValidationError(f"{prefix}unknown label {self.label!r}")
        r0, c0, r1, c1 = self.box
        if not (r0 < r1 and c0 < c1):
            raise ValidationError(f"{prefix}degenerate box {self.box}")
        if shape is not None:
            h, w = shape[-2:]
            if r0 < 0 or c0 < 0 or r1 > h - 1 or c1 > w - 1:
                raise ValidationError(f"{prefix}box {self.box} outside image of size {h}x{w}")
        if self.true_center is not None and not self.contains(*self.true_center):
            raise ValidationError(f"{prefix}true centre {self.true_center} outside box {self.box}")
        return self

    def to_dict(self) -> dict:
        d = {"box": list(self.box), "label": self.label}
        if self.true_center is not None:
            d["true_center"] = list(self.true_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        try:
            tc = d.get("true_center")
            return cls(
                box=tuple(float(v) for v in d["box"]),
                label=d["label"],
                true_center=None if tc is None else (float(tc[0]), float(tc[1])),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValidationError(f"malformed annotation {d!r} ({exc})") from None


def image_stratum(annotations: Iterable[Annotation]) -> str:
    """Stratum of an image: its most severe annotation label, or ``normal``."""
    best = 0
    for ann in annotations:
        best = max(best, _SEVERITY[ann.label])
    return STRATA[best]
