"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .annotation import Annotation
from .errors import DimensionError, ValidationError


def check_images(X, multiple: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite float32 stack ``[N, H, W]``.

    A single ``[H, W]`` image is promoted to a stack of one.  With
    ``multiple`` the spatial size must be divisible by it.
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected images shaped [N, H, W], got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValidationError("no images given")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("images contain NaN or infinity")
    if multiple is not None and (arr.shape[1] % multiple or arr.shape[2] % multiple):
        raise DimensionError(f"image size {arr.shape[1]}x{arr.shape[2]} not divisible by {multiple}")
    return np.ascontiguousarray(arr)


def check_annotations(y, n_images: int, shape: Optional[Sequence[int]] = None) -> List[List[Annotation]]:
    """One validated annotation list per image; dicts are parsed with ``Annotation.from_dict``."""
    if y is None:
        raise ValidationError("annotations are required")
    y = list(y)
    if len(y) != n_images:
        raise ValidationError(f"got {len(y)} annotation lists for {n_images} images")
    out = []
    for i, anns in enumerate(y):
        parsed = []
        for j, a in enumerate(anns or []):
            ann = a if isinstance(a, Annotation) else Annotation.from_dict(a)
            parsed.append(ann.validate(shape, where=f"image {i} annotation {j}"))
        out.append(parsed)
    return out
