"""Synthetic weakly annotated, class-imbalanced detection corpora.

Images are smooth random textures with Gaussian "findings" added on top.
Every finding gets a deliberately loose box: its tight +/-3 sigma extent is
inflated by a random factor per axis and shifted by a bounded jitter that
never pushes the true centre outside the box.  Images are written as 16-bit
grayscale PNGs next to a ``manifest.json``.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .annotation import LABELS, STRATA, Annotation, image_stratum
from .errors import ConfigError, ValidationError

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class GenConfig:
    n_images: Dict[str, int] = field(default_factory=lambda: {"train": 200, "val": 0, "test": 50})
    image_size: int = 96
    # per-image class probabilities, in STRATA order
    incidence: Dict[str, float] = field(
        default_factory=lambda: {"normal": 0.85, "benign": 0.08, "high_risk": 0.02, "malignant": 0.05})
    findings_per_image: Tuple[int, int] = (1, 2)
    amplitude_range: Tuple[float, float] = (0.35, 0.6)
    benign_amplitude_range: Tuple[float, float] = (0.15, 0.3)
    sigma_range: Tuple[float, float] = (1.5, 4.0)
    looseness: float = 1.5
    jitter: float = 0.25
    texture_scale: float = 6.0
    edge_margin: int = 8
    seed: int = 0

    def validate(self) -> "GenConfig":
        if set(self.incidence) != set(STRATA):
            raise ConfigError(f"incidence must name exactly {STRATA}, got {sorted(self.incidence)}")
        if any(p < 0 for p in self.incidence.values()) or not math.isclose(sum(self.incidence.values()), 1.0, abs_tol=1e-9):
            raise ConfigError(f"incidence probabilities must be >= 0 and sum to 1, got {self.incidence}")
        unknown = set(self.n_images) - set(SPLITS)
        if unknown or any(n < 0 for n in self.n_images.values()):
            raise ConfigError(f"n_images must map {SPLITS} to non-negative counts, got {self.n_images}")
        if self.looseness < 1:
            raise ConfigError(f"looseness must be >= 1, got {self.looseness}")
        if not 0 <= self.jitter:
            raise ConfigError(f"jitter must be >= 0, got {self.jitter}")
        lo, hi = self.findings_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"findings_per_image must be 1 <= lo <= hi, got {self.findings_per_image}")
        for name in ("amplitude_range", "benign_amplitude_range", "sigma_range"):
            a, b = getattr(self, name)
            if a <= 0 or b < a:
                raise ConfigError(f"{name} must be 0 < lo <= hi, got {(a, b)}")
        if self.image_size < 8 or 2 * self.edge_margin >= self.image_size:
            raise ConfigError("image_size too small for edge_margin")
        if self.texture_scale <= 0:
            raise ConfigError("texture_scale must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown generator config keys {sorted(bad)}")
        d = dict(d)
        for key in ("findings_per_image", "amplitude_range", "benign_amplitude_range", "sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


@dataclass
class SampleRecord:
    image_id: str
    image_path: str
    split: str
    annotations: List[Annotation]

    @property
    def stratum(self) -> str:
        return image_stratum(self.annotations)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "split": self.split,
            "annotations": [a.to_dict() for a in self.annotations],
        }


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def texture(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    """Low-pass filtered white noise rescaled to [0.1, 0.5]."""
    noise = gaussian_filter(rng.standard_normal((size, size)), scale, mode="wrap")
    lo, hi = noise.min(), noise.max()
    return 0.1 + 0.4 * (noise - lo) / (hi - lo)


def integer_box(center: Tuple[float, float], half: Tuple[float, float], size: int) -> Tuple[int, int, int, int]:
    """Smallest integer box covering ``center +/- half``, clipped to the image."""
    r, c = center
    hr, hc = half
    return (
        max(0, math.floor(r - hr)), max(0, math.floor(c - hc)),
        min(size - 1, math.ceil(r + hr)), min(size - 1, math.ceil(c + hc)),
    )


def loose_box(rng: np.random.Generator, center, sigmas, looseness: float, jitter: float, size: int):
    """Tight +/-3 sigma box inflated by U[1, looseness] per axis and shifted by bounded jitter."""
    out_center, half = [], []
    for axis in range(2):
        h = 3.0 * sigmas[axis] * rng.uniform(1.0, looseness)
        shift = rng.uniform(-1.0, 1.0) * jitter * 2.0 * h
        shift = float(np.clip(shift, -h, h))
        out_center.append(center[axis] + shift)
        half.append(h)
    return integer_box(tuple(out_center), tuple(half), size)


@dataclass(frozen=True)
class Finding:
    center: Tuple[float, float]
    sigmas: Tuple[float, float]
    amplitude: float


def render_image(rng: np.random.Generator, stratum: str, config: GenConfig):
    """One image (float64 in [0, 1]), its annotations and the rendered findings."""
    size = config.image_size
    img = texture(rng, size, config.texture_scale)
    anns: List[Annotation] = []
    findings: List[Finding] = []
    if stratum != "normal":
        lo, hi = config.findings_per_image
        amp_lo, amp_hi = config.benign_amplitude_range if stratum == "benign" else config.amplitude_range
        rows = np.arange(size, dtype=np.float64)[:, None]
        cols = np.arange(size, dtype=np.float64)[None, :]
        for _ in range(int(rng.integers(lo, hi + 1))):
            m = config.edge_margin
            center = (rng.uniform(m, size - 1 - m), rng.uniform(m, size - 1 - m))
            sigmas = (rng.uniform(*config.sigma_range), rng.uniform(*config.sigma_range))
            amp = rng.uniform(amp_lo, amp_hi)
            img += amp * np.exp(-((rows - center[0]) ** 2 / (2 * sigmas[0] ** 2) + (cols - center[1]) ** 2 / (2 * sigmas[1] ** 2)))
            findings.append(Finding(center, sigmas, amp))
            box = loose_box(rng, center, sigmas, config.looseness, config.jitter, size)
            anns.append(Annotation(box=tuple(float(v) for v in box), label=stratum,
                                   true_center=(round(float(center[0]), 4), round(float(center[1]), 4))))
    return np.clip(img, 0.0, 1.0), anns, findings


def to_uint16(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def _write_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint16(img)).save(path, format="PNG")


def generate(config: GenConfig, out_dir) -> dict:
    """Write images and ``manifest.json`` under ``out_dir``; returns the manifest."""
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    strata = list(STRATA)
    probs = np.array([config.incidence[s] for s in strata], dtype=np.float64)
    seeds = np.random.SeedSequence(config.seed).spawn(len(SPLITS))
    records = []
    for split, seq in zip(SPLITS, seeds):
        rng = np.random.default_rng(seq)
        for i in range(config.n_images.get(split, 0)):
            stratum = strata[int(rng.choice(len(strata), p=probs))]
            img, anns, _ = render_image(rng, stratum, config)
            image_id = f"{split}_{i:05d}"
            rel = f"images/{image_id}.png"
            _write_png(out / rel, img)
            records.append(SampleRecord(image_id, rel, split, anns))

    manifest = {
        "version": FORMAT_VERSION,
        "image_size": config.image_size,
        "config": _jsonable(asdict(config)),
        "summary": summarize(records),
        "records": [r.to_dict() for r in records],
    }
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, out / MANIFEST)
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def summarize(records: Sequence[SampleRecord]) -> dict:
    """Per-split annotation counts by label and image counts by stratum."""
    out = {}
    for split in SPLITS:
        recs = [r for r in records if r.split == split]
        labels = Counter(a.label for r in recs for a in r.annotations)
        images = Counter(r.stratum for r in recs)
        out[split] = {
            "annotations": {lab: labels.get(lab, 0) for lab in LABELS},
            "images": {s: images.get(s, 0) for s in STRATA},
        }
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt manifest ({exc})") from None
    for key in ("version", "image_size", "records"):
        if key not in manifest:
            raise ValidationError(f"{path}: manifest lacks '{key}'")
    if manifest["version"] != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {manifest['version']}")
    return manifest


def load(dataset_dir, split: Optional[str] = None) -> List[SampleRecord]:
    """Validated records of one split (or all splits when ``split`` is None)."""
    manifest = read_manifest(dataset_dir)
    size = int(manifest["image_size"])
    if split is not None and split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    records = []
    for raw in manifest["records"]:
        try:
            image_id = raw["image_id"]
            rec_split = raw["split"]
            anns_raw = raw["annotations"]
            path = raw["image_path"]
        except (KeyError, TypeError):
            raise ValidationError(f"malformed record {raw!r}") from None
        if rec_split not in SPLITS:
            raise ValidationError(f"record {image_id}: unknown split {rec_split!r}")
        if split is not None and rec_split != split:
            continue
        anns = []
        for j, a in enumerate(anns_raw):
            ann = Annotation.from_dict(a)
            ann.validate((size, size), where=f"record {image_id} annotation {j}")
            anns.append(ann)
        records.append(SampleRecord(image_id, path, rec_split, anns))
    return records


def read_image(dataset_dir, record: SampleRecord, size: Optional[int] = None) -> np.ndarray:
    """Decode a record's PNG to float32 in [0, 1]."""
    path = Path(dataset_dir) / record.image_path
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise ValidationError(f"{path}: expected 16-bit grayscale, got {arr.dtype} {arr.shape}")
    if size is not None and arr.shape != (size, size):
        raise ValidationError(f"{path}: size {arr.shape} != declared {size}x{size}")
    return (arr.astype(np.float32) / np.float32(65535.0))


def load_arrays(dataset_dir, split: str):
    """``(images [N, H, W] float32, annotations list, records)`` for a split."""
    size = int(read_manifest(dataset_dir)["image_size"])
    records = load(dataset_dir, split)
    if not records:
        return np.zeros((0, size, size), dtype=np.float32), [], records
    images = np.stack([read_image(dataset_dir, r, size) for r in records])
    return images, [r.annotations for r in records], records


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


class StratifiedSampler:
    """Infinite stream of record indices: uniform stratum, then uniform image within it.

    ``state`` / ``set_state`` expose the generator state so a stream can be
    resumed exactly.
    """

    def __init__(self, strata_of: Sequence[str], seed: int = 0, strata: Sequence[str] = STRATA):
        self.strata = tuple(strata)
        self.members: Dict[str, np.ndarray] = {}
        for s in self.strata:
            idx = np.array([i for i, lab in enumerate(strata_of) if lab == s], dtype=np.int64)
            if idx.size == 0:
                raise ConfigError(f"stratum '{s}' has no images")
            self.members[s] = idx
        self.rng = np.random.default_rng(seed)

    def __iter__(self) -> Iterator[int]:
        return self

    def __next__(self) -> int:
        s = self.strata[int(self.rng.integers(len(self.strata)))]
        members = self.members[s]
        return int(members[int(self.rng.integers(members.size))])

    @property
    def state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def stratified_sampler(records, seed: int = 0, strata: Sequence[str] = STRATA) -> StratifiedSampler:
    """Sampler over records (SampleRecords or annotation lists).

    Yields indices into ``records``; use ``records[i].image_id`` for ids.
    """
    labels = [r.stratum if isinstance(r, SampleRecord) else image_stratum(r) for r in records]
    return StratifiedSampler(labels, seed, strata)
