"""Adam training of the hourglass with the two-phase crop-then-full-image schedule."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import hourglass
from .annotation import STRATA, Annotation, image_stratum
from .errors import ConfigError, ValidationError
from .hourglass import Model
from .loss import LossBreakdown, LossConfig, ReferenceBank, total_loss
from .synth import StratifiedSampler
from .tensor import Tensor

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step", "epoch", "l_det", "l_bg", "total")

VARIANTS = ("full", "no-align", "no-size", "no-topk", "no-weight", "l2-baseline")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    # phase 1: crops centred on annotations (plus random crops of normal images)
    phase1_epochs: int = 0
    phase1_steps: int = 100
    crop_size: int = 64
    phase1_include_normal: bool = True
    # phase 2: full images drawn by the stratified sampler
    epochs: int = 1
    images_per_epoch: int = 100
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    # epochs between checkpoints; only used when a checkpoint directory is given, 0 disables
    checkpoint_every: int = 1

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        for name in ("phase1_epochs", "phase1_steps", "epochs", "images_per_epoch", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["bank"] = list(self.loss.bank.sigmas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown training config keys {sorted(bad)}")
        if "loss" in d and not isinstance(d["loss"], LossConfig):
            loss = dict(d["loss"])
            bad = set(loss) - set(LossConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown loss config keys {sorted(bad)}")
            if "bank" in loss:
                bank = loss["bank"]
                loss["bank"] = ReferenceBank(tuple(bank["sigmas"] if isinstance(bank, dict) else bank))
            d["loss"] = LossConfig(**loss)
        return cls(**d).validate()


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    """Training config for one ablation arm; each arm removes a single loss ingredient."""
    loss = config.loss
    if variant == "full":
        new = loss
    elif variant == "no-align":
        new = replace(loss, recenter=False)
    elif variant == "no-size":
        sigmas = loss.bank.sigmas
        new = replace(loss, bank=ReferenceBank((sigmas[len(sigmas) // 2],)))
    elif variant == "no-topk":
        new = replace(loss, k=0)
    elif variant == "no-weight":
        new = replace(loss, omega=1.0)
    elif variant == "l2-baseline":
        new = replace(loss, objective="l2")
    else:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return replace(config, loss=new)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class OptimizerState:
    """Adam first/second moment accumulators keyed by parameter name."""

    def __init__(self, params: Dict[str, Tensor]):
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in params.items())
        self.step = 0


def adam_step(params: Dict[str, Tensor], grads: Optional[Dict[str, np.ndarray]], state: OptimizerState,
              config: TrainConfig) -> None:
    """In-place bias-corrected Adam update of every parameter.

    ``grads=None`` reads each parameter's ``.grad``.
    """
    missing = [n for n, p in params.items() if (p.grad if grads is None else grads.get(n)) is None]
    if missing:
        raise ValueError(f"missing gradient for parameter '{missing[0]}'")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else np.asarray(grads[name], dtype=p.dtype)
        dt = p.dtype.type
        m, v = state.m[name], state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data -= dt(config.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(config.epsilon))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def crop_window(center, crop: int, size) -> tuple:
    """Top-left corner of a ``crop`` window centred on ``center``, shifted to stay in bounds."""
    h, w = size
    top = int(np.clip(center[0] - crop // 2, 0, h - crop))
    left = int(np.clip(center[1] - crop // 2, 0, w - crop))
    return top, left


def shift_annotations(anns: Sequence[Annotation], top: int, left: int, crop: int) -> List[Annotation]:
    """Annotations translated into crop coordinates; those centred outside the crop are dropped."""
    out = []
    for a in anns:
        r, c = a.pixel_center
        if top <= r < top + crop and left <= c < left + crop:
            r0, c0, r1, c1 = a.box
            out.append(Annotation((r0 - top, c0 - left, r1 - top, c1 - left), a.label))
    return out


class Trainer:
    """Owns the model, optimizer state, RNG streams and loss trace of one run.

    ``fit()`` runs whatever remains of phase 1 then phase 2, so a trainer
    restored from a checkpoint continues exactly where the saved run was.
    """

    def __init__(self, model: Model, images: np.ndarray, annotations: Sequence[Sequence[Annotation]],
                 config: TrainConfig, checkpoint_dir=None,
                 on_epoch: Optional[Callable[["Trainer"], None]] = None):
        self.model = model
        self.images = np.asarray(images, dtype=np.float32)
        self.annotations = [list(a) for a in annotations]
        self.config = config.validate()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.on_epoch = on_epoch
        self.opt = OptimizerState(model.params)
        self.trace: List[tuple] = []
        self.phase1_done = 0
        self.phase2_done = 0
        self._check_geometry()

        seq1, seq2 = np.random.SeedSequence(config.seed).spawn(2)
        strata = [image_stratum(a) for a in self.annotations]
        self.sampler1 = None
        self.crop_rng = np.random.default_rng(seq1.spawn(1)[0])
        if config.phase1_epochs > 0:
            wanted = STRATA if config.phase1_include_normal else STRATA[1:]
            p1_strata = [s for s in wanted if s in strata]
            if not any(s != "normal" for s in p1_strata):
                raise ConfigError("phase 1 needs at least one annotated image")
            self.sampler1 = StratifiedSampler(strata, int(seq1.generate_state(1)[0]), p1_strata)
        self.sampler2 = None
        if config.epochs > 0:
            self.sampler2 = StratifiedSampler(strata, int(seq2.generate_state(1)[0]))

    def _check_geometry(self) -> None:
        m = self.model.config.multiple
        if self.images.ndim != 3:
            raise ConfigError(f"images must be [N, H, W], got {self.images.shape}")
        h, w = self.images.shape[1:]
        if self.config.epochs > 0 and (h % m or w % m):
            raise ConfigError(f"image size {h}x{w} not divisible by 2**depth = {m}")
        if self.config.phase1_epochs > 0:
            c = self.config.crop_size
            if c % m or c > min(h, w):
                raise ConfigError(f"crop size {c} must be divisible by {m} and fit in {h}x{w}")

    # -- single step -------------------------------------------------------

    def step(self, image: np.ndarray, anns: Sequence[Annotation], epoch: int) -> LossBreakdown:
        self.model.zero_grad()
        out = hourglass.forward(self.model, image[None])
        bd = total_loss(out, anns, self.config.loss)
        bd.backward()
        adam_step(self.model.params, None, self.opt, self.config)
        self.trace.append((self.opt.step, epoch, bd.l_det, bd.l_bg, bd.total))
        return bd

    def _phase1_sample(self, idx: int):
        crop = self.config.crop_size
        img = self.images[idx]
        anns = self.annotations[idx]
        if anns:
            target = anns[int(self.crop_rng.integers(len(anns)))]
            top, left = crop_window(target.pixel_center, crop, img.shape)
        else:
            top = int(self.crop_rng.integers(img.shape[0] - crop + 1))
            left = int(self.crop_rng.integers(img.shape[1] - crop + 1))
        return img[top:top + crop, left:left + crop], shift_annotations(anns, top, left, crop)

    # -- phases ------------------------------------------------------------

    def run_phase1(self) -> None:
        cfg = self.config
        while self.phase1_done < cfg.phase1_epochs:
            epoch = self.phase1_done
            for _ in range(cfg.phase1_steps):
                img, anns = self._phase1_sample(next(self.sampler1))
                self.step(img, anns, epoch)
            self.phase1_done += 1
            self._end_epoch("phase1", self.phase1_done)

    def run_phase2(self) -> None:
        cfg = self.config
        while self.phase2_done < cfg.epochs:
            epoch = cfg.phase1_epochs + self.phase2_done
            for _ in range(cfg.images_per_epoch):
                idx = next(self.sampler2)
                self.step(self.images[idx], self.annotations[idx], epoch)
            self.phase2_done += 1
            self._end_epoch("phase2", self.phase2_done)

    def fit(self) -> Model:
        self.run_phase1()
        self.run_phase2()
        return self.model

    def _end_epoch(self, phase: str, done: int) -> None:
        if self.trace:
            recent = [row[4] for row in self.trace[-50:]]
            logger.info("%s epoch %d done, step %d, mean recent loss %.5f", phase, done, self.opt.step, float(np.mean(recent)))
        every = self.config.checkpoint_every
        if self.checkpoint_dir is not None and every and done % every == 0:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            self.save(self.checkpoint_dir / f"{phase}_epoch{done:03d}.ckpt")
        if self.on_epoch is not None:
            self.on_epoch(self)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "train_config": self.config.to_dict(),
            "trainer": {
                "adam_step": self.opt.step,
                "phase1_done": self.phase1_done,
                "phase2_done": self.phase2_done,
                "rng": {
                    "crop": self.crop_rng.bit_generator.state,
                    "sampler1": None if self.sampler1 is None else self.sampler1.state,
                    "sampler2": None if self.sampler2 is None else self.sampler2.state,
                },
            },
        }
        arrays = OrderedDict()
        for n in self.model.params:
            arrays[f"adam.m/{n}"] = self.opt.m[n]
        for n in self.model.params:
            arrays[f"adam.v/{n}"] = self.opt.v[n]
        arrays["trace"] = np.asarray(self.trace, dtype=np.float32).reshape(-1, len(TRACE_HEADER))
        hourglass.save(self.model, path, header, arrays)

    @classmethod
    def resume(cls, path, images, annotations, config: Optional[TrainConfig] = None, checkpoint_dir=None,
               on_epoch=None) -> "Trainer":
        model, header, arrays = hourglass.load(path)
        if "trainer" not in header:
            raise ValidationError(f"{path}: not a training checkpoint (no optimizer section)")
        if config is None:
            config = TrainConfig.from_dict(header["train_config"])
        trainer = cls(model, images, annotations, config, checkpoint_dir, on_epoch)
        st = header["trainer"]
        trainer.opt.step = int(st["adam_step"])
        for n, p in model.params.items():
            for kind, store in (("m", trainer.opt.m), ("v", trainer.opt.v)):
                arr = arrays.get(f"adam.{kind}/{n}")
                if arr is None or arr.shape != p.shape:
                    raise ValidationError(f"{path}: optimizer state for {n} missing or misshapen")
                store[n] = arr.copy()
        trainer.phase1_done = int(st["phase1_done"])
        trainer.phase2_done = int(st["phase2_done"])
        trainer.crop_rng.bit_generator.state = st["rng"]["crop"]
        if trainer.sampler1 is not None and st["rng"]["sampler1"] is not None:
            trainer.sampler1.set_state(st["rng"]["sampler1"])
        if trainer.sampler2 is not None and st["rng"]["sampler2"] is not None:
            trainer.sampler2.set_state(st["rng"]["sampler2"])
        trace = arrays.get("trace")
        if trace is not None:
            trainer.trace = [(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in trace]
        return trainer


def write_trace(trace: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for step, epoch, l_det, l_bg, total in trace:
            w.writerow([int(step), int(epoch), repr(float(l_det)), repr(float(l_bg)), repr(float(total))])


def train_phase1(model: Model, images, annotations, config: TrainConfig) -> Model:
    """Crop pretraining only (phase 2 skipped)."""
    t = Trainer(model, images, annotations, replace(config, epochs=0))
    t.run_phase1()
    return t.model


def train_phase2(model: Model, images, annotations, config: TrainConfig, checkpoint_dir=None) -> Model:
    """Full-image training only (phase 1 skipped)."""
    t = Trainer(model, images, annotations, replace(config, phase1_epochs=0), checkpoint_dir)
    t.run_phase2()
    return t.model
