"""Toy-scale stacked hourglass network with a single-channel sigmoid heatmap.

Each hourglass unit is the recursive encoder/decoder of Newell et al.: at
every level the input is processed at full resolution by a residual block
(the skip branch) and, in parallel, max-pooled, passed through residual
blocks (recursing to the next level), nearest-upsampled and added back to
the skip branch.  A shared 3x3 stem lifts the image to ``channels`` features
and a shared 1x1 head maps the last unit's features to one channel.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np

from . import checkpoint
from .errors import ConfigError, DimensionError, ValidationError
from .tensor import Tensor, add, conv2d, downsample2, relu, sigmoid, upsample2


@dataclass(frozen=True)
class HourglassConfig:
    stacks: int = 2
    depth: int = 3
    channels: int = 16
    seed: int = 0
    kernel_size: int = 3

    def validate(self) -> "HourglassConfig":
        if self.stacks < 1:
            raise ConfigError(f"stacks must be >= 1, got {self.stacks}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.channels < 4:
            raise ConfigError(f"channels must be >= 4, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        return self

    @property
    def multiple(self) -> int:
        """Spatial dims must be divisible by this."""
        return 2 ** self.depth


class Model:
    """Hourglass parameters plus the config that produced them."""

    def __init__(self, config: HourglassConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def copy(self) -> "Model":
        return Model(self.config, OrderedDict((n, Tensor(p.data.copy(), requires_grad=True)) for n, p in self.params.items()))

    def __call__(self, image) -> Tensor:
        return forward(self, image)


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------


def _residual_names(prefix: str) -> List[str]:
    return [f"{prefix}.conv1", f"{prefix}.conv2"]


def _unit_blocks(prefix: str, depth: int) -> List[str]:
    """Residual block prefixes of one hourglass unit, outermost level first."""
    blocks = []
    for level in range(depth, 0, -1):
        tag = f"{prefix}.l{level}"
        blocks += [f"{tag}.up", f"{tag}.low1", f"{tag}.low3"]
    blocks.append(f"{prefix}.bottom")
    return blocks


def _layer_shapes(config: HourglassConfig) -> List[Tuple[str, int, int, int]]:
    """(name, c_out, c_in, k) for every convolution, in parameter order."""
    c, k = config.channels, config.kernel_size
    layers = [("stem", c, 1, k)]
    for s in range(config.stacks):
        for block in _unit_blocks(f"hg{s}", config.depth):
            for conv in _residual_names(block):
                layers.append((conv, c, c, k))
    layers.append(("head", 1, c, 1))
    return layers


def build(config: HourglassConfig) -> Model:
    """Initialise a model deterministically from ``config.seed``.

    Weights and biases are drawn from U(-a, a) with a = sqrt(1 / fan_in).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, c_out, c_in, k in _layer_shapes(config):
        bound = np.sqrt(1.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=(c_out,)).astype(np.float32)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(b, requires_grad=True)
    return Model(config, params)


def parameter_count(config: HourglassConfig) -> int:
    """Closed-form parameter count; must agree with ``build(config).parameter_count()``."""
    c, k = config.channels, config.kernel_size
    stem = k * k * c + c
    block = 2 * (k * k * c * c + c)
    unit = (3 * config.depth + 1) * block
    head = c + 1
    return stem + config.stacks * unit + head


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _conv(p: Dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return conv2d(x, p[f"{name}.w"], p[f"{name}.b"])


def _residual(p: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = relu(_conv(p, f"{prefix}.conv1", x))
    h = _conv(p, f"{prefix}.conv2", h)
    return relu(add(h, x))


def _hourglass(p: Dict[str, Tensor], prefix: str, level: int, x: Tensor) -> Tensor:
    tag = f"{prefix}.l{level}"
    up = _residual(p, f"{tag}.up", x)
    low = _residual(p, f"{tag}.low1", downsample2(x, "max"))
    if level > 1:
        low = _hourglass(p, prefix, level - 1, low)
    else:
        low = _residual(p, f"{prefix}.bottom", low)
    low = _residual(p, f"{tag}.low3", low)
    return add(up, upsample2(low))


def check_input(config: HourglassConfig, image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if x.data.ndim == 2:
        x = Tensor(x.data[None], requires_grad=x.requires_grad)
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise DimensionError(f"expected a [1,H,W] image, got shape {x.shape}")
    m = config.multiple
    if x.shape[1] % m or x.shape[2] % m:
        raise DimensionError(f"spatial dims {x.shape[1:]} must be divisible by 2**depth = {m}")
    return x


def forward(model: Model, image, track_grad: bool = True) -> Tensor:
    """Heatmap [1, H, W] with values in (0, 1) for an image [1, H, W].

    With ``track_grad=False`` no graph is recorded, which is what inference uses.
    """
    x = check_input(model.config, image)
    if track_grad:
        p = model.params
    else:
        p = {n: Tensor(t.data) for n, t in model.params.items()}
        x = Tensor(x.data)
    h = relu(_conv(p, "stem", x))
    for s in range(model.config.stacks):
        h = _hourglass(p, f"hg{s}", model.config.depth, h)
    return sigmoid(_conv(p, "head", h))


def predict_heatmap(model: Model, image) -> np.ndarray:
    """Inference-only forward pass returning a plain [H, W] array."""
    return forward(model, image, track_grad=False).data[0]


# ---------------------------------------------------------------------------
# receptive field
# ---------------------------------------------------------------------------


def compose_receptive_field(layers: Iterable) -> Tuple[int, int]:
    """Receptive field and jump after a sequence of layers.

    ``layers`` items are ``("conv", k)``, ``("pool", 2)``, ``("up", 2)`` or
    ``("branch", [seq_a, seq_b, ...])``; a branch takes the widest of its
    sub-sequences, which must share the same total jump.
    """
    rf, jump = 1, 1
    rf, jump = _compose(layers, rf, jump)
    return rf, jump


def _compose(layers, rf, jump):
    for kind, arg in layers:
        if kind == "conv":
            rf += (arg - 1) * jump
        elif kind == "pool":
            rf += (arg - 1) * jump
            jump *= arg
        elif kind == "up":
            jump //= arg
        elif kind == "branch":
            results = [_compose(seq, rf, jump) for seq in arg]
            rf = max(r for r, _ in results)
            jump = results[0][1]
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return rf, jump


def _describe(config: HourglassConfig) -> list:
    k = config.kernel_size
    res = [("conv", k), ("conv", k)]

    def unit(level):
        low = [("pool", 2)] + res
        low += unit(level - 1) if level > 1 else res
        low += res + [("up", 2)]
        return [("branch", [res, low])]

    layers = [("conv", k)]
    for _ in range(config.stacks):
        layers += unit(config.depth)
    layers.append(("conv", 1))
    return layers


def receptive_field(config: HourglassConfig) -> int:
    """Theoretical receptive field (pixels, per axis) of one output pixel."""
    config.validate()
    rf, _ = compose_receptive_field(_describe(config))
    return rf


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_header(model: Model) -> dict:
    return {"kind": "hourglass", "config": asdict(model.config)}


def save(model: Model, path, extra_header=None, extra_arrays=None) -> None:
    header = model_header(model)
    if extra_header:
        header.update(extra_header)
    arrays = OrderedDict((f"model/{n}", a) for n, a in model.state_arrays().items())
    if extra_arrays:
        arrays.update(extra_arrays)
    checkpoint.write_container(path, header, arrays)


def load(path) -> Tuple[Model, dict, Dict[str, np.ndarray]]:
    """Load a model; returns (model, header, remaining non-model arrays)."""
    header, arrays = checkpoint.read_container(path)
    try:
        config = HourglassConfig(**header["config"]).validate()
    except (KeyError, TypeError, ConfigError) as exc:
        raise ValidationError(f"{path}: bad model config in header ({exc})") from None
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, c_out, c_in, k in _layer_shapes(config):
        for suffix, shape in (("w", (c_out, c_in, k, k)), ("b", (c_out,))):
            key = f"model/{name}.{suffix}"
            if key not in arrays:
                raise ValidationError(f"{path}: missing parameter {key}")
            if arrays[key].shape != shape:
                raise ValidationError(f"{path}: {key} has shape {arrays[key].shape}, config implies {shape}")
            params[f"{name}.{suffix}"] = Tensor(arrays.pop(key).copy(), requires_grad=True)
    leftover = [k for k in arrays if k.startswith("model/")]
    if leftover:
        raise ValidationError(f"{path}: unexpected parameters {leftover[:3]}")
    return Model(config, params), header, arrays
