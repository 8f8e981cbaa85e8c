"""Minimal dense tensor with reverse-mode differentiation.

Only the handful of operations needed by the hourglass network and the
detection loss are provided.  Every operation records a closure that maps
the gradient of its output to gradients of its inputs; ``Tensor.backward``
walks the recorded graph once in reverse topological order.

Arrays are 32-bit by default.  Tensors built from 64-bit arrays stay 64-bit
through every operation, which is what :func:`grad_check` relies on.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, GraphError

__all__ = [
    "Tensor",
    "conv2d",
    "downsample2",
    "upsample2",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "scale",
    "window",
    "sum_squares",
    "pointwise",
    "grad_check",
]


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        dtype = np.float64 if np.asarray(data).dtype == np.float64 else np.float32
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.asarray(data, dtype=dtype, order="C")


class Tensor:
    """Dense array with an optional gradient buffer.

    Parameters
    ----------
    data : array_like
        Values; converted to float32 unless already float64.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad`` for this
        tensor when it is a leaf of a graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        The graph is released afterwards; a second call raises ``GraphError``.
        """
        if self._consumed:
            raise GraphError("backward called twice on the same graph; run a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if node.requires_grad and g is not None:
                    if node.grad is None:
                        node.grad = np.array(g, dtype=node.dtype, copy=True)
                    else:
                        node.grad += g
                continue
            if node._consumed:
                raise GraphError("graph node already consumed by an earlier backward pass")
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not _needs_grad(parent):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._consumed = True


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


def _check_same_shape(a: Tensor, b, op: str) -> None:
    if a.shape != np.shape(b):
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {np.shape(b)}")


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: Optional[int] = None) -> Tensor:
    """Stride-1 "same" convolution of a [C_in, H, W] input.

    ``padding`` must equal ``(k - 1) // 2``; it defaults to that value.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] input and [Co,Ci,k,k] weights, got {x.shape}, {weight.shape}")
    c_in, h, w = x.shape
    c_out, w_in, k, k2 = weight.shape
    if w_in != c_in:
        raise DimensionError(f"conv2d: weights expect {w_in} input channels, input has {c_in}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise DimensionError(f"conv2d: only same padding {pad} is supported for k={k}, got {padding}")

    dtype = x.dtype
    wmat = weight.data.reshape(c_out, c_in * k * k).astype(dtype, copy=False)
    if k == 1:
        cols = x.data.reshape(c_in, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
        cols5 = np.empty((c_in, k, k, h, w), dtype=dtype)
        for i in range(k):
            for j in range(k):
                cols5[:, i, j] = xp[:, i:i + h, j:j + w]
        cols = cols5.reshape(c_in * k * k, h * w)
    out = wmat @ cols
    out += bias.data.astype(dtype, copy=False)[:, None]
    out = out.reshape(c_out, h, w)

    def backward(g):
        g2 = g.reshape(c_out, h * w)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if k == 1:
                gx = dcols.reshape(c_in, h, w)
            else:
                dcols = dcols.reshape(c_in, k, k, h, w)
                gxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + h, j:j + w] += dcols[:, i, j]
                gx = gxp[:, pad:pad + h, pad:pad + w]
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward, "conv2d")


def downsample2(x: Tensor, mode: str = "max") -> Tensor:
    """2x2 / stride-2 pooling of a [C, H, W] tensor (max or mean)."""
    if x.data.ndim != 3:
        raise DimensionError(f"downsample2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"downsample2 needs even spatial dims, got {h}x{w}")
    hh, ww = h // 2, w // 2
    blocks = x.data.reshape(c, hh, 2, ww, 2).transpose(0, 1, 3, 2, 4).reshape(c, hh, ww, 4)

    if mode == "max":
        idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            gb = np.zeros((c, hh, ww, 4), dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            return (gb.reshape(c, hh, ww, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    elif mode == "mean":
        out = blocks.mean(axis=-1, dtype=x.dtype)

        def backward(g):
            q = (g * x.dtype.type(0.25))[:, :, None, :, None]
            return (np.broadcast_to(q, (c, hh, 2, ww, 2)).reshape(c, h, w).copy(),)

    else:
        raise ValueError(f"unknown downsample mode {mode!r}")
    return _make(np.ascontiguousarray(out), (x,), backward, f"downsample2_{mode}")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a [C, H, W] tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None], (c, h, 2, w, 2)).reshape(c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _make(np.ascontiguousarray(out), (x,), backward, "upsample2")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    out = np.where(active, x.data, x.dtype.type(0))
    return _make(out, (x,), lambda g: (g * active,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return _make(out, (x,), backward, "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b.data, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    """``a - b``; ``b`` may be a Tensor or a constant array of the same shape."""
    if isinstance(b, Tensor):
        _check_same_shape(a, b.data, "sub")
        return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    b = np.asarray(b, dtype=a.dtype)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b, (a,), lambda g: (g,), "sub_const")


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return _make(x.data * f, (x,), lambda g: (g * f,), "scale")


def pointwise(x: Tensor, kind: str, other: Optional[Tensor] = None) -> Tensor:
    """Dispatch to ``relu``, ``sigmoid`` or ``add`` by name."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "add":
        if other is None:
            raise ValueError("pointwise add needs a second operand")
        return add(x, other)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def window(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Crop a ``height x width`` window from the last two axes of ``x``.

    The window may extend past the borders; those positions are filled with
    zeros and receive no gradient.  Leading axes of size one are dropped, so a
    [1, H, W] input yields a [height, width] result.
    """
    arr = x.data
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"window expects a single-channel map, got {x.shape}")
    H, W = arr.shape
    r0, r1 = max(top, 0), min(top + height, H)
    c0, c1 = max(left, 0), min(left + width, W)
    out = np.zeros((height, width), dtype=x.dtype)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = arr[r0:r1, c0:c1]

    def backward(g):
        gx = np.zeros((H, W), dtype=g.dtype)
        if r0 < r1 and c0 < c1:
            gx[r0:r1, c0:c1] = g[r0 - top:r1 - top, c0 - left:c1 - left]
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward, "window")


def sum_squares(x: Tensor, mask=None) -> Tensor:
    """Scalar ``sum(mask * x**2)``; the mask is a constant of the same shape."""
    if mask is None:
        out = np.sum(x.data * x.data)

        def backward(g):
            return (x.data * (2 * g),)

    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=x.dtype)
        _check_same_shape(x, m, "sum_squares")
        mx = m * x.data
        out = np.sum(mx * x.data)

        def backward(g):
            return (mx * (2 * g),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward, "sum_squares")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], input, step: float = 1e-3) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    Both sides are evaluated in float64.  The per-element error is
    ``|a - n| / max(|a|, |n|, floor)`` with ``floor = 1e-3 * max(|a|_inf, |n|_inf)``
    so entries that are negligible relative to the whole gradient are compared
    on the gradient's own scale rather than against zero.
    """
    base = np.array(input.data if isinstance(input, Tensor) else input, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = fn(x)
    if y.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if y.requires_grad:
        y.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn(Tensor(base)).data)
        flat[i] = orig - step
        f_minus = float(fn(Tensor(base)).data)
        flat[i] = orig
        nflat[i] = (f_plus - f_minus) / (2 * step)

    scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale_ == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale_)
    return float(np.max(np.abs(analytic - numeric) / denom))
