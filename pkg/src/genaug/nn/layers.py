"""Layers of the inference engine.

Activations are batched and channels-last: conv/pool layers see ``[N, H, W, C]``,
dense layers see ``[N, features]``.  Every layer implements ``forward`` returning
``(output, cache)`` and ``backward`` returning ``(input_grad, param_grads)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerShapeError(ValueError):
    pass


class Layer:
    kind: ClassVar[str] = ""
    param_names: ClassVar[tuple[str, ...]] = ()

    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def forward(self, x):
        return x, None

    def backward(self, dy, cache):
        return dy, {}

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def with_params(self, **arrays) -> "Layer":
        return self

    def config(self) -> dict:
        return {"type": self.kind}


def _same_padding(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def _require_spatial(kind, in_shape):
    if len(in_shape) != 3:
        raise LayerShapeError(f"{kind} expects [H, W, C] input, got {list(in_shape)}")


@dataclass(eq=False)
class Conv2d(Layer):
    """2-D cross-correlation with kernel layout ``[out_c, in_c, kh, kw]``.

    ``"same"`` padding splits the total padding with the extra row/column at
    the bottom/right; padded values are zero.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "valid"

    kind: ClassVar[str] = "conv2d"
    param_names: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise LayerShapeError(f"conv2d kernel must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise LayerShapeError(f"conv2d bias must have shape ({self.weight.shape[0]},)")
        if self.padding not in ("valid", "same"):
            raise LayerShapeError(f"conv2d padding must be 'valid' or 'same', got {self.padding!r}")
        self.stride = int(self.stride)
        if self.stride < 1:
            raise LayerShapeError("conv2d stride must be >= 1")

    def _pads(self, H, W):
        kh, kw = self.weight.shape[2:]
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return _same_padding(H, kh, self.stride), _same_padding(W, kw, self.stride)

    def output_shape(self, in_shape):
        _require_spatial(self.kind, in_shape)
        H, W, C = in_shape
        O, I, kh, kw = self.weight.shape
        if C != I:
            raise LayerShapeError(f"conv2d expects {I} input channels, got {C}")
        (pt, pb), (pl, pr) = self._pads(H, W)
        Ho = (H + pt + pb - kh) // self.stride + 1
        Wo = (W + pl + pr - kw) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise LayerShapeError(f"conv2d kernel {kh}x{kw} does not fit input {H}x{W}")
        return (Ho, Wo, O)

    def forward(self, x):
        N, H, W, C = x.shape
        O, I, kh, kw = self.weight.shape
        (pt, pb), (pl, pr) = self._pads(H, W)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        s = self.stride
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
        Ho, Wo = win.shape[1], win.shape[2]
        cols = win.reshape(N * Ho * Wo, C * kh * kw)
        y = cols @ self.weight.reshape(O, -1).T + self.bias
        return y.reshape(N, Ho, Wo, O), (x.shape, xp.shape, cols, pt, pl)

    def backward(self, dy, cache):
        x_shape, xp_shape, cols, pt, pl = cache
        N, Ho, Wo, O = dy.shape
        _, I, kh, kw = self.weight.shape
        dy2 = dy.reshape(-1, O)
        dw = (dy2.T @ cols).reshape(self.weight.shape)
        db = dy2.sum(axis=0)
        dcols = (dy2 @ self.weight.reshape(O, -1)).reshape(N, Ho, Wo, I, kh, kw)
        dxp = np.zeros(xp_shape)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s, :] += dcols[..., i, j]
        dx = dxp[:, pt:pt + x_shape[1], pl:pl + x_shape[2], :]
        return dx, {"weight": dw, "bias": db}

    def with_params(self, weight=None, bias=None):
        return Conv2d(self.weight if weight is None else weight,
                      self.bias if bias is None else bias, self.stride, self.padding)

    def config(self):
        O, I, kh, kw = self.weight.shape
        return {"type": self.kind, "in_channels": I, "out_channels": O,
                "kernel_size": [kh, kw], "stride": self.stride, "padding": self.padding}


@dataclass(eq=False)
class Dense(Layer):
    """Affine map with weight layout ``[out, in]``."""

    weight: np.ndarray
    bias: np.ndarray

    kind: ClassVar[str] = "dense"
    param_names: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise LayerShapeError(f"dense weight must be 2-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise LayerShapeError(f"dense bias must have shape ({self.weight.shape[0]},)")

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise LayerShapeError(f"dense expects flat input, got {list(in_shape)}; add a flatten layer")
        if in_shape[0] != self.weight.shape[1]:
            raise LayerShapeError(f"dense expects {self.weight.shape[1]} features, got {in_shape[0]}")
        return (self.weight.shape[0],)

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, x):
        return dy @ self.weight, {"weight": dy.T @ x, "bias": dy.sum(axis=0)}

    def with_params(self, weight=None, bias=None):
        return Dense(self.weight if weight is None else weight,
                     self.bias if bias is None else bias)

    def config(self):
        return {"type": self.kind, "in_features": self.weight.shape[1],
                "out_features": self.weight.shape[0]}


class Relu(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


@dataclass(eq=False)
class MaxPool2d(Layer):
    """Non-overlapping-by-default max pooling without padding.

    The backward pass sends the gradient to the first maximal element of each
    window in row-major scan order.
    """

    pool_size: int = 2
    stride: int | None = None

    kind: ClassVar[str] = "maxpool2d"

    def __post_init__(self):
        self.pool_size = int(self.pool_size)
        self.stride = self.pool_size if self.stride is None else int(self.stride)
        if self.pool_size < 1 or self.stride < 1:
            raise LayerShapeError("maxpool2d pool_size and stride must be >= 1")

    def output_shape(self, in_shape):
        _require_spatial(self.kind, in_shape)
        H, W, C = in_shape
        p, s = self.pool_size, self.stride
        if H < p or W < p:
            raise LayerShapeError(f"maxpool2d window {p} does not fit input {H}x{W}")
        return ((H - p) // s + 1, (W - p) // s + 1, C)

    def forward(self, x):
        p, s = self.pool_size, self.stride
        win = sliding_window_view(x, (p, p), axis=(1, 2))[:, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (p * p,))
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        x_shape, arg = cache
        p, s = self.pool_size, self.stride
        _, Ho, Wo, _ = dy.shape
        dx = np.zeros(x_shape)
        for i in range(p):
            for j in range(p):
                hit = arg == i * p + j
                dx[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s, :] += dy * hit
        return dx, {}

    def config(self):
        return {"type": self.kind, "pool_size": self.pool_size, "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        _require_spatial(self.kind, in_shape)
        return (in_shape[2],)

    def forward(self, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, shape):
        N, H, W, C = shape
        return np.broadcast_to(dy[:, None, None, :] / (H * W), shape).copy(), {}


class Softmax(Layer):
    """Marker for the final normalization; the model applies it once."""

    kind = "softmax"

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise LayerShapeError(f"softmax expects flat input, got {list(in_shape)}")
        return tuple(in_shape)


@dataclass(eq=False)
class Dropout(Layer):
    """Identity at inference; the rate is kept as metadata."""

    rate: float = 0.0

    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        self.rate = float(self.rate)
        if not 0.0 <= self.rate < 1.0:
            raise LayerShapeError(f"dropout rate must be in [0, 1), got {self.rate}")

    def config(self):
        return {"type": self.kind, "rate": self.rate}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, Dense, Relu, MaxPool2d, Flatten,
                                         GlobalAvgPool, Softmax, Dropout)}
