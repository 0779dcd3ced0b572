"""Model container, forward pass and reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import ShapeError, check_image, check_image_batch
from .layers import Layer, LayerShapeError, Softmax


class NumericalError(ArithmeticError):
    """A non-finite value appeared during a forward or backward pass."""


@dataclass(eq=False)
class Model:
    """A sequential classifier with per-channel input normalization.

    A trailing :class:`Softmax` is optional: probabilities are always obtained
    by exactly one stabilized softmax over the output of the last non-softmax
    layer.
    """

    layers: list
    input_shape: tuple
    num_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.num_classes = int(self.num_classes)
        if len(self.input_shape) != 3:
            raise LayerShapeError(f"input_shape must be [H, W, C], got {list(self.input_shape)}")
        C = self.input_shape[2]
        self.mean = np.zeros(C) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(C) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (C,) or self.std.shape != (C,):
            raise LayerShapeError(f"preprocessing mean/std must have {C} entries")
        if not np.all(self.std > 0):
            raise ValueError("preprocessing std values must be strictly positive")
        self.layers = list(self.layers)
        for i, layer in enumerate(self.layers):
            if not isinstance(layer, Layer):
                raise TypeError(f"layer {i} is not a Layer: {layer!r}")
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise LayerShapeError("softmax may only appear as the final layer")
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except LayerShapeError as exc:
                raise LayerShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if shape != (self.num_classes,):
            raise LayerShapeError(
                f"final output shape {list(shape)} does not match num_classes={self.num_classes}")

    @property
    def body(self) -> list:
        """Layers up to (excluding) the final softmax."""
        if self.layers and isinstance(self.layers[-1], Softmax):
            return self.layers[:-1]
        return self.layers

    def with_layers(self, layers) -> "Model":
        return Model(layers, self.input_shape, self.num_classes, self.mean.copy(),
                     self.std.copy(), dict(self.metadata))

    def n_parameters(self) -> int:
        return sum(int(a.size) for layer in self.layers for a in layer.params().values())


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def preprocess(model: Model, img) -> np.ndarray:
    img = check_image(img)
    if img.shape != model.input_shape:
        raise ShapeError(f"image shape {img.shape} does not match model input {model.input_shape}")
    return (img - model.mean) / model.std


def _preprocess_batch(model, X):
    X = check_image_batch(X)
    if X.shape[1:] != model.input_shape:
        raise ShapeError(f"image shape {X.shape[1:]} does not match model input {model.input_shape}")
    return (X - model.mean) / model.std


def _run(model, x, keep_caches):
    caches = []
    for i, layer in enumerate(model.body):
        x, cache = layer.forward(x)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite activation after layer {i} ({layer.kind})")
        if keep_caches:
            caches.append(cache)
    return x, caches


def logits_batch(model: Model, X) -> np.ndarray:
    return _run(model, _preprocess_batch(model, X), False)[0]


def forward_batch(model: Model, X) -> np.ndarray:
    """Class probabilities for an ``[N, H, W, C]`` stack, shape ``[N, K]``."""
    return softmax(logits_batch(model, X))


def forward(model: Model, img) -> np.ndarray:
    """Class probabilities ``P(y | img)`` for one image."""
    return forward_batch(model, check_image(img)[None])[0]


def _backward(model, caches, dz):
    grads = [None] * len(model.body)
    g = dz
    for i in range(len(model.body) - 1, -1, -1):
        g, pg = model.body[i].backward(g, caches[i])
        grads[i] = pg
    return g, grads


def input_gradient(model: Model, img, *, log_prob_of: int | None = None,
                   kl_to=None) -> np.ndarray:
    """Gradient w.r.t. the raw pixels of ``log P(k|img)`` or ``KL(p || P(.|img))``.

    Exactly one of ``log_prob_of`` (class index ``k``) or ``kl_to`` (a fixed
    probability vector ``p``) must be given.
    """
    if (log_prob_of is None) == (kl_to is None):
        raise ValueError("give exactly one of log_prob_of or kl_to")
    x = preprocess(model, img)[None]
    z, caches = _run(model, x, True)
    q = softmax(z)[0]
    if log_prob_of is not None:
        k = int(log_prob_of)
        if not 0 <= k < model.num_classes:
            raise ValueError(f"class index {k} out of range")
        dz = -q
        dz[k] += 1.0
    else:
        p = np.asarray(kl_to, dtype=np.float64)
        if p.shape != q.shape:
            raise ShapeError(f"reference distribution has {p.size} entries, expected {q.size}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("reference distribution must be non-negative and sum to 1")
        dz = q * p.sum() - p
    gx, _ = _backward(model, caches, dz[None])
    g = gx[0] / model.std
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite input gradient")
    return g


def loss_and_gradients(model: Model, X, y):
    """Mean cross-entropy over a batch and its gradient for every layer.

    Returns ``(loss, grads)`` where ``grads[i]`` maps parameter names of layer
    ``i`` to arrays (empty for parameter-free layers).
    """
    X = _preprocess_batch(model, X)
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.shape[0] != X.shape[0] or y.size == 0:
        raise ValueError("batch must be non-empty with one label per image")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    z, caches = _run(model, X, True)
    z = z - z.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.size
    loss = -logq[np.arange(n), y].mean()
    dz = np.exp(logq)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    _, grads = _backward(model, caches, dz)
    if len(grads) < len(model.layers):
        grads.append({})
    for g in grads:
        for v in g.values():
            if not np.all(np.isfinite(v)):
                raise NumericalError("non-finite weight gradient")
    return float(loss), grads


def weight_gradients(model: Model, batch) -> list:
    """Per-layer gradients of the mean cross-entropy over ``batch``.

    ``batch`` is either an ``(images, labels)`` pair of arrays or a list of
    ``(image, label)`` tuples.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and np.ndim(batch[1]) == 1:
        X, y = batch
    else:
        batch = list(batch)
        if not batch:
            raise ValueError("batch must be non-empty")
        X = np.stack([np.asarray(img, dtype=np.float64) for img, _ in batch])
        y = np.array([int(lbl) for _, lbl in batch])
    return loss_and_gradients(model, X, y)[1]
