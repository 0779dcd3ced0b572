"""Image augmentations applied to raw ``[0, 1]`` pixels.

All operations are pure.  The random ones take an :class:`~genaug.rng.RngStream`
and draw from it in a fixed order, so ``(image, seed)`` fully determines the
output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .rng import RngStream
from .tensor import LUMA, ShapeError, check_image, check_image_batch, clamp01

KINDS = ("flip", "saturation", "crop_resize", "brightness", "erase", "sobel", "vap", "compose")

ALIASES = {
    "flip_lr": "flip",
    "random_saturation": "saturation",
    "crop": "crop_resize",
    "random_erase": "erase",
    "random_erasing": "erase",
    "cutout": "erase",
    "virtual_adversarial": "vap",
}

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "flip": {},
    "saturation": {"low": 1.0, "high": 2.0},
    "crop_resize": {"fraction": 0.75},
    "brightness": {"delta": 0.2},
    "erase": {"area_low": 0.10, "area_high": 0.25, "aspect_low": 0.5, "aspect_high": 2.0},
    "sobel": {},
    "vap": {"epsilon": 0.05, "xi": 1e-3, "iterations": 1},
    "compose": {},
}

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


class AugmentationError(ValueError):
    pass


def canonical_kind(kind: str) -> str:
    k = str(kind).strip().lower()
    k = ALIASES.get(k, k)
    if k not in KINDS:
        raise AugmentationError(f"unknown augmentation kind {kind!r}")
    return k


@dataclass
class AugmentationSpec:
    """One augmentation with its parameters and misclassification penalty."""

    kind: str
    params: dict = field(default_factory=dict)
    children: list = field(default_factory=list)
    penalty: float = 0.0

    def __post_init__(self):
        self.kind = canonical_kind(self.kind)
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise AugmentationError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged.update(self.params)
        self.params = merged
        self.children = [c if isinstance(c, AugmentationSpec) else spec_from_dict(c)
                         for c in self.children]
        self.penalty = float(self.penalty)
        self.validate()

    def validate(self) -> None:
        if not math.isfinite(self.penalty) or self.penalty < 0:
            raise AugmentationError(f"penalty must be a finite non-negative number, got {self.penalty}")
        if self.kind == "compose":
            if len(self.children) < 2:
                raise AugmentationError("compose needs at least two children")
            if any(c.kind == "compose" for c in self.children):
                raise AugmentationError("nested compose is not supported")
        elif self.children:
            raise AugmentationError(f"{self.kind} takes no children")
        p = self.params
        if self.kind == "saturation" and not (0.0 <= p["low"] <= p["high"]):
            raise AugmentationError(f"bad saturation range [{p['low']}, {p['high']}]")
        if self.kind == "crop_resize" and not (0.0 < p["fraction"] <= 1.0):
            raise AugmentationError(f"crop fraction must be in (0, 1], got {p['fraction']}")
        if self.kind == "brightness" and not p["delta"] >= 0.0:
            raise AugmentationError(f"brightness delta must be >= 0, got {p['delta']}")
        if self.kind == "erase":
            if not (0.0 < p["area_low"] <= p["area_high"] <= 1.0):
                raise AugmentationError("erase area fractions must satisfy 0 < low <= high <= 1")
            if not (0.0 < p["aspect_low"] <= p["aspect_high"]):
                raise AugmentationError("erase aspect range must satisfy 0 < low <= high")
        if self.kind == "vap":
            if not (p["epsilon"] > 0 and p["xi"] > 0 and int(p["iterations"]) >= 1):
                raise AugmentationError("vap needs epsilon > 0, xi > 0, iterations >= 1")
            p["iterations"] = int(p["iterations"])

    @property
    def name(self) -> str:
        if self.kind == "compose":
            return "+".join(c.name for c in self.children)
        return self.kind

    def to_dict(self, with_penalty: bool = True) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "compose":
            out["children"] = [c.to_dict(with_penalty=False) for c in self.children]
        if self.params:
            out["params"] = dict(self.params)
        if with_penalty:
            out["lambda"] = self.penalty
        return out


def spec_from_dict(d) -> AugmentationSpec:
    """Parse an augmentation entry; a bare string names a default-parameter kind."""
    if isinstance(d, AugmentationSpec):
        return d
    if isinstance(d, str):
        return AugmentationSpec(kind=d)
    if not isinstance(d, dict) or "kind" not in d:
        raise AugmentationError(f"augmentation entry must be a string or an object with 'kind': {d!r}")
    extra = set(d) - {"kind", "params", "children", "lambda", "penalty"}
    if extra:
        raise AugmentationError(f"unexpected keys {sorted(extra)} in augmentation entry")
    penalty = d.get("lambda", d.get("penalty", 0.0))
    if isinstance(penalty, bool) or not isinstance(penalty, (int, float)):
        raise AugmentationError(f"lambda must be a number, got {penalty!r}")
    return AugmentationSpec(
        kind=d["kind"],
        params=dict(d.get("params") or {}),
        children=list(d.get("children") or []),
        penalty=penalty,
    )


# -- kernels -----------------------------------------------------------------

def flip_lr(img) -> np.ndarray:
    img = check_image(img)
    return img[:, ::-1, :].copy()


def saturate(img, factor: float) -> np.ndarray:
    """Blend each pixel away from its luma by ``factor``."""
    img = check_image(img)
    if img.shape[2] != 3:
        raise ShapeError("saturation needs a 3-channel image")
    gray = (img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2])[..., None]
    # same blend as gray + factor * (img - gray), grouped so factor == 1 returns img exactly
    return clamp01(factor * img + (1.0 - factor) * gray)


def random_saturation(img, rng: RngStream, low: float = 1.0, high: float = 2.0) -> np.ndarray:
    img = check_image(img)
    if img.shape[2] != 3:
        raise ShapeError("saturation needs a 3-channel image")
    return saturate(img, rng.uniform(low, high))


def _resize_axis(n_in: int, n_out: int):
    # align_corners=False source coordinates
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    y0, y1, wy = _resize_axis(arr.shape[0], height)
    x0, x1, wx = _resize_axis(arr.shape[1], width)
    rows0 = arr[y0]
    rows1 = arr[y1]
    wy = wy[:, None, None]
    rows = rows0 + wy * (rows1 - rows0)
    wx = wx[None, :, None]
    left = rows[:, x0]
    return left + wx * (rows[:, x1] - left)


def crop_resize(img, fraction: float = 0.75) -> np.ndarray:
    img = check_image(img)
    if not (0.0 < fraction <= 1.0):
        raise AugmentationError(f"crop fraction must be in (0, 1], got {fraction}")
    H, W, _ = img.shape
    h, w = math.floor(fraction * H), math.floor(fraction * W)
    if h < 1 or w < 1:
        raise AugmentationError(f"crop of {fraction} leaves less than one pixel of a {H}x{W} image")
    top, left = (H - h) // 2, (W - w) // 2
    crop = img[top:top + h, left:left + w]
    if (h, w) == (H, W):
        return crop.copy()
    return clamp01(resize_bilinear(crop, H, W))


def brightness(img, delta: float = 0.2) -> np.ndarray:
    img = check_image(img)
    if not delta >= 0:
        raise AugmentationError(f"brightness delta must be >= 0, got {delta}")
    return clamp01(img + delta)


def erase_rectangle(shape, rng: RngStream, area_low=0.10, area_high=0.25,
                    aspect_low=0.5, aspect_high=2.0) -> tuple[int, int, int, int]:
    """Draw ``(top, left, height, width)`` of the erased rectangle."""
    H, W = shape[0], shape[1]
    if H < 4 or W < 4:
        raise AugmentationError(f"random erasing needs an image of at least 4x4, got {H}x{W}")
    area = rng.uniform(area_low, area_high)
    aspect = rng.uniform(aspect_low, aspect_high)
    eh = min(H, math.ceil(math.sqrt(area * H * W * aspect)))
    ew = min(W, math.ceil(math.sqrt(area * H * W / aspect)))
    top = rng.integers(0, H - eh + 1)
    left = rng.integers(0, W - ew + 1)
    return top, left, eh, ew


def random_erase(img, rng: RngStream, **params) -> np.ndarray:
    img = check_image(img)
    top, left, eh, ew = erase_rectangle(img.shape, rng, **params)
    out = img.copy()
    # fsum makes the mean independent of summation order; the clip (a no-op in exact
    # arithmetic) keeps constant channels unchanged after the division rounds
    n = img.shape[0] * img.shape[1]
    mean = np.array([math.fsum(img[:, :, c].ravel()) / n for c in range(img.shape[2])])
    fill = np.clip(mean, img.min(axis=(0, 1)), img.max(axis=(0, 1)))
    out[top:top + eh, left:left + ew, :] = fill
    return out


def _sobel_gradients(plane: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Each gradient is (positive taps) - (negative taps) so flat regions cancel exactly.
    p = np.pad(plane, 1, mode="edge")
    H, W = plane.shape
    right = p[0:H, 2:W + 2] + 2.0 * p[1:H + 1, 2:W + 2] + p[2:H + 2, 2:W + 2]
    left = p[0:H, 0:W] + 2.0 * p[1:H + 1, 0:W] + p[2:H + 2, 0:W]
    below = p[2:H + 2, 0:W] + 2.0 * p[2:H + 2, 1:W + 1] + p[2:H + 2, 2:W + 2]
    above = p[0:H, 0:W] + 2.0 * p[0:H, 1:W + 1] + p[0:H, 2:W + 2]
    return right - left, below - above


def sobel(img) -> np.ndarray:
    img = check_image(img)
    if img.shape[2] == 3:
        plane = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    else:
        plane = img[..., 0]
    gx, gy = _sobel_gradients(plane)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return np.repeat(clamp01(mag)[..., None], img.shape[2], axis=2)


def compose(children, img, rng: RngStream, model=None) -> np.ndarray:
    children = [spec_from_dict(c) for c in children]
    if len(children) < 2:
        raise AugmentationError("compose needs at least two children")
    if any(c.kind == "compose" for c in children):
        raise AugmentationError("nested compose is not supported")
    out = check_image(img)
    for child in children:
        out = apply(child, out, rng, model=model)
    return out


def apply(spec, img, rng: RngStream, model=None) -> np.ndarray:
    """Return the augmented copy ``x'`` of ``img`` described by ``spec``."""
    spec = spec_from_dict(spec)
    p = spec.params
    kind = spec.kind
    if kind == "flip":
        return flip_lr(img)
    if kind == "saturation":
        return random_saturation(img, rng, p["low"], p["high"])
    if kind == "crop_resize":
        return crop_resize(img, p["fraction"])
    if kind == "brightness":
        return brightness(img, p["delta"])
    if kind == "erase":
        return random_erase(img, rng, **p)
    if kind == "sobel":
        return sobel(img)
    if kind == "vap":
        if model is None:
            raise AugmentationError("vap needs a model")
        from .perturb import VapParams, vap
        return vap(model, img, VapParams(p["epsilon"], p["xi"], p["iterations"]), rng)
    return compose(spec.children, img, rng, model=model)


class Augmenter(TransformerMixin, BaseEstimator):
    """Apply one augmentation to every image of an ``[N, H, W, C]`` batch.

    Sample ``i`` draws from the substream ``(seed, i, 0)``, so the output for a
    sample does not depend on the rest of the batch.

    Parameters
    ----------
    kind : str
        Augmentation kind, e.g. ``"flip"`` or ``"compose"``.
    params : dict, optional
        Overrides for the kind's default parameters.
    children : list, optional
        Child augmentations for ``"compose"``.
    seed : int
        Seed for the random augmentations.
    model : Model, optional
        Required by ``"vap"`` only.
    """

    def __init__(self, kind="flip", params=None, children=None, seed=0, model=None):
        self.kind = kind
        self.params = params
        self.children = children
        self.seed = seed
        self.model = model

    def fit(self, X, y=None):
        X = check_image_batch(X, "X")
        self.spec_ = AugmentationSpec(self.kind, dict(self.params or {}), list(self.children or []))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "spec_")
        X = check_image_batch(X, "X")
        return np.stack([
            apply(self.spec_, x, RngStream.substream(self.seed, i, 0), model=self.model)
            for i, x in enumerate(X)
        ])
