"""Dense arrays and the ``Image`` convention used throughout the package.

Images are ``float64`` numpy arrays laid out row-major as ``[H, W, C]`` with
``C`` in ``{1, 3}`` and every value in ``[0, 1]``.  Batches of images add a
leading sample axis: ``[N, H, W, C]``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

# Rec.601 luma weights.
LUMA = np.array([0.299, 0.587, 0.114])


class ShapeError(ValueError):
    """Raised when an array does not have the expected shape."""


def new_tensor(shape: Sequence[int], data: Sequence[float]) -> np.ndarray:
    """Build a float64 array from a shape and flat row-major data."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    flat = np.asarray(data, dtype=np.float64).ravel()
    if math.prod(shape) != flat.size:
        raise ShapeError(
            f"shape {shape} holds {math.prod(shape)} values but {flat.size} were given"
        )
    if not np.all(np.isfinite(flat)):
        raise ValueError("tensor data must be finite")
    return flat.reshape(shape).copy()


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate ``img`` as an Image and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape [H, W, C], got {arr.shape}")
    if arr.shape[2] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {arr.shape[2]}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} is empty: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_image_batch(images, name: str = "images") -> np.ndarray:
    """Validate an ``[N, H, W, C]`` stack of Images."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must have shape [N, H, W, C], got {arr.shape}")
    if arr.shape[3] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {arr.shape[3]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def clamp01(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("clamp01 requires finite input")
    return np.clip(arr, 0.0, 1.0)


def to_grayscale(img) -> np.ndarray:
    """Rec.601 luma of a 3-channel image, returned with a single channel."""
    img = check_image(img)
    if img.shape[2] != 3:
        raise ShapeError(f"to_grayscale needs 3 channels, got {img.shape[2]}")
    y = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    return np.clip(y, 0.0, 1.0)[..., None]
