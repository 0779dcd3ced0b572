"""Virtual adversarial perturbation used as an augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Model, forward, input_gradient
from .rng import RngStream
from .tensor import ShapeError, check_image, clamp01

Q_FLOOR = 1e-12
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class VapParams:
    epsilon: float = 0.05
    xi: float = 1e-3
    iterations: int = 1

    def __post_init__(self):
        if not (self.epsilon > 0 and self.xi > 0 and int(self.iterations) >= 1):
            raise ValueError("VapParams needs epsilon > 0, xi > 0 and iterations >= 1")


def kl_divergence(p, q) -> float:
    """``KL(p || q)`` in nats, with ``0 log 0 = 0`` and ``q`` floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {q.shape}")
    q = np.maximum(q, Q_FLOOR)
    nz = p > 0
    return max(float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz])))), 0.0)


def _unit(v: np.ndarray):
    n = float(np.sqrt(np.sum(v * v)))
    if not np.isfinite(n) or n < NORM_FLOOR:
        return None
    return v / n


def vap_direction(model: Model, img, params: VapParams, rng: RngStream):
    """Unit adversarial direction found by power iteration, or ``None``."""
    img = check_image(img)
    p = forward(model, img)
    d = None
    for attempt in range(2):
        d = _unit(rng.normal(img.shape))
        if d is None:
            continue
        for _ in range(int(params.iterations)):
            g = input_gradient(model, clamp01(img + params.xi * d), kl_to=p)
            d = _unit(g)
            if d is None:
                break
        if d is not None:
            return d
    return None


def vap(model: Model, img, params: VapParams | None = None, rng: RngStream | None = None) -> np.ndarray:
    """Return ``clamp01(img + epsilon * r_adv)``.

    If the gradient vanishes the direction is redrawn once; a second failure
    returns ``img`` unchanged.
    """
    params = params or VapParams()
    rng = rng if rng is not None else RngStream(0)
    img = check_image(img)
    d = vap_direction(model, img, params, rng)
    if d is None:
        return img.copy()
    return clamp01(img + params.epsilon * d)
