"""Augmentation-robustness generalization metric.

For every selected training sample ``x`` and every augmentation with penalty
``lam > 0``:

* if the predicted class of ``x'`` equals that of ``x``, the metric loses the
  change in confidence ``|P(y_hat|x) - P(y_hat|x')|``;
* otherwise it loses ``lam``.

The metric is the sum of these (non-positive) contributions; more negative
means less robust.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ._parallel import ordered_map
from .augment import AugmentationError, AugmentationSpec, apply, spec_from_dict
from .nn import Model, forward, forward_batch
from .rng import RngStream
from .tensor import check_image, check_image_batch

FORMAT_VERSION = 1
DEFAULT_SAMPLE_COUNT = 1000
CHUNK = 32

PRESETS = ("table1_row1", "table1_row2", "table1_row3")


class ConfigError(ValueError):
    pass


@dataclass
class PenaltyConfig:
    entries: list
    sample_count: int = DEFAULT_SAMPLE_COUNT
    seed: int = 0

    def __post_init__(self):
        try:
            self.entries = [spec_from_dict(e) for e in self.entries]
        except AugmentationError as exc:
            raise ConfigError(str(exc)) from None
        if isinstance(self.sample_count, bool) or int(self.sample_count) != self.sample_count \
                or self.sample_count < 1:
            raise ConfigError(f"sample_count must be a positive integer, got {self.sample_count}")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.sample_count = int(self.sample_count)
        self.seed = int(self.seed)
        if not self.entries:
            raise ConfigError("config has no augmentation entries")

    @property
    def active(self) -> list[tuple[int, AugmentationSpec]]:
        return [(i, e) for i, e in enumerate(self.entries) if e.penalty > 0]

    def penalties(self) -> list[float]:
        return [e.penalty for e in self.entries]

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "seed": self.seed,
                "sample_count": self.sample_count,
                "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        if not isinstance(d, dict) or "entries" not in d:
            raise ConfigError("penalty config must be an object with an 'entries' list")
        extra = set(d) - {"format_version", "seed", "sample_count", "entries", "name", "description"}
        if extra:
            raise ConfigError(f"unexpected keys in penalty config: {sorted(extra)}")
        if not isinstance(d["entries"], list):
            raise ConfigError("'entries' must be a list")
        return cls(d["entries"], d.get("sample_count", DEFAULT_SAMPLE_COUNT), d.get("seed", 0))


def load_penalty_config(path) -> PenaltyConfig:
    """Load a config from a JSON file, or a shipped preset by name."""
    if str(path) in PRESETS:
        text = resources.files("genaug.presets").joinpath(f"{path}.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read penalty config {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return PenaltyConfig.from_dict(d)


def save_penalty_config(config: PenaltyConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


@dataclass
class AugmentationResult:
    name: str
    penalty: float
    phi: float = 0.0
    mismatches: int = 0
    confidence_loss: float = 0.0
    skipped: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "lambda": self.penalty, "phi": self.phi,
                "mismatch_count": self.mismatches, "confidence_loss": self.confidence_loss,
                "skipped": self.skipped}


@dataclass
class MetricReport:
    phi_total: float
    per_augmentation: list
    samples_scored: int
    samples_requested: int
    seed: int
    model_id: str = ""
    notes: list = field(default_factory=list)

    @property
    def phi_per_sample(self) -> float:
        return self.phi_total / self.samples_scored

    @property
    def truncated(self) -> bool:
        return self.samples_scored < self.samples_requested

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_id": self.model_id,
            "phi_total": self.phi_total,
            "phi_per_sample": self.phi_per_sample,
            "samples_scored": self.samples_scored,
            "samples_requested": self.samples_requested,
            "truncated": self.truncated,
            "seed": self.seed,
            "active_augmentations": sum(not a.skipped for a in self.per_augmentation),
            "per_augmentation": [a.to_dict() for a in self.per_augmentation],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        per = [AugmentationResult(a["name"], a["lambda"], a["phi"], a["mismatch_count"],
                                  a["confidence_loss"], a["skipped"]) for a in d["per_augmentation"]]
        return cls(d["phi_total"], per, d["samples_scored"], d["samples_requested"], d["seed"],
                   d.get("model_id", ""), list(d.get("notes", [])))


def _penalty(p_orig: np.ndarray, p_aug: np.ndarray, lam: float) -> tuple[float, bool]:
    y_hat = int(np.argmax(p_orig))
    if int(np.argmax(p_aug)) == y_hat:
        return -abs(float(p_orig[y_hat]) - float(p_aug[y_hat])), False
    return -float(lam), True


def score_sample(model: Model, x, spec, lam: float, rng: RngStream) -> float:
    """Penalty (<= 0) one sample incurs under one augmentation."""
    if not lam >= 0:
        raise ConfigError(f"penalty must be >= 0, got {lam}")
    x = check_image(x)
    x_aug = apply(spec, x, rng, model=model)
    return _penalty(forward(model, x), forward(model, x_aug), lam)[0]


def _images(data) -> np.ndarray:
    images = getattr(data, "images", data)
    if images is None or len(images) == 0:
        raise ValueError("dataset is empty")
    return check_image_batch(images)


def select_samples(n_available: int, sample_count: int, seed: int) -> np.ndarray:
    """Sorted indices of the first ``sample_count`` entries of a seeded shuffle."""
    if n_available < 1:
        raise ValueError("dataset is empty")
    perm = RngStream(seed).permutation(n_available)
    return np.sort(perm[:min(sample_count, n_available)])


def _score_chunk(model, X, indices, active, seed):
    p_orig = forward_batch(model, X[indices])
    out = []
    for entry_index, spec in active:
        augmented = np.stack([
            apply(spec, X[i], RngStream.substream(seed, int(i), entry_index), model=model)
            for i in indices
        ])
        p_aug = forward_batch(model, augmented)
        out.append([_penalty(p_orig[r], p_aug[r], spec.penalty) for r in range(len(indices))])
    return out


def score_model(model: Model, data, config: PenaltyConfig, threads: int | None = None,
                model_id: str = "") -> MetricReport:
    """Accumulate the metric of ``model`` over a seeded subset of ``data``."""
    X = _images(data)
    active = config.active
    if not active:
        raise ConfigError("every entry has lambda == 0; nothing to score")
    indices = select_samples(len(X), config.sample_count, config.seed)
    chunks = [indices[i:i + CHUNK] for i in range(0, len(indices), CHUNK)]
    results = ordered_map(lambda idx: _score_chunk(model, X, idx, active, config.seed), chunks, threads)

    per = {i: AugmentationResult(spec.name, spec.penalty, skipped=True)
           for i, spec in enumerate(config.entries)}
    for a, (entry_index, spec) in enumerate(active):
        res = per[entry_index]
        res.skipped = False
        phi = 0.0
        for chunk in results:
            for value, mismatch in chunk[a]:
                phi += value
                if mismatch:
                    res.mismatches += 1
                else:
                    res.confidence_loss -= value
        res.phi = phi
    per_list = [per[i] for i in range(len(config.entries))]
    phi_total = 0.0
    for res in per_list:
        phi_total += res.phi
    notes = []
    if len(indices) < config.sample_count:
        notes.append(f"sample_count {config.sample_count} exceeds dataset size {len(X)}; "
                     f"scored all {len(indices)} samples")
    for res in per_list:
        if res.skipped:
            notes.append(f"{res.name}: lambda == 0, skipped")
    return MetricReport(phi_total, per_list, len(indices), config.sample_count, config.seed,
                        model_id, notes)


class PenaltyScorer(BaseEstimator):
    """Estimator-style wrapper around :func:`score_model`.

    ``fit`` stores the training images; ``score_model`` returns a full
    :class:`MetricReport` and ``transform`` maps a sequence of models to a
    column of ``phi_total`` values.
    """

    def __init__(self, config="table1_row3", sample_count=None, seed=None, threads=None):
        self.config = config
        self.sample_count = sample_count
        self.seed = seed
        self.threads = threads

    def _resolved_config(self) -> PenaltyConfig:
        cfg = self.config
        if isinstance(cfg, PenaltyConfig):
            cfg = PenaltyConfig(list(cfg.entries), cfg.sample_count, cfg.seed)
        elif isinstance(cfg, dict):
            cfg = PenaltyConfig.from_dict(cfg)
        else:
            cfg = load_penalty_config(cfg)
        if self.sample_count is not None:
            cfg.sample_count = int(self.sample_count)
        if self.seed is not None:
            cfg.seed = int(self.seed)
        return cfg

    def fit(self, X, y=None):
        self.X_ = _images(X)
        self.config_ = self._resolved_config()
        self.selected_indices_ = select_samples(len(self.X_), self.config_.sample_count,
                                                self.config_.seed)
        return self

    def score_model(self, model: Model, model_id: str = "") -> MetricReport:
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "X_")
        return score_model(model, self.X_, self.config_, self.threads, model_id)

    def transform(self, models):
        return np.array([[self.score_model(m).phi_total] for m in models])
