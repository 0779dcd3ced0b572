"""Model manifest (JSON) plus raw little-endian float32 weight blob."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .layers import LAYER_TYPES, Conv2d, Dense, Dropout, LayerShapeError, MaxPool2d
from .model import Model

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def _layer_shapes(cfg: dict, i: int) -> list[tuple[str, tuple]]:
    kind = cfg["type"]
    if kind == "conv2d":
        kh, kw = cfg["kernel_size"]
        return [("weight", (cfg["out_channels"], cfg["in_channels"], kh, kw)),
                ("bias", (cfg["out_channels"],))]
    if kind == "dense":
        return [("weight", (cfg["out_features"], cfg["in_features"])),
                ("bias", (cfg["out_features"],))]
    return []


def _build_layer(cfg: dict, arrays: dict):
    kind = cfg["type"]
    if kind == "conv2d":
        return Conv2d(arrays["weight"], arrays["bias"], cfg.get("stride", 1), cfg.get("padding", "valid"))
    if kind == "dense":
        return Dense(arrays["weight"], arrays["bias"])
    if kind == "maxpool2d":
        return MaxPool2d(cfg.get("pool_size", 2), cfg.get("stride"))
    if kind == "dropout":
        return Dropout(cfg.get("rate", 0.0))
    return LAYER_TYPES[kind]()


def load_model(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model manifest {path}: {exc}") from None
    required = ("input_shape", "num_classes", "layers", "weights_file")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise ModelFormatError(f"{path}: manifest is missing {missing}")
    if manifest.get("weight_dtype", "f32le") != "f32le":
        raise ModelFormatError(f"{path}: unsupported weight_dtype {manifest['weight_dtype']!r}")
    blob_path = path.parent / manifest["weights_file"]
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read weight blob {blob_path}: {exc}") from None
    if len(blob) % 4:
        raise ModelFormatError(f"{blob_path}: size {len(blob)} is not a multiple of 4 bytes")
    values = np.frombuffer(blob, dtype="<f4")
    offset = 0
    layers = []
    for i, cfg in enumerate(manifest["layers"]):
        if not isinstance(cfg, dict) or cfg.get("type") not in LAYER_TYPES:
            raise ModelFormatError(f"{path}: layer {i} has unknown type {cfg!r}")
        arrays = {}
        try:
            shapes = _layer_shapes(cfg, i)
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: layer {i} ({cfg['type']}) is malformed: {exc}") from None
        for name, shape in shapes:
            n = math.prod(shape)
            if offset + n > values.size:
                raise ModelFormatError(
                    f"{blob_path}: truncated in layer {i} ({cfg['type']}) {name}: "
                    f"need {n} values at offset {offset}, blob has {values.size}")
            arr = values[offset:offset + n].astype(np.float64).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"{blob_path}: non-finite weight in layer {i} ({cfg['type']}) {name}")
            arrays[name] = arr
            offset += n
        try:
            layers.append(_build_layer(cfg, arrays))
        except (LayerShapeError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"{path}: layer {i} ({cfg['type']}): {exc}") from None
    if offset != values.size:
        raise ModelFormatError(
            f"{blob_path}: {values.size - offset} trailing values after the last layer")
    prep = manifest.get("preprocessing", {})
    try:
        return Model(layers, manifest["input_shape"], manifest["num_classes"],
                     prep.get("mean"), prep.get("std"), dict(manifest.get("metadata", {})))
    except (LayerShapeError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"{path}: {exc}") from None


def save_model(model: Model, path) -> Path:
    """Write ``path`` (manifest) and its sibling ``.bin`` weight blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    chunks = []
    for layer in model.layers:
        for arr in layer.params().values():
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").ravel())
    data = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ModelFormatError("weights overflow float32")
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "preprocessing": {"mean": model.mean.tolist(), "std": model.std.tolist()},
        "layers": [layer.config() for layer in model.layers],
        "weights_file": blob_path.name,
        "weight_dtype": "f32le",
        "metadata": model.metadata,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(data.tobytes())
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def round_to_f32(model: Model) -> Model:
    """Copy of ``model`` whose weights are exactly representable in the blob."""
    layers = [layer.with_params(**{k: v.astype(np.float32).astype(np.float64)
                                   for k, v in layer.params().items()})
              for layer in model.layers]
    return model.with_layers(layers)
