"""Minimal inference engine with reverse-mode gradients."""
from .io import ModelFormatError, load_model, round_to_f32, save_model
from .layers import (Conv2d, Dense, Dropout, Flatten, GlobalAvgPool, Layer, LayerShapeError,
                     MaxPool2d, Relu, Softmax)
from .model import (Model, NumericalError, forward, forward_batch, input_gradient,
                    logits_batch, loss_and_gradients, preprocess, softmax, weight_gradients)

__all__ = [
    "Conv2d", "Dense", "Dropout", "Flatten", "GlobalAvgPool", "Layer", "LayerShapeError",
    "MaxPool2d", "Model", "ModelFormatError", "NumericalError", "Relu", "Softmax", "forward",
    "forward_batch", "input_gradient", "load_model", "logits_batch", "loss_and_gradients",
    "preprocess", "round_to_f32", "save_model", "softmax", "weight_gradients",
]
