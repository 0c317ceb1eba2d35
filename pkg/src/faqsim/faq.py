"""Fault-aware model conversion and fault injection.

``faq_convert`` projects every weight code onto the nearest value its
assigned buffer cell can reproduce, so a converted model reads back from
the faulty buffer unchanged.  ``inject`` simulates the unmitigated faulty
read.  Both are out-of-place; scales, biases and topology never change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .faultmodel import apply_faults_array
from .lut import LookupTable
from .mapper import ErrorMask
from .model import QuantizedModel


def _check_mask(model: QuantizedModel, mask: ErrorMask) -> None:
    if mask.bitwidth != model.bitwidth:
        raise ConfigError(
            f"mask is {mask.bitwidth}-bit but model is {model.bitwidth}-bit"
        )
    if len(mask.patterns) != len(model.layers):
        raise ConfigError(
            f"mask covers {len(mask.patterns)} layers, model has {len(model.layers)}"
        )
    for i, (layer, patterns) in enumerate(zip(model.layers, mask.patterns)):
        if layer.is_weighted != (patterns is not None):
            raise ConfigError(f"mask/model weighted-layer mismatch at layer {i}")
        if patterns is not None and patterns.shape != layer.codes.shape:
            raise ConfigError(
                f"layer {i}: mask shape {patterns.shape} != weights {layer.codes.shape}"
            )


def faq_convert(
    model: QuantizedModel, mask: ErrorMask, lut: LookupTable
) -> QuantizedModel:
    """Replace each weight with its nearest reproducible value."""
    _check_mask(model, mask)
    if lut.bitwidth != model.bitwidth:
        raise ConfigError(
            f"lookup table is {lut.bitwidth}-bit but model is {model.bitwidth}-bit"
        )
    half = 1 << (model.bitwidth - 1)
    layers = []
    for layer, patterns in zip(model.layers, mask.patterns):
        if patterns is None:
            layers.append(layer)
            continue
        codes = lut.entries[patterns, layer.codes.astype(np.int64) + half]
        layers.append(layer.with_codes(codes))
    return model.with_layers(tuple(layers))


def inject(model: QuantizedModel, mask: ErrorMask) -> QuantizedModel:
    """Model as actually read through the faulty buffer (no mitigation)."""
    _check_mask(model, mask)
    layers = []
    for layer, patterns in zip(model.layers, mask.patterns):
        if patterns is None:
            layers.append(layer)
            continue
        read = apply_faults_array(layer.codes, patterns, model.bitwidth)
        layers.append(layer.with_codes(read))
    return model.with_layers(tuple(layers))


@dataclass(frozen=True)
class WeightErrorMetrics:
    per_layer_mse: tuple[float, ...]
    per_layer_max_abs: tuple[float, ...]
    mse: float
    max_abs: float


def weight_error_metrics(
    reference: QuantizedModel, other: QuantizedModel
) -> WeightErrorMetrics:
    """Weight deviation of ``other`` from ``reference`` in dequantized units."""
    if len(reference.layers) != len(other.layers):
        raise ConfigError("models have different layer counts")
    per_mse: list[float] = []
    per_max: list[float] = []
    total_sq = 0.0
    total_n = 0
    global_max = 0.0
    for i, (ref, oth) in enumerate(zip(reference.layers, other.layers)):
        if ref.is_weighted != oth.is_weighted:
            raise ConfigError(f"layer {i} kinds differ")
        if not ref.is_weighted:
            continue
        if ref.codes.shape != oth.codes.shape:
            raise ConfigError(f"layer {i} weight shapes differ")
        if ref.scale.scale != oth.scale.scale:
            raise ConfigError(f"layer {i} scales differ")
        delta = (
            oth.codes.astype(np.float64) - ref.codes.astype(np.float64)
        ) * ref.scale.scale
        sq = float(np.sum(delta * delta))
        per_mse.append(sq / delta.size)
        per_max.append(float(np.max(np.abs(delta))) if delta.size else 0.0)
        total_sq += sq
        total_n += delta.size
        global_max = max(global_max, per_max[-1])
    if total_n == 0:
        raise ConfigError("models contain no weighted layers")
    return WeightErrorMetrics(
        per_layer_mse=tuple(per_mse),
        per_layer_max_abs=tuple(per_max),
        mse=total_sq / total_n,
        max_abs=global_max,
    )
