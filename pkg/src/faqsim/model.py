"""Quantized feed-forward model container.

A model is an ordered list of layers.  Weighted layers (``conv2d``, ``fc``)
carry a signed integer code tensor, a per-tensor scale, an optional real
bias, and an activation tag applied after the affine op.  ``relu``,
``maxpool2x2`` and ``flatten`` layers are parameter-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numfmt import QuantSpec, ScaleFactor

WEIGHTED_KINDS = ("conv2d", "fc")
PARAM_FREE_KINDS = ("relu", "maxpool2x2", "flatten")
ACTIVATIONS = ("linear", "relu")


@dataclass(frozen=True)
class QuantizedLayer:
    kind: str
    codes: np.ndarray | None = None  # int16, (K,C,R,S) for conv2d, (out,in) for fc
    scale: ScaleFactor | None = None
    bias: np.ndarray | None = None  # float64, per output channel/unit
    activation: str = "linear"
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kind not in WEIGHTED_KINDS + PARAM_FREE_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.is_weighted:
            if self.codes is None or self.scale is None:
                raise ValueError(f"{self.kind} layer needs codes and a scale")
            expected_ndim = 4 if self.kind == "conv2d" else 2
            if self.codes.ndim != expected_ndim:
                raise ValueError(
                    f"{self.kind} weights must be {expected_ndim}-D, got {self.codes.ndim}-D"
                )
            self.codes.setflags(write=False)
            if self.bias is not None:
                self.bias.setflags(write=False)
        elif self.codes is not None or self.bias is not None:
            raise ValueError(f"{self.kind} layer cannot carry parameters")

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    def with_codes(self, codes: np.ndarray) -> "QuantizedLayer":
        if self.codes is None or codes.shape != self.codes.shape:
            raise ValueError("replacement codes must match the original shape")
        return replace(self, codes=np.ascontiguousarray(codes, dtype=np.int16))


@dataclass(frozen=True)
class QuantizedModel:
    layers: tuple[QuantizedLayer, ...]
    spec: QuantSpec = field(default_factory=QuantSpec)
    activation_scales: dict[str, ScaleFactor] | None = None

    def __post_init__(self) -> None:
        for i, layer in enumerate(self.layers):
            if layer.is_weighted:
                lo, hi = self.spec.min_code, self.spec.max_code
                if layer.codes.min() < lo or layer.codes.max() > hi:
                    raise ValueError(
                        f"layer {i} has codes outside [{lo}, {hi}]"
                    )

    @property
    def bitwidth(self) -> int:
        return self.spec.bitwidth

    def weighted_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.is_weighted]

    @property
    def weight_count(self) -> int:
        return sum(l.codes.size for l in self.layers if l.is_weighted)

    def with_layers(self, layers: tuple[QuantizedLayer, ...]) -> "QuantizedModel":
        return replace(self, layers=layers)

    def with_activation_scales(
        self, scales: dict[str, ScaleFactor]
    ) -> "QuantizedModel":
        return replace(self, activation_scales=dict(scales))


def models_equal(a: QuantizedModel, b: QuantizedModel) -> bool:
    """Bit-exact structural equality, used by round-trip and determinism tests."""
    if a.spec != b.spec or len(a.layers) != len(b.layers):
        return False
    if (a.activation_scales or {}) != (b.activation_scales or {}):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.kind, la.activation, la.stride, la.padding) != (
            lb.kind, lb.activation, lb.stride, lb.padding,
        ):
            return False
        for va, vb in ((la.codes, lb.codes), (la.bias, lb.bias)):
            if (va is None) != (vb is None):
                return False
            if va is not None and not np.array_equal(va, vb):
                return False
        if (la.scale is None) != (lb.scale is None):
            return False
        if la.scale is not None and (
            la.scale.scale != lb.scale.scale or la.scale.tensor_id != lb.scale.tensor_id
        ):
            return False
    return True
