"""Two's-complement fixed-point encoding and symmetric per-tensor quantization.

Weights are stored as signed integer codes in ``[-2^(b-1), 2^(b-1)-1]``.
A single positive per-tensor scale (real units per integer step) maps codes
back to real values, so code 0 is exactly 0.0 and the fault analysis can
work purely in integer code space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_BITWIDTH = 2
MAX_BITWIDTH = 16

#: Rounding mode used by :func:`quantize`: round to nearest, ties to even.
ROUND_NEAREST_EVEN = "nearest-even"


def _check_bitwidth(bitwidth: int) -> None:
    if not MIN_BITWIDTH <= bitwidth <= MAX_BITWIDTH:
        raise ValueError(
            f"bitwidth must be in [{MIN_BITWIDTH}, {MAX_BITWIDTH}], got {bitwidth}"
        )


@dataclass(frozen=True)
class QuantSpec:
    """Signed fixed-point format: ``bitwidth`` bits, two's complement."""

    bitwidth: int = 8
    rounding: str = ROUND_NEAREST_EVEN

    def __post_init__(self) -> None:
        _check_bitwidth(self.bitwidth)
        if self.rounding != ROUND_NEAREST_EVEN:
            raise ValueError(f"unsupported rounding mode: {self.rounding!r}")

    @property
    def min_code(self) -> int:
        return -(1 << (self.bitwidth - 1))

    @property
    def max_code(self) -> int:
        return (1 << (self.bitwidth - 1)) - 1

    @property
    def levels(self) -> int:
        return 1 << self.bitwidth


@dataclass(frozen=True)
class ScaleFactor:
    """Per-tensor quantization step in real units per integer code."""

    scale: float
    tensor_id: str = ""

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


def encode_twos_complement(value: int, bitwidth: int) -> int:
    """Return the unsigned bit pattern of ``value``, bit 0 least significant."""
    _check_bitwidth(bitwidth)
    lo, hi = -(1 << (bitwidth - 1)), (1 << (bitwidth - 1)) - 1
    if not lo <= value <= hi:
        raise ValueError(f"value {value} out of range [{lo}, {hi}] for {bitwidth} bits")
    return value & ((1 << bitwidth) - 1)


def decode_twos_complement(bits: int, bitwidth: int) -> int:
    """Inverse of :func:`encode_twos_complement`."""
    _check_bitwidth(bitwidth)
    if not 0 <= bits < (1 << bitwidth):
        raise ValueError(f"bit pattern {bits:#x} does not fit in {bitwidth} bits")
    if bits & (1 << (bitwidth - 1)):
        return bits - (1 << bitwidth)
    return bits


def compute_scale(tensor: np.ndarray, spec: QuantSpec, tensor_id: str = "") -> ScaleFactor:
    """Symmetric max-abs scale: ``max(|tensor|) / (2^(b-1) - 1)``.

    An all-zero tensor gets scale 1.0; its codes are all zero regardless.
    """
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot compute a scale for an empty tensor")
    max_abs = float(np.max(np.abs(arr)))
    scale = max_abs / spec.max_code if max_abs > 0.0 else 1.0
    return ScaleFactor(scale=scale, tensor_id=tensor_id)


def quantize(tensor: np.ndarray, scale: ScaleFactor, spec: QuantSpec) -> np.ndarray:
    """Map real values to signed codes: saturating round-half-to-even of x/scale."""
    arr = np.asarray(tensor, dtype=np.float64)
    codes = np.rint(arr / scale.scale)  # np.rint rounds halves to even
    codes = np.clip(codes, spec.min_code, spec.max_code)
    return codes.astype(np.int16)


def dequantize(codes: np.ndarray, scale: ScaleFactor) -> np.ndarray:
    """Map signed codes back to real values: ``code * scale``."""
    return np.asarray(codes, dtype=np.float64) * scale.scale
