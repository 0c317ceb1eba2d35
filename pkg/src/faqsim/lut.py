"""Nearest-reproducible-value lookup table.

A cell with stuck-at faults can only reproduce the values that are fixed
points of its bit masking.  For every possible fault pattern the table
stores, for every representable value, the nearest value the cell can
reproduce; ties go to the smaller value (first argmin over the ascending
unique reachable values).

Table layout: dense ``3^b x 2^b`` int16, row = pattern index, column =
``value + 2^(b-1)``.  Row 0 (fault-free) is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError
from .faultmodel import FaultPattern, apply_faults
from .numfmt import QuantSpec

#: Largest bitwidth for which a dense table is built (3^12 * 2^12 entries).
MAX_LUT_BITWIDTH = 12


@dataclass(frozen=True)
class LookupTable:
    bitwidth: int
    entries: np.ndarray  # int16, (3^bitwidth, 2^bitwidth)

    def __post_init__(self) -> None:
        expected = (3**self.bitwidth, 1 << self.bitwidth)
        if self.entries.shape != expected:
            raise ValueError(f"entry table {self.entries.shape} != expected {expected}")
        if self.entries.dtype != np.int16:
            raise ValueError(f"entries must be int16, got {self.entries.dtype}")
        self.entries.setflags(write=False)

    @property
    def n_patterns(self) -> int:
        return 3**self.bitwidth

    @property
    def n_values(self) -> int:
        return 1 << self.bitwidth

    def identity_row_ok(self) -> bool:
        half = 1 << (self.bitwidth - 1)
        return bool(
            np.array_equal(self.entries[0], np.arange(-half, half, dtype=np.int16))
        )


def reachable_set(pattern: FaultPattern, bitwidth: int) -> list[int]:
    """Ascending list of values the faulty cell reproduces exactly.

    These are the fixed points of :func:`faultmodel.apply_faults`.
    """
    half = 1 << (bitwidth - 1)
    return [
        v for v in range(-half, half) if apply_faults(v, pattern, bitwidth) == v
    ]


def _pattern_bit_masks(n_patterns: int, bitwidth: int) -> tuple[np.ndarray, np.ndarray]:
    """AND/OR masks implementing every pattern's stuck bits, shape (n_patterns,)."""
    idx = np.arange(n_patterns, dtype=np.int64)
    and_mask = np.zeros(n_patterns, dtype=np.int64)
    or_mask = np.zeros(n_patterns, dtype=np.int64)
    for j in range(bitwidth):
        digit = (idx // 3**j) % 3
        and_mask |= np.where(digit == 1, 0, 1 << j)
        or_mask |= np.where(digit == 2, 1 << j, 0)
    return and_mask, or_mask


def build_lut(spec: QuantSpec) -> LookupTable:
    """Generate the full nearest-reproducible-value table for ``spec``.

    Per pattern: mask the whole code range, take the ascending unique
    read-back values, and map every value to the closest one (tie to the
    smaller).  Pure per-row computation, sequential over patterns.
    """
    b = spec.bitwidth
    if b > MAX_LUT_BITWIDTH:
        raise CapacityError(
            f"lookup table for bitwidth {b} would need {3**b * 2**b:,} entries; "
            f"the supported maximum is {MAX_LUT_BITWIDTH} bits"
        )
    n_patterns = 3**b
    n_values = 1 << b
    half = 1 << (b - 1)

    values = np.arange(-half, half, dtype=np.int64)
    codes_u = values & (n_values - 1)
    and_masks, or_masks = _pattern_bit_masks(n_patterns, b)

    entries = np.empty((n_patterns, n_values), dtype=np.int16)
    for i in range(n_patterns):
        read_u = (codes_u & and_masks[i]) | or_masks[i]
        read = read_u - (read_u >= half) * n_values
        uniq = np.unique(read)  # ascending
        pos = np.searchsorted(uniq, values)
        left = np.clip(pos - 1, 0, len(uniq) - 1)
        right = np.clip(pos, 0, len(uniq) - 1)
        take_left = np.abs(values - uniq[left]) <= np.abs(uniq[right] - values)
        entries[i] = np.where(take_left, uniq[left], uniq[right])
    return LookupTable(bitwidth=b, entries=entries)


def nearest_valid(lut: LookupTable, pattern_index: int, value: int) -> int:
    """Constant-time table read: nearest reproducible value for the pattern."""
    if not 0 <= pattern_index < lut.n_patterns:
        raise IndexError(f"pattern index {pattern_index} out of range")
    half = 1 << (lut.bitwidth - 1)
    if not -half <= value < half:
        raise IndexError(f"value {value} out of range for {lut.bitwidth} bits")
    return int(lut.entries[pattern_index, value + half])


@lru_cache(maxsize=None)
def _oracle_reachable(pattern_index: int, bitwidth: int) -> tuple[int, ...]:
    pattern = FaultPattern.from_index(pattern_index, bitwidth)
    half = 1 << (bitwidth - 1)
    seen = set()
    for code in range(-half, half):
        seen.add(apply_faults(code, pattern, bitwidth))
    return tuple(sorted(seen))


def oracle_nearest(pattern: FaultPattern, value: int, bitwidth: int) -> int:
    """Brute-force reference for :func:`nearest_valid`.

    Enumerates every code through the scalar fault model and scans the
    ascending read-back values with a strict-improvement linear search,
    which breaks ties toward the smaller value.  Shares no code with
    :func:`build_lut`.
    """
    best = None
    for candidate in _oracle_reachable(pattern.index, bitwidth):
        if best is None or abs(value - candidate) < abs(value - best):
            best = candidate
    assert best is not None
    return best
