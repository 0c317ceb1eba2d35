"""Stuck-at fault maps for an on-chip weight buffer.

A buffer is ``rows x cols`` byte-wide cells holding one ``bitwidth``-bit
weight each.  Every bit cell is independently faulty with probability
``fault_rate``; a faulty bit is stuck-at-0 or stuck-at-1 with equal
probability.  A cell's defect configuration is a ternary digit per bit
(0 = sound, 1 = stuck-at-0, 2 = stuck-at-1), packed into a single integer
index with digit j as the j-th ternary digit (LSB-first).

Random generation uses Philox, one substream per buffer row
(``SeedSequence(seed, spawn_key=(row,))``), so maps are reproducible and
rows may be regenerated independently.  Per row, the first uniform draw
decides fault presence and the second decides polarity (u < 0.5 -> SA0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numfmt import _check_bitwidth


@dataclass(frozen=True)
class FaultPattern:
    """Defect configuration of a single cell: one ternary digit per bit."""

    digits: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.digits:
            raise ValueError("pattern needs at least one digit")
        if any(d not in (0, 1, 2) for d in self.digits):
            raise ValueError(f"ternary digits must be 0, 1 or 2: {self.digits}")

    @classmethod
    def fault_free(cls, bitwidth: int) -> "FaultPattern":
        return cls(digits=(0,) * bitwidth)

    @classmethod
    def from_index(cls, index: int, bitwidth: int) -> "FaultPattern":
        if not 0 <= index < 3**bitwidth:
            raise ValueError(f"pattern index {index} out of range for {bitwidth} bits")
        digits = []
        for _ in range(bitwidth):
            digits.append(index % 3)
            index //= 3
        return cls(digits=tuple(digits))

    @property
    def bitwidth(self) -> int:
        return len(self.digits)

    @property
    def index(self) -> int:
        return sum(d * 3**j for j, d in enumerate(self.digits))

    @property
    def sa0_mask(self) -> int:
        """Bitmask of stuck-at-0 positions."""
        return sum(1 << j for j, d in enumerate(self.digits) if d == 1)

    @property
    def sa1_mask(self) -> int:
        """Bitmask of stuck-at-1 positions."""
        return sum(1 << j for j, d in enumerate(self.digits) if d == 2)

    @property
    def is_fault_free(self) -> bool:
        return all(d == 0 for d in self.digits)


@dataclass(frozen=True)
class FaultStatistics:
    total_bits: int
    faulty_bits: int
    sa0_bits: int
    sa1_bits: int
    per_bit_counts: np.ndarray = field(repr=False)

    @property
    def empirical_rate(self) -> float:
        return self.faulty_bits / self.total_bits if self.total_bits else 0.0

    @property
    def sa0_fraction(self) -> float:
        """Fraction of faulty bits stuck at 0; NaN if the map is clean."""
        return self.sa0_bits / self.faulty_bits if self.faulty_bits else float("nan")

    @property
    def sa1_fraction(self) -> float:
        return self.sa1_bits / self.faulty_bits if self.faulty_bits else float("nan")


@dataclass(frozen=True)
class FaultMap:
    """Stuck-at planes over a rows x cols x bitwidth weight buffer."""

    rows: int
    cols: int
    bitwidth: int
    sa0: np.ndarray  # bool, (rows, cols, bitwidth)
    sa1: np.ndarray  # bool, (rows, cols, bitwidth)
    seed: int
    fault_rate: float

    def __post_init__(self) -> None:
        shape = (self.rows, self.cols, self.bitwidth)
        if self.sa0.shape != shape or self.sa1.shape != shape:
            raise ValueError(
                f"plane shapes {self.sa0.shape}/{self.sa1.shape} do not match {shape}"
            )
        if bool(np.any(self.sa0 & self.sa1)):
            raise ValueError("a bit cannot be stuck at both polarities")
        self.sa0.setflags(write=False)
        self.sa1.setflags(write=False)

    def pattern_indices(self) -> np.ndarray:
        """Ternary pattern index of every cell, shape (rows, cols), int32."""
        powers = 3 ** np.arange(self.bitwidth, dtype=np.int64)
        digits = self.sa0.astype(np.int64) + 2 * self.sa1.astype(np.int64)
        return (digits @ powers).astype(np.int32)


def generate_fault_map(
    rows: int, cols: int, bitwidth: int, fault_rate: float, seed: int
) -> FaultMap:
    """Draw a random stuck-at map; deterministic for fixed arguments."""
    if rows < 1 or cols < 1:
        raise ValueError("buffer must have at least one row and one column")
    _check_bitwidth(bitwidth)
    if not 0.0 <= fault_rate <= 1.0:
        raise ValueError(f"fault_rate must be in [0, 1], got {fault_rate}")
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")

    sa0 = np.empty((rows, cols, bitwidth), dtype=bool)
    sa1 = np.empty((rows, cols, bitwidth), dtype=bool)
    for row in range(rows):
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(seed, spawn_key=(row,)))
        )
        faulty = rng.random((cols, bitwidth)) < fault_rate
        stuck_low = rng.random((cols, bitwidth)) < 0.5
        sa0[row] = faulty & stuck_low
        sa1[row] = faulty & ~stuck_low
    return FaultMap(
        rows=rows, cols=cols, bitwidth=bitwidth,
        sa0=sa0, sa1=sa1, seed=seed, fault_rate=fault_rate,
    )


def pattern_at(fault_map: FaultMap, row: int, col: int) -> FaultPattern:
    """Fault pattern of one cell; raises IndexError outside the buffer."""
    if not (0 <= row < fault_map.rows and 0 <= col < fault_map.cols):
        raise IndexError(
            f"cell ({row}, {col}) outside {fault_map.rows}x{fault_map.cols} buffer"
        )
    digits = tuple(
        int(fault_map.sa0[row, col, j]) + 2 * int(fault_map.sa1[row, col, j])
        for j in range(fault_map.bitwidth)
    )
    return FaultPattern(digits=digits)


def apply_faults(code: int, pattern: FaultPattern, bitwidth: int) -> int:
    """Value read back from a faulty cell storing ``code``.

    SA0 bits are forced to 0, SA1 bits to 1, and the result is re-decoded
    as two's complement.
    """
    if pattern.bitwidth != bitwidth:
        raise ValueError(
            f"pattern has {pattern.bitwidth} digits, expected {bitwidth}"
        )
    lo, hi = -(1 << (bitwidth - 1)), (1 << (bitwidth - 1)) - 1
    if not lo <= code <= hi:
        raise ValueError(f"code {code} out of range [{lo}, {hi}]")
    mask = (1 << bitwidth) - 1
    bits = code & mask
    bits = (bits & ~pattern.sa0_mask) | pattern.sa1_mask
    if bits & (1 << (bitwidth - 1)):
        return bits - (1 << bitwidth)
    return bits


def apply_faults_array(
    codes: np.ndarray, pattern_indices: np.ndarray, bitwidth: int
) -> np.ndarray:
    """Vectorized :func:`apply_faults` over matching code/index arrays."""
    codes = np.asarray(codes)
    idx = np.asarray(pattern_indices, dtype=np.int64)
    if codes.shape != idx.shape:
        raise ValueError(f"shape mismatch: codes {codes.shape} vs indices {idx.shape}")
    and_mask = np.zeros(idx.shape, dtype=np.int64)
    or_mask = np.zeros(idx.shape, dtype=np.int64)
    for j in range(bitwidth):
        digit = (idx // 3**j) % 3
        and_mask |= np.where(digit == 1, 0, 1 << j)
        or_mask |= np.where(digit == 2, 1 << j, 0)
    unsigned = codes.astype(np.int64) & ((1 << bitwidth) - 1)
    read = (unsigned & and_mask) | or_mask
    read -= (read >= (1 << (bitwidth - 1))) * (1 << bitwidth)
    return read.astype(codes.dtype if codes.dtype.kind == "i" else np.int16)


def fault_statistics(fault_map: FaultMap) -> FaultStatistics:
    """Empirical counts over all bit cells, for validating the random model."""
    sa0_bits = int(fault_map.sa0.sum())
    sa1_bits = int(fault_map.sa1.sum())
    per_bit = (fault_map.sa0 | fault_map.sa1).sum(axis=(0, 1)).astype(np.int64)
    per_bit.setflags(write=False)
    return FaultStatistics(
        total_bits=fault_map.rows * fault_map.cols * fault_map.bitwidth,
        faulty_bits=sa0_bits + sa1_bits,
        sa0_bits=sa0_bits,
        sa1_bits=sa1_bits,
        per_bit_counts=per_bit,
    )
