"""Weight-to-buffer mapping under the weight-stationary dataflow.

Each layer's weight tensor is viewed as a logical matrix with one filter
or neuron per column: conv weights flatten channel-major (channel, kernel
row, kernel column) into rows, FC weights put input features on rows.
The logical matrix is loaded block by block into the same physical buffer,
so logical cell (r, c) shares the fault pattern of physical cell
(r mod buffer_rows, c mod buffer_cols).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .faultmodel import FaultMap
from .model import QuantizedModel


@dataclass(frozen=True)
class DataflowConfig:
    buffer_rows: int = 256
    buffer_cols: int = 256
    bitwidth: int = 8
    pfll: bool = False  # protect first and last weighted layer

    def __post_init__(self) -> None:
        if self.buffer_rows < 1 or self.buffer_cols < 1:
            raise ValueError("buffer dimensions must be at least 1x1")


@dataclass(frozen=True)
class ErrorMask:
    """Per-weight fault-pattern indices, aligned with the model's layers.

    ``patterns[i]`` is ``None`` for parameter-free layers, otherwise an
    int32 array shaped like layer i's weight tensor.
    """

    patterns: tuple[np.ndarray | None, ...]
    bitwidth: int
    config: DataflowConfig
    fault_rate: float
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        limit = 3**self.bitwidth
        for i, arr in enumerate(self.patterns):
            if arr is None:
                continue
            if arr.min() < 0 or arr.max() >= limit:
                raise ValueError(f"layer {i} mask has indices outside [0, {limit})")
            arr.setflags(write=False)

    @property
    def weight_count(self) -> int:
        return sum(a.size for a in self.patterns if a is not None)


def layer_to_matrix(weights: np.ndarray, kind: str) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Logical matrix dimensions plus per-element (row, col) coordinates.

    Returns ``(n_rows, n_cols, row_idx, col_idx)`` where the index arrays
    are shaped like ``weights``; the map is invertible by construction.
    """
    if kind == "conv2d":
        if weights.ndim != 4:
            raise ValueError(f"conv2d weights must be 4-D, got {weights.ndim}-D")
        k, c, r, s = weights.shape
        ki, ci, ri, si = np.indices((k, c, r, s), sparse=False)
        row_idx = ci * (r * s) + ri * s + si
        col_idx = ki
        return c * r * s, k, row_idx, col_idx
    if kind == "fc":
        if weights.ndim != 2:
            raise ValueError(f"fc weights must be 2-D, got {weights.ndim}-D")
        out_features, in_features = weights.shape
        oi, ii = np.indices((out_features, in_features))
        return in_features, out_features, ii, oi
    raise ValueError(f"unsupported layer kind for mapping: {kind!r}")


def map_to_memory(r: int, c: int, config: DataflowConfig) -> tuple[int, int]:
    """Physical buffer cell backing logical matrix cell (r, c)."""
    if r < 0 or c < 0:
        raise ValueError("logical coordinates must be non-negative")
    return r % config.buffer_rows, c % config.buffer_cols


def build_error_mask(
    model: QuantizedModel, fault_map: FaultMap, config: DataflowConfig
) -> ErrorMask:
    """Assign every model weight the fault pattern of its buffer cell.

    With ``config.pfll`` the first and last weighted layers are forced
    fault-free (pattern index 0).
    """
    if fault_map.bitwidth != model.bitwidth:
        raise ConfigError(
            f"fault map is {fault_map.bitwidth}-bit but model is {model.bitwidth}-bit"
        )
    if (fault_map.rows, fault_map.cols) != (config.buffer_rows, config.buffer_cols):
        raise ConfigError(
            f"fault map {fault_map.rows}x{fault_map.cols} does not match "
            f"configured buffer {config.buffer_rows}x{config.buffer_cols}"
        )
    cell_patterns = fault_map.pattern_indices()
    weighted = model.weighted_indices()
    protected = {weighted[0], weighted[-1]} if (config.pfll and weighted) else set()

    patterns: list[np.ndarray | None] = []
    for i, layer in enumerate(model.layers):
        if not layer.is_weighted:
            patterns.append(None)
            continue
        if i in protected:
            patterns.append(np.zeros(layer.codes.shape, dtype=np.int32))
            continue
        _, _, row_idx, col_idx = layer_to_matrix(layer.codes, layer.kind)
        patterns.append(
            cell_patterns[row_idx % config.buffer_rows, col_idx % config.buffer_cols]
        )
    return ErrorMask(
        patterns=tuple(patterns),
        bitwidth=model.bitwidth,
        config=config,
        fault_rate=fault_map.fault_rate,
        seed=fault_map.seed,
    )


def iter_mapping_trace(
    model: QuantizedModel, config: DataflowConfig, max_lines_per_layer: int | None = None
) -> Iterator[str]:
    """Audit dump: one line per weight, coordinate -> logical cell -> buffer cell."""
    for i, layer in enumerate(model.layers):
        if not layer.is_weighted:
            continue
        _, _, row_idx, col_idx = layer_to_matrix(layer.codes, layer.kind)
        flat_r = row_idx.ravel()
        flat_c = col_idx.ravel()
        coords = np.stack(
            np.unravel_index(np.arange(layer.codes.size), layer.codes.shape), axis=1
        )
        count = layer.codes.size
        if max_lines_per_layer is not None:
            count = min(count, max_lines_per_layer)
        for n in range(count):
            r, c = int(flat_r[n]), int(flat_c[n])
            cell = map_to_memory(r, c, config)
            coord = ",".join(str(int(x)) for x in coords[n])
            yield (
                f"layer={i} kind={layer.kind} weight=({coord}) "
                f"logical=({r},{c}) cell=({cell[0]},{cell[1]})"
            )
