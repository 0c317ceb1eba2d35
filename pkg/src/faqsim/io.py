"""Bit-exact file formats and dataset ingestion.

All faqsim formats share an 8-byte header: 4 ASCII magic bytes, version
u16, bitwidth u16, followed by format-specific u32 dimensions.  Every
multi-byte field is little-endian; bit planes are packed LSB-first within
bytes.  The exact layouts are documented in docs/formats.md.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .faultmodel import FaultMap
from .lut import LookupTable
from .mapper import DataflowConfig, ErrorMask
from .model import QuantizedLayer, QuantizedModel
from .numfmt import QuantSpec, ScaleFactor

MAGIC_FAULT_MAP = b"FQFM"
MAGIC_LUT = b"FQLT"
MAGIC_MODEL = b"FQMD"
MAGIC_MASK = b"FQEM"
FORMAT_VERSION = 1


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_header(f, expected_magic: bytes) -> int:
    magic, version, bitwidth = struct.unpack("<4sHH", _read_exact(f, 8, "header"))
    if magic != expected_magic:
        raise FormatError(
            f"bad magic {magic!r}, expected {expected_magic.decode()} file"
        )
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    return bitwidth


def _pack_plane(plane: np.ndarray) -> bytes:
    return np.packbits(plane.ravel(), bitorder="little").tobytes()


def _unpack_plane(data: bytes, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count,
                         bitorder="little")
    return bits.astype(bool).reshape(shape)


# ---------------------------------------------------------------------------
# fault map
# ---------------------------------------------------------------------------


def save_fault_map(path, fault_map: FaultMap) -> None:
    plane_shape = (fault_map.rows, fault_map.cols, fault_map.bitwidth)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHII", MAGIC_FAULT_MAP, FORMAT_VERSION,
                            fault_map.bitwidth, fault_map.rows, fault_map.cols))
        f.write(struct.pack("<dQ", fault_map.fault_rate, fault_map.seed))
        assert fault_map.sa0.shape == plane_shape
        f.write(_pack_plane(fault_map.sa0))
        f.write(_pack_plane(fault_map.sa1))


def load_fault_map(path) -> FaultMap:
    with open(path, "rb") as f:
        bitwidth = _read_header(f, MAGIC_FAULT_MAP)
        rows, cols = struct.unpack("<II", _read_exact(f, 8, "buffer dimensions"))
        fault_rate, seed = struct.unpack("<dQ", _read_exact(f, 16, "rate and seed"))
        n_bits = rows * cols * bitwidth
        n_bytes = (n_bits + 7) // 8
        shape = (rows, cols, bitwidth)
        sa0 = _unpack_plane(_read_exact(f, n_bytes, "stuck-at-0 plane"), shape)
        sa1 = _unpack_plane(_read_exact(f, n_bytes, "stuck-at-1 plane"), shape)
        if f.read(1):
            raise FormatError("trailing bytes after fault-map payload")
    if np.any(sa0 & sa1):
        raise FormatError("file declares a bit stuck at both polarities")
    try:
        return FaultMap(rows=rows, cols=cols, bitwidth=bitwidth, sa0=sa0, sa1=sa1,
                        seed=seed, fault_rate=fault_rate)
    except ValueError as exc:
        raise FormatError(f"invalid fault map content: {exc}") from exc


def fault_maps_equal(a: FaultMap, b: FaultMap) -> bool:
    return (
        (a.rows, a.cols, a.bitwidth, a.seed, a.fault_rate)
        == (b.rows, b.cols, b.bitwidth, b.seed, b.fault_rate)
        and np.array_equal(a.sa0, b.sa0)
        and np.array_equal(a.sa1, b.sa1)
    )


# ---------------------------------------------------------------------------
# lookup table
# ---------------------------------------------------------------------------


def save_lut(path, lut: LookupTable) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHII", MAGIC_LUT, FORMAT_VERSION, lut.bitwidth,
                            lut.n_patterns, lut.n_values))
        f.write(np.ascontiguousarray(lut.entries, dtype="<i2").tobytes())


def load_lut(path) -> LookupTable:
    with open(path, "rb") as f:
        bitwidth = _read_header(f, MAGIC_LUT)
        n_patterns, n_values = struct.unpack("<II", _read_exact(f, 8, "table dims"))
        if n_patterns != 3**bitwidth or n_values != (1 << bitwidth):
            raise FormatError(
                f"table dims {n_patterns}x{n_values} inconsistent with "
                f"bitwidth {bitwidth}"
            )
        raw = _read_exact(f, n_patterns * n_values * 2, "table entries")
        if f.read(1):
            raise FormatError("trailing bytes after table payload")
    entries = np.frombuffer(raw, dtype="<i2").astype(np.int16).reshape(
        n_patterns, n_values
    )
    half = 1 << (bitwidth - 1)
    if entries.min() < -half or entries.max() >= half:
        raise FormatError("table entries outside the representable range")
    table = LookupTable(bitwidth=bitwidth, entries=entries)
    if not table.identity_row_ok():
        raise FormatError("fault-free row of the table is not the identity")
    return table


# ---------------------------------------------------------------------------
# quantized model
# ---------------------------------------------------------------------------


def _code_dtype(bitwidth: int) -> str:
    return "<i1" if bitwidth <= 8 else "<i2"


def _check_scale(value: float, where: str) -> None:
    if not np.isfinite(value) or value <= 0.0:
        raise FormatError(f"{where}: scale must be positive and finite, got {value}")


def save_model(path, model: QuantizedModel) -> None:
    manifest_layers = []
    blob = bytearray()
    dtype = _code_dtype(model.bitwidth)
    for layer in model.layers:
        if not layer.is_weighted:
            manifest_layers.append({"kind": layer.kind})
            continue
        _check_scale(layer.scale.scale, f"layer {layer.scale.tensor_id or '?'}")
        manifest_layers.append({
            "kind": layer.kind,
            "activation": layer.activation,
            "stride": layer.stride,
            "padding": layer.padding,
            "weight_shape": list(layer.codes.shape),
            "scale": layer.scale.scale,
            "scale_id": layer.scale.tensor_id,
            "has_bias": layer.bias is not None,
        })
        blob += np.ascontiguousarray(layer.codes, dtype=dtype).tobytes()
        if layer.bias is not None:
            blob += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
    manifest: dict = {"layers": manifest_layers}
    if model.activation_scales:
        manifest["activation_scales"] = {
            key: {"scale": sf.scale, "tensor_id": sf.tensor_id}
            for key, sf in model.activation_scales.items()
        }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHII", MAGIC_MODEL, FORMAT_VERSION,
                            model.bitwidth, len(manifest_bytes), len(blob)))
        f.write(manifest_bytes)
        f.write(blob)


def load_model(path) -> QuantizedModel:
    with open(path, "rb") as f:
        bitwidth = _read_header(f, MAGIC_MODEL)
        manifest_len, blob_len = struct.unpack(
            "<II", _read_exact(f, 8, "section lengths"))
        try:
            manifest = json.loads(_read_exact(f, manifest_len, "manifest"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        blob = _read_exact(f, blob_len, "weight blob")
        if f.read(1):
            raise FormatError("trailing bytes after model payload")

    dtype = np.dtype(_code_dtype(bitwidth))
    spec = QuantSpec(bitwidth=bitwidth)
    offset = 0
    layers = []
    for i, entry in enumerate(manifest.get("layers", [])):
        kind = entry.get("kind")
        if kind in ("relu", "maxpool2x2", "flatten"):
            layers.append(QuantizedLayer(kind=kind))
            continue
        if kind not in ("conv2d", "fc"):
            raise FormatError(f"layer {i}: unknown kind {kind!r}")
        shape = tuple(int(d) for d in entry["weight_shape"])
        count = int(np.prod(shape))
        size = count * dtype.itemsize
        if offset + size > len(blob):
            raise FormatError(f"layer {i}: weight blob shorter than manifest claims")
        codes = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        codes = codes.astype(np.int16).reshape(shape)
        offset += size
        bias = None
        if entry.get("has_bias"):
            bias_size = shape[0] * 8
            if offset + bias_size > len(blob):
                raise FormatError(f"layer {i}: bias missing from blob")
            bias = np.frombuffer(blob, dtype="<f8", count=shape[0], offset=offset)
            bias = bias.astype(np.float64)
            offset += bias_size
        scale_value = entry.get("scale")
        if not isinstance(scale_value, float):
            raise FormatError(f"layer {i}: missing or non-numeric scale")
        _check_scale(scale_value, f"layer {i}")
        try:
            layers.append(QuantizedLayer(
                kind=kind, codes=codes,
                scale=ScaleFactor(scale_value, entry.get("scale_id", "")),
                bias=bias, activation=entry.get("activation", "linear"),
                stride=int(entry.get("stride", 1)),
                padding=int(entry.get("padding", 0)),
            ))
        except ValueError as exc:
            raise FormatError(f"layer {i}: {exc}") from exc
    if offset != len(blob):
        raise FormatError(
            f"weight blob has {len(blob) - offset} bytes the manifest does not describe"
        )
    activation_scales = None
    if "activation_scales" in manifest:
        activation_scales = {}
        for key, entry in manifest["activation_scales"].items():
            _check_scale(entry["scale"], f"activation scale {key}")
            activation_scales[key] = ScaleFactor(entry["scale"], entry["tensor_id"])
    try:
        return QuantizedModel(layers=tuple(layers), spec=spec,
                              activation_scales=activation_scales)
    except ValueError as exc:
        raise FormatError(f"invalid model content: {exc}") from exc


# ---------------------------------------------------------------------------
# error mask
# ---------------------------------------------------------------------------


def save_error_mask(path, mask: ErrorMask) -> None:
    cfg = mask.config
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHHIIII", MAGIC_MASK, FORMAT_VERSION, mask.bitwidth,
                            len(mask.patterns), cfg.buffer_rows, cfg.buffer_cols,
                            int(cfg.pfll)))
        f.write(struct.pack("<dQ", mask.fault_rate, mask.seed))
        for arr in mask.patterns:
            if arr is None:
                f.write(struct.pack("<I", 0))
                continue
            f.write(struct.pack("<II", 1, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<u4").tobytes())


def load_error_mask(path) -> ErrorMask:
    with open(path, "rb") as f:
        bitwidth = _read_header(f, MAGIC_MASK)
        n_layers, rows, cols, pfll = struct.unpack(
            "<IIII", _read_exact(f, 16, "mask dimensions"))
        fault_rate, seed = struct.unpack("<dQ", _read_exact(f, 16, "rate and seed"))
        limit = 3**bitwidth
        patterns: list[np.ndarray | None] = []
        for i in range(n_layers):
            (flag,) = struct.unpack("<I", _read_exact(f, 4, f"layer {i} flag"))
            if flag == 0:
                patterns.append(None)
                continue
            if flag != 1:
                raise FormatError(f"layer {i}: invalid presence flag {flag}")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, f"layer {i} rank"))
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(f, 4 * ndim, f"layer {i} shape"))
            count = int(np.prod(shape))
            raw = _read_exact(f, 4 * count, f"layer {i} pattern indices")
            arr = np.frombuffer(raw, dtype="<u4").astype(np.int32).reshape(shape)
            if count and (arr.min() < 0 or arr.max() >= limit):
                raise FormatError(f"layer {i}: pattern index outside [0, {limit})")
            patterns.append(arr)
        if f.read(1):
            raise FormatError("trailing bytes after mask payload")
    try:
        config = DataflowConfig(buffer_rows=rows, buffer_cols=cols,
                                bitwidth=bitwidth, pfll=bool(pfll))
        return ErrorMask(patterns=tuple(patterns), bitwidth=bitwidth, config=config,
                         fault_rate=fault_rate, seed=seed)
    except ValueError as exc:
        raise FormatError(f"invalid error mask content: {exc}") from exc


def error_masks_equal(a: ErrorMask, b: ErrorMask) -> bool:
    if (a.bitwidth, a.config, a.fault_rate, a.seed) != (
        b.bitwidth, b.config, b.fault_rate, b.seed
    ):
        return False
    if len(a.patterns) != len(b.patterns):
        return False
    for pa, pb in zip(a.patterns, b.patterns):
        if (pa is None) != (pb is None):
            return False
        if pa is not None and not np.array_equal(pa, pb):
            return False
    return True


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Labeled batch container: images (N, ...) float64, labels (N,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} samples but {len(self.labels)} labels"
            )
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def split_at(self, index: int) -> tuple["Dataset", "Dataset"]:
        return (
            Dataset(self.images[:index].copy(), self.labels[:index].copy()),
            Dataset(self.images[index:].copy(), self.labels[index:].copy()),
        )


def synthesize_gaussian_clusters(
    seed: int, classes: int = 10, samples_per_class: int = 100,
    shape: tuple[int, ...] = (64,), mean_scale: float = 1.0, noise: float = 0.3,
) -> Dataset:
    """Reproducible Gaussian-cluster classification data.

    Class means are drawn once from N(0, mean_scale^2) in the flattened
    feature space; samples scatter around them with ``noise`` stddev.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    dim = int(np.prod(shape))
    means = rng.normal(0.0, mean_scale, size=(classes, dim))
    images = np.concatenate([
        means[k] + rng.normal(0.0, noise, size=(samples_per_class, dim))
        for k in range(classes)
    ])
    labels = np.repeat(np.arange(classes, dtype=np.int64), samples_per_class)
    order = rng.permutation(len(labels))
    return Dataset(
        images=images[order].reshape(len(labels), *shape),
        labels=labels[order],
    )


_IDX_DTYPES = {
    0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}


def read_idx(path) -> np.ndarray:
    """Read one array in the IDX format (big-endian, as specified)."""
    with open(path, "rb") as f:
        zero1, zero2, dtype_code, ndim = struct.unpack(
            ">BBBB", _read_exact(f, 4, "idx magic"))
        if zero1 != 0 or zero2 != 0 or dtype_code not in _IDX_DTYPES:
            raise FormatError(f"not an idx file: magic {zero1:#x}{zero2:#x}{dtype_code:#x}")
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, "idx dims"))
        dtype = _IDX_DTYPES[dtype_code]
        count = int(np.prod(dims))
        raw = _read_exact(f, count * dtype.itemsize, "idx payload")
    return np.frombuffer(raw, dtype=dtype).reshape(dims)


def _load_idx_dataset(path) -> Dataset:
    path = Path(path)
    if "images" not in path.name:
        raise FormatError(
            f"idx dataset path must be the images file (got {path.name}); "
            "the labels file is found by the images->labels name convention"
        )
    base = path.name.replace("images", "labels")
    candidates = [path.with_name(base), path.with_name(base.replace("idx3", "idx1"))]
    labels_path = next((c for c in candidates if c.exists()), None)
    if labels_path is None:
        raise FormatError(f"labels file {candidates[0]} not found")
    raw_images = read_idx(path)
    images = raw_images.astype(np.float64)
    if raw_images.dtype.kind in "iu":  # integer pixel data -> [0, 1]
        images = images / 255.0
    if images.ndim == 3:  # (N, H, W) -> single channel
        images = images[:, None, :, :]
    labels = read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1:
        raise FormatError("labels idx file must be 1-D")
    return Dataset(images=images, labels=labels)


def _load_csv_dataset(path) -> Dataset:
    import csv as _csv

    with open(path, newline="") as f:
        reader = _csv.reader(f)
        rows = list(reader)
    if not rows:
        raise FormatError("csv file is empty")

    def numeric(row):
        return all(_is_float(cell) for cell in row)

    label_col = 0
    start = 0
    if not numeric(rows[0]):
        header = [cell.strip().lower() for cell in rows[0]]
        if "label" not in header:
            raise FormatError("csv header present but has no 'label' column")
        label_col = header.index("label")
        start = 1
    features = []
    labels = []
    width = None
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row:
            continue
        if width is None:
            width = len(row)
        if len(row) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            values = [float(cell) for cell in row]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
        label = values.pop(label_col)
        if label != int(label):
            raise FormatError(f"line {lineno}: label {label} is not an integer")
        labels.append(int(label))
        features.append(values)
    if not features:
        raise FormatError("csv file has no data rows")
    return Dataset(images=np.asarray(features, dtype=np.float64),
                   labels=np.asarray(labels, dtype=np.int64))


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


_SYNTHETIC_KEYS = {
    "seed", "classes", "samples_per_class", "shape", "mean_scale", "noise",
}


def _load_synthetic_dataset(path) -> Dataset:
    try:
        with open(path) as f:
            spec = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"synthetic spec is not valid JSON: {exc}") from exc
    if not isinstance(spec, dict) or "seed" not in spec:
        raise FormatError("synthetic spec must be a JSON object with a 'seed' key")
    unknown = set(spec) - _SYNTHETIC_KEYS
    if unknown:
        raise FormatError(f"synthetic spec has unknown keys: {sorted(unknown)}")
    return synthesize_gaussian_clusters(
        seed=int(spec["seed"]),
        classes=int(spec.get("classes", 10)),
        samples_per_class=int(spec.get("samples_per_class", 100)),
        shape=tuple(spec.get("shape", [64])),
        mean_scale=float(spec.get("mean_scale", 1.0)),
        noise=float(spec.get("noise", 0.3)),
    )


DATASET_FORMATS = ("idx", "csv", "synthetic-spec")


def load_dataset(path, format: str) -> Dataset:
    if format == "idx":
        return _load_idx_dataset(path)
    if format == "csv":
        return _load_csv_dataset(path)
    if format == "synthetic-spec":
        return _load_synthetic_dataset(path)
    raise ValueError(f"unknown dataset format {format!r}; choose from {DATASET_FORMATS}")


def guess_dataset_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix == ".json":
        return "synthetic-spec"
    return "idx"
