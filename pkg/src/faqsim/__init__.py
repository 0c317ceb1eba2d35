"""Stuck-at fault simulation and fault-aware quantization for DNN weight memories."""

from .errors import CapacityError, ConfigError, FaqsimError, FormatError
from .faq import faq_convert, inject, weight_error_metrics
from .faultmodel import (
    FaultMap,
    FaultPattern,
    apply_faults,
    fault_statistics,
    generate_fault_map,
    pattern_at,
)
from .lut import LookupTable, build_lut, nearest_valid, oracle_nearest, reachable_set
from .mapper import DataflowConfig, ErrorMask, build_error_mask, layer_to_matrix, map_to_memory
from .model import QuantizedLayer, QuantizedModel, models_equal
from .nn import calibrate_activation_scales, evaluate, forward, retrain_with_faq, train_fixture
from .numfmt import (
    QuantSpec,
    ScaleFactor,
    compute_scale,
    decode_twos_complement,
    dequantize,
    encode_twos_complement,
    quantize,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigError", "FaqsimError", "FormatError",
    "FaultMap", "FaultPattern", "apply_faults", "fault_statistics",
    "generate_fault_map", "pattern_at",
    "LookupTable", "build_lut", "nearest_valid", "oracle_nearest", "reachable_set",
    "DataflowConfig", "ErrorMask", "build_error_mask", "layer_to_matrix",
    "map_to_memory",
    "QuantizedLayer", "QuantizedModel", "models_equal",
    "faq_convert", "inject", "weight_error_metrics",
    "calibrate_activation_scales", "evaluate", "forward", "retrain_with_faq",
    "train_fixture",
    "QuantSpec", "ScaleFactor", "compute_scale", "decode_twos_complement",
    "dequantize", "encode_twos_complement", "quantize",
    "__version__",
]
