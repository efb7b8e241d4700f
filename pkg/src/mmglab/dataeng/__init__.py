"""Synthetic data generation, the on-disk dataset format and split checks."""
from .dataset import (
    Dataset,
    ExampleRecord,
    SplitReport,
    Violation,
    load_dataset,
    validate_splits,
)
from .synth import PRESETS, DatasetSpec, generate_examples, generate_synthetic, generator_maps, write_manifest
from .tensorio import (
    BadMagicError,
    DimsOverflowError,
    TensorFormatError,
    TruncatedError,
    decode_tensor,
    encode_tensor,
    read_tensor,
    write_tensor,
)

__all__ = [
    "Dataset", "ExampleRecord", "SplitReport", "Violation", "load_dataset", "validate_splits",
    "PRESETS", "DatasetSpec", "generate_examples", "generate_synthetic", "generator_maps", "write_manifest",
    "BadMagicError", "DimsOverflowError", "TensorFormatError", "TruncatedError",
    "decode_tensor", "encode_tensor", "read_tensor", "write_tensor",
]
