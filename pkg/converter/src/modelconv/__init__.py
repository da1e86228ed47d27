"""Offline converter: ONNX models and raw datasets to the portable
inference format, plus reference label/golden-logit export."""

from .datasets import prepare_dataset, read_idx
from .errors import (
    ConversionError,
    DatasetError,
    ReferenceExportError,
    UnsupportedOpError,
    WireFormatError,
)
from .mapping import ConversionManifest, convert_model, map_model
from .onnxwire import load_onnx, parse_model
from .portable import PortableGraph, PortableNode, PortableTensor, read_model
from .reference import export_reference

__all__ = [
    "ConversionError",
    "ConversionManifest",
    "DatasetError",
    "PortableGraph",
    "PortableNode",
    "PortableTensor",
    "ReferenceExportError",
    "UnsupportedOpError",
    "WireFormatError",
    "convert_model",
    "export_reference",
    "load_onnx",
    "map_model",
    "parse_model",
    "prepare_dataset",
    "read_idx",
    "read_model",
]

__version__ = "0.1.0"
