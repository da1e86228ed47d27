"""Error types for the conversion pipeline."""


class ConversionError(Exception):
    """Base for everything this package raises on bad input."""


class WireFormatError(ConversionError):
    """The .onnx file is not a protobuf message we can walk."""


class UnsupportedOpError(ConversionError):
    """A source node cannot be expressed in the portable op set."""


class ReferenceExportError(ConversionError):
    """Reference evaluation failed; the export must be complete or absent."""


class DatasetError(ConversionError):
    """Source data cannot be shaped into the requested sample layout."""
