"""Dataset preparation: raw source files to fixed-stride binary32 samples.

Two source layouts are read natively:

  IDX     the classic big-endian u8/float tensor container used for the
          handwritten-digit sets (magic 0x00 0x00 <dtype> <ndims>)
  NPY     a single .npy array of shape (count, ...)

Preprocessing is a small JSON spec applied uniformly, in float32, in this
order: scale, then optional symmetric zero padding of the spatial dims,
then per-channel mean subtraction, then per-channel std division (so the
padded border is normalized like any real pixel). The spec used is
recorded verbatim in the samples.json sidecar; nothing is implicit.

  {"input_shape": [1, 28, 28],          required; the model's sample shape
   "scale": 0.00392156862745098,        optional; multiply first
   "mean": [0.485, 0.456, 0.406],       optional; scalar or per channel
   "std": [0.229, 0.224, 0.225],        optional; scalar or per channel
   "pad": [2, 2],                       optional; [rows, cols] both sides
   "limit": 100}                        optional; keep the first N samples
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import DatasetError
from .portable import write_samples

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def read_idx(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] or data[1]:
        raise DatasetError(f"{path}: not an IDX file (bad magic)")
    dtype = _IDX_DTYPES.get(data[2])
    if dtype is None:
        raise DatasetError(f"{path}: unknown IDX element type 0x{data[2]:02x}")
    ndims = data[3]
    header = 4 + 4 * ndims
    if len(data) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndims}I", data[4:header])
    count = int(np.prod(dims)) if ndims else 0
    if len(data) - header < count * dtype.itemsize:
        raise DatasetError(f"{path}: IDX payload shorter than header promises")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=header)
    return arr.reshape(dims)


def _load_source(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
        if arr.ndim < 2:
            raise DatasetError(f"{path}: expected (count, ...) array, got {arr.shape}")
        return arr
    return read_idx(path)


def _broadcast_channel(values, channels: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, channels)
    if arr.size != channels:
        raise DatasetError(f"{what} has {arr.size} entries for {channels} channels")
    return arr


def prepare_dataset(source: Union[str, Path], spec: dict,
                    out_dir: Union[str, Path]) -> int:
    """Write samples.bin + samples.json; returns the sample count."""
    source = Path(source)
    if "input_shape" not in spec:
        raise DatasetError("preprocessing spec is missing input_shape")
    shape = tuple(int(d) for d in spec["input_shape"])
    raw = _load_source(source)

    limit = spec.get("limit")
    if limit is not None:
        raw = raw[: int(limit)]
    if raw.shape[0] == 0:
        raise DatasetError(f"{source}: no samples")

    x = raw.astype(np.float32)
    scale = spec.get("scale")
    if scale is not None:
        x = x * np.float32(scale)

    pad = spec.get("pad")
    if pad is not None:
        pr, pc = (int(v) for v in pad)
        if x.ndim < 3:
            raise DatasetError("pad needs samples with at least 2 spatial dims")
        width = [(0, 0)] * (x.ndim - 2) + [(pr, pr), (pc, pc)]
        x = np.pad(x, width)

    per_sample = int(np.prod(x.shape[1:]))
    need = int(np.prod(shape))
    if per_sample != need:
        raise DatasetError(
            f"source samples hold {per_sample} values each after preprocessing, "
            f"but the model input {list(shape)} needs {need}"
        )
    x = x.reshape((x.shape[0],) + shape)

    channels = shape[0] if len(shape) >= 3 else 1
    cshape = (1, channels) + (1,) * (len(shape) - 1) if len(shape) >= 3 else None
    if spec.get("mean") is not None:
        if cshape is None:
            raise DatasetError("mean/std need a channels-first input_shape")
        x = x - _broadcast_channel(spec["mean"], channels, "mean").reshape(cshape)
    if spec.get("std") is not None:
        if cshape is None:
            raise DatasetError("mean/std need a channels-first input_shape")
        x = x / _broadcast_channel(spec["std"], channels, "std").reshape(cshape)

    x = np.ascontiguousarray(x, dtype="<f4")
    recorded = dict(spec)
    recorded["source_file"] = source.name
    write_samples(out_dir, shape, x.tobytes(), x.shape[0], recorded)
    return int(x.shape[0])
