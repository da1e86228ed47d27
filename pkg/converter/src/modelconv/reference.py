"""Reference label and golden-logit export.

The reference engine of record is onnxruntime when it is importable;
otherwise the built-in float32 evaluator runs the converted graph. The
`source` field of labels.json names whichever engine actually produced
the labels, so downstream agreement numbers are always attributable.

The export is all or nothing: any per-sample failure aborts with the
sample index. Ties in the argmax go to the lowest class index.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .errors import DatasetError, ReferenceExportError
from .evaluate import logits as builtin_logits
from .mapping import convert_model
from .portable import PortableGraph, read_model, write_labels


def _load_samples(dataset_dir: Path) -> Tuple[List[np.ndarray], bytes, dict]:
    meta = json.loads((dataset_dir / "samples.json").read_text())
    shape = [int(d) for d in meta["shape"]]
    count = int(meta["count"])
    stride = 1
    for d in shape:
        stride *= d
    blob = (dataset_dir / "samples.bin").read_bytes()
    if len(blob) != 4 * stride * count:
        raise DatasetError(
            f"samples.bin is {len(blob)} bytes, expected {count} x {stride} float32"
        )
    samples = [
        np.frombuffer(blob, dtype="<f4", count=stride, offset=4 * stride * i)
        for i in range(count)
    ]
    return samples, blob, meta


def _onnxruntime_logits(onnx_path: Path, samples: List[np.ndarray],
                        in_shape) -> np.ndarray:
    import onnxruntime as ort  # optional; the caller handles ImportError

    sess = ort.InferenceSession(str(onnx_path), providers=["CPUExecutionProvider"])
    in_name = sess.get_inputs()[0].name
    rows = []
    for i, s in enumerate(samples):
        try:
            out = sess.run(None, {in_name: s.reshape(in_shape).astype(np.float32)})[0]
        except Exception as exc:
            raise ReferenceExportError(f"sample {i}: reference runtime failed: {exc}")
        rows.append(np.asarray(out, dtype=np.float32).reshape(-1))
    return np.stack(rows)


def export_reference(onnx_path: Union[str, Path], dataset_dir: Union[str, Path],
                     model_dir: Union[str, Path, None] = None) -> List[int]:
    """Write labels.json + golden_logits.bin next to the samples.

    onnx_path may be a .onnx file or an already converted model directory.
    model_dir, when given, receives (or already holds) the converted graph
    used by the built-in engine.
    """
    onnx_path = Path(onnx_path)
    dataset_dir = Path(dataset_dir)
    samples, blob, meta = _load_samples(dataset_dir)
    if not samples:
        raise ReferenceExportError("empty dataset: nothing to export")

    graph, source = _graph_for(onnx_path, model_dir)
    if onnx_path.is_file():
        try:
            rows = _onnxruntime_logits(onnx_path, samples, graph.inputs[0][1])
            source = "onnxruntime CPUExecutionProvider"
        except ImportError:
            rows = builtin_logits(graph, samples)
    else:
        rows = builtin_logits(graph, samples)

    labels = [int(np.argmax(r)) for r in rows]  # np.argmax: first (lowest) index wins
    payload = struct.pack(f"<{rows.size}f", *rows.reshape(-1).tolist())
    (dataset_dir / "golden_logits.bin").write_bytes(payload)
    write_labels(
        dataset_dir,
        labels,
        source,
        zlib.crc32(blob),
        extra={
            "golden_logits_file": "golden_logits.bin",
            "num_classes": int(rows.shape[1]),
        },
    )
    return labels


def _graph_for(onnx_path: Path, model_dir) -> Tuple[PortableGraph, str]:
    if onnx_path.is_dir():
        return read_model(onnx_path), "builtin float32 evaluator (converted graph)"
    if model_dir is None:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            convert_model(onnx_path, tmp)
            graph = read_model(tmp)
    else:
        model_dir = Path(model_dir)
        if not (model_dir / "model.json").exists():
            convert_model(onnx_path, model_dir)
        graph = read_model(model_dir)
    return graph, "builtin float32 evaluator (converted graph)"
