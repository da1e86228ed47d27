"""The portable on-disk format this tool emits.

Layout is fixed by the inference side: model.json carries the graph and
per-tensor dtype/shape/offset/byte-length/CRC32, weights.bin carries the
raw little-endian binary32 payloads, concatenated in sorted tensor-name
order and 64-byte aligned. Writing is deterministic: same input bytes in,
same output bytes out, no timestamps anywhere.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

FORMAT_VERSION = "1.0"
_ALIGN = 64


@dataclass
class PortableTensor:
    shape: Tuple[int, ...]
    data: bytes  # little-endian binary32, kept as raw bytes for bit fidelity

    @property
    def elem_count(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    def values(self) -> List[float]:
        return list(struct.unpack(f"<{self.elem_count}f", self.data))


@dataclass
class PortableNode:
    name: str
    op: str
    inputs: List[str]
    outputs: List[str]
    attrs: Dict[str, object] = field(default_factory=dict)


@dataclass
class PortableGraph:
    name: str
    nodes: List[PortableNode]
    initializers: Dict[str, PortableTensor]
    inputs: List[Tuple[str, Tuple[int, ...]]]
    outputs: List[Tuple[str, Tuple[int, ...]]]


def write_model(graph: PortableGraph, directory: Union[str, Path]) -> None:
    """Emit model.json + weights.bin."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    tensors = {}
    for name in sorted(graph.initializers):
        t = graph.initializers[name]
        if len(t.data) != 4 * t.elem_count:
            raise ValueError(
                f"tensor {name!r}: {len(t.data)} bytes for shape {t.shape}"
            )
        if len(blob) % _ALIGN:
            blob.extend(b"\x00" * (_ALIGN - len(blob) % _ALIGN))
        tensors[name] = {
            "dtype": "f32",
            "shape": list(t.shape),
            "offset": len(blob),
            "byte_length": len(t.data),
            "crc32": zlib.crc32(t.data),
        }
        blob.extend(t.data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": graph.name,
        "weights_file": "weights.bin",
        "inputs": [{"name": n, "shape": list(s)} for n, s in graph.inputs],
        "outputs": [{"name": n, "shape": list(s)} for n, s in graph.outputs],
        "tensors": tensors,
        "nodes": [
            {
                "name": n.name,
                "op": n.op,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "attrs": n.attrs,
            }
            for n in graph.nodes
        ],
    }
    (directory / "weights.bin").write_bytes(bytes(blob))
    (directory / "model.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_model(directory: Union[str, Path]) -> PortableGraph:
    """Read back what write_model wrote. Used by the round-trip checks and
    by reference export when pointed at an already converted directory."""
    directory = Path(directory)
    doc = json.loads((directory / "model.json").read_text())
    major = str(doc.get("format_version", "")).split(".", 1)[0]
    if major != FORMAT_VERSION.split(".", 1)[0]:
        raise ValueError(f"unknown format_version {doc.get('format_version')!r}")
    blob = (directory / doc.get("weights_file", "weights.bin")).read_bytes()
    inits = {}
    for name, info in doc.get("tensors", {}).items():
        off, ln = info["offset"], info["byte_length"]
        payload = blob[off:off + ln]
        if len(payload) != ln or zlib.crc32(payload) != info["crc32"]:
            raise ValueError(f"tensor {name!r}: payload corrupt or truncated")
        inits[name] = PortableTensor(tuple(info["shape"]), payload)
    nodes = [
        PortableNode(
            name=e.get("name", f"node{i}"),
            op=e["op"],
            inputs=list(e.get("inputs", [])),
            outputs=list(e.get("outputs", [])),
            attrs=dict(e.get("attrs", {})),
        )
        for i, e in enumerate(doc.get("nodes", []))
    ]
    return PortableGraph(
        name=doc.get("name", directory.name),
        nodes=nodes,
        initializers=inits,
        inputs=[(e["name"], tuple(e["shape"])) for e in doc.get("inputs", [])],
        outputs=[(e["name"], tuple(e["shape"])) for e in doc.get("outputs", [])],
    )


def write_samples(directory: Union[str, Path], sample_shape: Sequence[int],
                  payload: bytes, count: int, preprocessing: dict) -> None:
    """Emit samples.bin + samples.json. payload must already be packed
    little-endian binary32 at the fixed stride."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stride = 1
    for d in sample_shape:
        stride *= d
    if len(payload) != 4 * stride * count:
        raise ValueError(
            f"payload is {len(payload)} bytes, expected {count} x {stride} float32"
        )
    (directory / "samples.bin").write_bytes(payload)
    (directory / "samples.json").write_text(
        json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "shape": list(sample_shape),
                "count": count,
                "preprocessing": preprocessing,
            },
            indent=1,
            sort_keys=True,
        )
    )


def write_labels(directory: Union[str, Path], labels: Sequence[int], source: str,
                 samples_crc32: int, extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "labels": [int(x) for x in labels],
        "source": source,
        "samples_crc32": samples_crc32,
    }
    doc.update(extra or {})
    (Path(directory) / "labels.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
