"""Portable model and dataset formats, with loading, validation and saving.

A model on disk is a pair of files in one directory:

* ``model.json`` — manifest: graph structure, operator attributes and a
  tensor table with dtype/shape/offset/byte_length/CRC32 per weight tensor.
* ``weights.bin`` — all weight payloads as little-endian binary32,
  concatenated with each tensor starting on a 64 byte boundary.

A dataset directory holds ``samples.bin`` (fixed-stride little-endian
binary32 tensors), ``samples.json`` (shape/stride/preprocessing metadata)
and ``labels.json`` (reference top-1 index per sample plus provenance).

Both manifests carry a ``format_version`` string; readers accept any minor
revision of a known major version and reject everything else.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

FORMAT_VERSION = "1.0"
_SUPPORTED_MAJOR = 1
_ALIGN = 64

SUPPORTED_OPS = frozenset(
    {
        "Conv2D",
        "Gemm",
        "MatMul",
        "Add",
        "ReLU",
        "MaxPool",
        "GlobalAveragePool",
        "BatchNormalization",
        "Flatten",
        "Reshape",
        "Constant",
    }
)


class ModelFormatError(ValueError):
    """Manifest malformed, version unsupported, or graph invariants broken."""


class ChecksumError(ModelFormatError):
    """Stored CRC32 does not match the tensor payload."""


class UnsupportedOpError(ModelFormatError):
    """Graph contains an operator the runtime does not implement."""


@dataclass(frozen=True)
class TensorInfo:
    name: str
    shape: Tuple[int, ...]
    offset: int
    byte_length: int
    crc32: int
    dtype: str = "f32"


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: Tuple[str, ...]
    outputs: Tuple[str, ...]
    attrs: dict = field(default_factory=dict)


@dataclass
class Graph:
    """Validated in-memory model: topologically ordered nodes plus weights."""

    name: str
    nodes: List[Node]
    initializers: Dict[str, "F32Tensor"]
    inputs: List[Tuple[str, Tuple[int, ...]]]
    outputs: List[Tuple[str, Tuple[int, ...]]]


@dataclass
class F32Tensor:
    """Weight payload kept as Python floats (each exactly a binary32 value)."""

    shape: Tuple[int, ...]
    values: List[float]


def _check_version(manifest: dict, what: str) -> None:
    version = manifest.get("format_version")
    if not isinstance(version, str) or "." not in version:
        raise ModelFormatError(f"{what}: missing or malformed format_version")
    major = version.split(".", 1)[0]
    if not major.isdigit() or int(major) != _SUPPORTED_MAJOR:
        raise ModelFormatError(
            f"{what}: unsupported format_version {version!r} "
            f"(this reader handles major {_SUPPORTED_MAJOR})"
        )


def _shape_of(raw, what: str) -> Tuple[int, ...]:
    if not isinstance(raw, list) or not raw or not all(isinstance(d, int) and d >= 1 for d in raw):
        raise ModelFormatError(f"{what}: bad shape {raw!r}")
    return tuple(raw)


def load_model(path: str | Path) -> Graph:
    """Read and validate a model directory (or a direct model.json path)."""
    path = Path(path)
    manifest_path = path / "model.json" if path.is_dir() else path
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from None
    _check_version(manifest, "model.json")

    weights_path = manifest_path.parent / manifest.get("weights_file", "weights.bin")
    try:
        blob = weights_path.read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"weights file not found: {weights_path}") from None

    initializers: Dict[str, F32Tensor] = {}
    for name, info in manifest.get("tensors", {}).items():
        shape = _shape_of(info.get("shape"), f"tensor {name}")
        if info.get("dtype", "f32") != "f32":
            raise ModelFormatError(f"tensor {name}: unsupported dtype {info.get('dtype')!r}")
        offset, length = info.get("offset"), info.get("byte_length")
        if not isinstance(offset, int) or not isinstance(length, int):
            raise ModelFormatError(f"tensor {name}: bad offset/byte_length")
        count = 1
        for d in shape:
            count *= d
        if length != 4 * count:
            raise ModelFormatError(
                f"tensor {name}: byte_length {length} does not match shape {shape}"
            )
        payload = blob[offset : offset + length]
        if len(payload) != length:
            raise ChecksumError(f"tensor {name}: weights.bin truncated")
        if zlib.crc32(payload) != info.get("crc32"):
            raise ChecksumError(f"tensor {name}: CRC32 mismatch")
        values = list(struct.unpack(f"<{count}f", payload))
        initializers[name] = F32Tensor(shape, values)

    nodes: List[Node] = []
    for i, raw in enumerate(manifest.get("nodes", [])):
        op = raw.get("op")
        if op not in SUPPORTED_OPS:
            raise UnsupportedOpError(f"unsupported op {op!r} at node index {i}")
        nodes.append(
            Node(
                name=raw.get("name", f"node{i}"),
                op=op,
                inputs=tuple(raw.get("inputs", [])),
                outputs=tuple(raw.get("outputs", [])),
                attrs=dict(raw.get("attrs", {})),
            )
        )

    graph = Graph(
        name=manifest.get("name", manifest_path.parent.name),
        nodes=nodes,
        initializers=initializers,
        inputs=[(e["name"], _shape_of(e["shape"], "input")) for e in manifest.get("inputs", [])],
        outputs=[(e["name"], _shape_of(e["shape"], "output")) for e in manifest.get("outputs", [])],
    )
    validate_graph(graph)
    return graph


def validate_graph(graph: Graph) -> None:
    """Topological order, unique producers, all edges resolvable."""
    produced = {name for name, _ in graph.inputs} | set(graph.initializers)
    for node in graph.nodes:
        for src in node.inputs:
            if src and src not in produced:
                raise ModelFormatError(
                    f"node {node.name}: input {src!r} is not produced before use"
                )
        for dst in node.outputs:
            if dst in produced:
                raise ModelFormatError(f"value {dst!r} has more than one producer")
            produced.add(dst)
    for name, _ in graph.outputs:
        if name not in produced:
            raise ModelFormatError(f"graph output {name!r} is never produced")


def save_model(graph: Graph, directory: str | Path) -> None:
    """Write model.json + weights.bin; deterministic for identical graphs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    tensors = {}
    for name in sorted(graph.initializers):
        t = graph.initializers[name]
        if len(blob) % _ALIGN:
            blob.extend(b"\x00" * (_ALIGN - len(blob) % _ALIGN))
        payload = struct.pack(f"<{len(t.values)}f", *t.values)
        tensors[name] = {
            "dtype": "f32",
            "shape": list(t.shape),
            "offset": len(blob),
            "byte_length": len(payload),
            "crc32": zlib.crc32(payload),
        }
        blob.extend(payload)
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


def count_macs(graph: Graph) -> int:
    """Multiply-accumulate count: output elements times inner length, summed
    over Conv2D/Gemm/MatMul nodes."""
    shapes: Dict[str, Tuple[int, ...]] = {name: shape for name, shape in graph.inputs}
    shapes.update({name: t.shape for name, t in graph.initializers.items()})
    total = 0
    for node in graph.nodes:
        out_shape, inner = _node_shape(node, shapes)
        if inner:
            out_elems = 1
            for d in out_shape:
                out_elems *= d
            total += out_elems * inner
        shapes[node.outputs[0]] = out_shape
    return total


def _node_shape(node: Node, shapes: Dict[str, Tuple[int, ...]]) -> Tuple[Tuple[int, ...], int]:
    """Output shape of a node plus its per-output inner-product length
    (0 for non-MAC ops). Shared by count_macs and the runtime's planner."""
    def shp(name: str) -> Tuple[int, ...]:
        if name not in shapes:
            raise ModelFormatError(f"node {node.name}: unknown input {name!r}")
        return shapes[name]

    op = node.op
    if op == "Conv2D":
        n, c, h, w = shp(node.inputs[0])
        co, cin, kh, kw = shp(node.inputs[1])
        groups = int(node.attrs.get("groups", 1))
        if groups != 1:
            raise UnsupportedOpError(f"node {node.name}: groups={groups} not supported")
        if list(node.attrs.get("dilations", [1, 1])) != [1, 1]:
            raise UnsupportedOpError(f"node {node.name}: dilations not supported")
        if cin != c:
            raise ModelFormatError(f"node {node.name}: channel mismatch {cin} vs {c}")
        sh, sw = node.attrs.get("strides", [1, 1])
        pt, pl, pb, pr = node.attrs.get("pads", [0, 0, 0, 0])
        oh = (h + pt + pb - kh) // sh + 1
        ow = (w + pl + pr - kw) // sw + 1
        return (n, co, oh, ow), c * kh * kw
    if op == "Gemm":
        rows, x_inner = shp(node.inputs[0])
        out_dim, inner = shp(node.inputs[1])  # weights stored as [out, in]
        if x_inner != inner:
            raise ModelFormatError(f"node {node.name}: inner dims {x_inner} vs {inner}")
        return (rows, out_dim), inner
    if op == "MatMul":
        a = shp(node.inputs[0])
        b = shp(node.inputs[1])
        if len(b) != 2 or a[-1] != b[0]:
            raise ModelFormatError(f"node {node.name}: cannot multiply {a} by {b}")
        return a[:-1] + (b[1],), a[-1]
    if op == "Add":
        from .tensor import broadcast_shapes

        return broadcast_shapes(shp(node.inputs[0]), shp(node.inputs[1])), 0
    if op in ("ReLU", "BatchNormalization"):
        return shp(node.inputs[0]), 0
    if op == "MaxPool":
        n, c, h, w = shp(node.inputs[0])
        kh, kw = node.attrs["kernel"]
        sh, sw = node.attrs.get("strides", [kh, kw])
        pt, pl, pb, pr = node.attrs.get("pads", [0, 0, 0, 0])
        oh = (h + pt + pb - kh) // sh + 1
        ow = (w + pl + pr - kw) // sw + 1
        return (n, c, oh, ow), 0
    if op == "GlobalAveragePool":
        n, c, h, w = shp(node.inputs[0])
        return (n, c, 1, 1), 0
    if op == "Flatten":
        s = shp(node.inputs[0])
        axis = int(node.attrs.get("axis", 1))
        lead = 1
        for d in s[:axis]:
            lead *= d
        rest = 1
        for d in s[axis:]:
            rest *= d
        return (lead, rest), 0
    if op == "Reshape":
        s = shp(node.inputs[0])
        target = [int(d) for d in node.attrs["shape"]]
        total = 1
        for d in s:
            total *= d
        if -1 in target:
            known = 1
            for d in target:
                if d != -1:
                    known *= d
            target[target.index(-1)] = total // known
        return tuple(target), 0
    if op == "Constant":
        return shapes[node.attrs["tensor"]], 0
    raise UnsupportedOpError(f"unsupported op {op!r}")


# -- dataset files ----------------------------------------------------------------


@dataclass
class Dataset:
    """Samples as float lists plus the reference labels they ship with."""

    sample_shape: Tuple[int, ...]
    samples: List[List[float]]
    labels: List[int]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


def load_dataset(directory: str | Path, limit: Optional[int] = None) -> Dataset:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "samples.json").read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"samples.json not found in {directory}") from None
    _check_version(meta, "samples.json")
    shape = _shape_of(meta.get("shape"), "samples.json shape")
    count = meta.get("count")
    stride = 1
    for d in shape:
        stride *= d
    blob = (directory / "samples.bin").read_bytes()
    if not isinstance(count, int) or len(blob) != 4 * stride * count:
        raise ModelFormatError(
            f"samples.bin length {len(blob)} does not match count {count} x shape {shape}"
        )
    labels_doc = json.loads((directory / "labels.json").read_text())
    _check_version(labels_doc, "labels.json")
    labels = labels_doc.get("labels")
    if not isinstance(labels, list) or len(labels) != count:
        raise ModelFormatError("labels.json: labels list missing or wrong length")
    if limit is not None:
        count = min(count, limit)
    samples = []
    for i in range(count):
        chunk = blob[4 * stride * i : 4 * stride * (i + 1)]
        samples.append(list(struct.unpack(f"<{stride}f", chunk)))
    return Dataset(
        sample_shape=shape,
        samples=samples,
        labels=[int(x) for x in labels[:count]],
        meta={**meta, "labels_meta": labels_doc},
    )


def save_dataset(
    directory: str | Path,
    sample_shape: Sequence[int],
    samples: Sequence[Sequence[float]],
    labels: Sequence[int],
    *,
    preprocessing: Optional[dict] = None,
    labels_source: str = "unspecified",
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stride = 1
    for d in sample_shape:
        stride *= d
    blob = bytearray()
    for s in samples:
        if len(s) != stride:
            raise ValueError(f"sample length {len(s)} != stride {stride}")
        blob.extend(struct.pack(f"<{stride}f", *s))
    (directory / "samples.bin").write_bytes(bytes(blob))
    (directory / "samples.json").write_text(
        json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "shape": list(sample_shape),
                "count": len(samples),
                "preprocessing": preprocessing or {},
            },
            indent=1,
            sort_keys=True,
        )
    )
    (directory / "labels.json").write_text(
        json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "labels": [int(x) for x in labels],
                "source": labels_source,
                "samples_crc32": zlib.crc32(bytes(blob)),
            },
            indent=1,
            sort_keys=True,
        )
    )
