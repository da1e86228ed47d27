"""ONNX graph to portable graph translation.

Every source node ends up in exactly one of three buckets, recorded in
the conversion manifest: mapped (one portable node emitted), folded
(expressed through initializers, attributes or rewiring instead of a
node), or dropped (removed with a documented, semantics-preserving
reason). Anything the portable op set cannot express is a hard error
naming the node; there is no silent fallback.

Batch normalization is translated as a node, never folded into the
convolution weights here. The inference side owns that fold; doing it
twice with different arithmetic would be two chances to disagree.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import UnsupportedOpError, WireFormatError
from .onnxwire import (
    ATTR_TENSOR,
    DT_FLOAT,
    OnnxModel,
    OnnxNode,
    OnnxTensor,
    load_onnx,
)
from .portable import PortableGraph, PortableNode, PortableTensor, write_model

MANIFEST_VERSION = "1.0"

# Everything the inference runtime executes. Kept in one place so the
# error message for a rejected model can list the whole vocabulary.
PORTABLE_OPS = (
    "Conv2D", "Gemm", "MatMul", "Add", "ReLU", "MaxPool",
    "GlobalAveragePool", "BatchNormalization", "Flatten", "Reshape", "Constant",
)


@dataclass
class ConversionManifest:
    source_file: str
    source_sha256: str
    source_ir_version: int
    source_opset: Dict[str, int]
    source_nodes: int
    mapped: List[dict] = field(default_factory=list)
    folded: List[dict] = field(default_factory=list)
    dropped: List[dict] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    format_version: str = MANIFEST_VERSION

    def account(self) -> None:
        """Every source node must be mapped, folded, or dropped."""
        seen = len(self.mapped) + len(self.folded) + len(self.dropped)
        if seen != self.source_nodes:
            raise AssertionError(
                f"manifest accounts for {seen} of {self.source_nodes} source nodes"
            )

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "source_file": self.source_file,
            "source_sha256": self.source_sha256,
            "source_ir_version": self.source_ir_version,
            "source_opset": self.source_opset,
            "source_nodes": self.source_nodes,
            "mapped": self.mapped,
            "folded": self.folded,
            "dropped": self.dropped,
            "notes": self.notes,
        }


def _attr(node: OnnxNode, name: str, default=None):
    a = node.attrs.get(name)
    return default if a is None else a.value()


def _ints_attr(node: OnnxNode, name: str, default: List[int]) -> List[int]:
    v = _attr(node, name, default)
    if not isinstance(v, list) or not all(isinstance(x, int) for x in v):
        raise UnsupportedOpError(f"node {node.name!r}: attribute {name} is not ints")
    return [int(x) for x in v]


def _reject(node: OnnxNode, why: str) -> UnsupportedOpError:
    label = node.name or "<unnamed>"
    return UnsupportedOpError(f"node {label!r} ({node.op_type}): {why}")


def _f32_tensor(t: OnnxTensor) -> PortableTensor:
    return PortableTensor(tuple(int(d) for d in t.dims), t.f32_bytes())


class _Mapper:
    def __init__(self, model: OnnxModel, manifest: ConversionManifest):
        self.model = model
        self.manifest = manifest
        self.graph = model.graph
        # source initializers plus tensors materialized from Constant nodes
        self.tensors: Dict[str, OnnxTensor] = dict(self.graph.initializers)
        self.alias: Dict[str, str] = {}
        self.nodes: List[PortableNode] = []
        self.out: Dict[str, PortableTensor] = {}
        self.used: set = set()
        self.consumed: set = set()

    # -- helpers -----------------------------------------------------------------

    def resolve(self, name: str) -> str:
        while name in self.alias:
            name = self.alias[name]
        return name

    def node_label(self, node: OnnxNode, index: int) -> str:
        return node.name or f"{node.op_type.lower()}_{index}"

    def take_tensor(self, node: OnnxNode, name: str, role: str) -> OnnxTensor:
        name = self.resolve(name)
        t = self.tensors.get(name)
        if t is None:
            raise _reject(node, f"{role} {name!r} must be a constant initializer")
        return t

    def emit(self, name: str, op: str, inputs: List[str], outputs: List[str],
             attrs: dict) -> None:
        self.nodes.append(PortableNode(name, op, inputs, outputs, attrs))

    def log_map(self, label: str, node: OnnxNode, to: str) -> None:
        self.manifest.mapped.append({"node": label, "op": node.op_type, "to": to})

    def log_fold(self, label: str, node: OnnxNode, reason: str) -> None:
        self.manifest.folded.append({"node": label, "op": node.op_type, "reason": reason})

    def log_drop(self, label: str, node: OnnxNode, reason: str) -> None:
        self.manifest.dropped.append({"node": label, "op": node.op_type, "reason": reason})

    def data_inputs(self, node: OnnxNode) -> List[str]:
        """Inputs with trailing optional slots (empty names) removed."""
        ins = list(node.inputs)
        while ins and ins[-1] == "":
            ins.pop()
        if "" in ins:
            raise _reject(node, "omitted non-trailing optional input")
        return [self.resolve(n) for n in ins]

    def mark_used(self, names: List[str]) -> None:
        for n in names:
            if n in self.tensors:
                self.used.add(n)

    # -- per-op handlers ---------------------------------------------------------

    def run(self) -> None:
        sole_output = (
            self.graph.outputs[0].name if len(self.graph.outputs) == 1 else None
        )
        for idx, node in enumerate(self.graph.nodes):
            label = self.node_label(node, idx)
            op = node.op_type
            if op == "Constant":
                self.fold_constant(label, node)
            elif op in ("Dropout", "Identity"):
                self.fold_identity(label, node)
            elif op == "Softmax":
                self.drop_softmax(label, node, sole_output, idx)
            elif op == "Conv":
                self.map_conv(label, node)
            elif op == "Relu":
                self.map_simple(label, node, "ReLU", n_inputs=1)
            elif op == "MaxPool":
                self.map_maxpool(label, node)
            elif op == "GlobalAveragePool":
                self.map_simple(label, node, "GlobalAveragePool", n_inputs=1)
            elif op == "BatchNormalization":
                self.map_batchnorm(label, node)
            elif op == "Add":
                self.map_simple(label, node, "Add", n_inputs=2)
            elif op == "MatMul":
                self.map_simple(label, node, "MatMul", n_inputs=2)
            elif op == "Gemm":
                self.map_gemm(label, node)
            elif op == "Flatten":
                self.map_flatten(label, node)
            elif op == "Reshape":
                self.map_reshape(label, node)
            else:
                raise _reject(
                    node,
                    f"op {op!r} is outside the portable set "
                    f"({', '.join(PORTABLE_OPS)})",
                )

    def fold_constant(self, label: str, node: OnnxNode) -> None:
        a = node.attrs.get("value")
        if a is None or a.type != ATTR_TENSOR or a.t is None:
            raise _reject(node, "only the tensor-valued 'value' attribute is supported")
        t = a.t
        t.name = node.outputs[0]
        self.tensors[node.outputs[0]] = t
        self.log_fold(label, node, "materialized to initializer")

    def fold_identity(self, label: str, node: OnnxNode) -> None:
        consumed = {n for nd in self.graph.nodes for n in nd.inputs}
        if node.op_type == "Dropout" and len(node.outputs) > 1 \
                and node.outputs[1] in consumed:
            raise _reject(node, "mask output is consumed")
        self.alias[node.outputs[0]] = self.resolve(node.inputs[0])
        self.log_fold(label, node, "inference-time identity, rewired through")

    def drop_softmax(self, label: str, node: OnnxNode, sole_output: Optional[str],
                     index: int) -> None:
        axis = _attr(node, "axis", -1)
        if node.outputs[0] != sole_output or index != len(self.graph.nodes) - 1:
            raise _reject(node, "softmax anywhere but the final output is not supported")
        if axis not in (-1, 1):
            raise _reject(node, f"softmax over axis {axis} does not preserve top-1")
        self.alias[node.outputs[0]] = self.resolve(node.inputs[0])
        self.log_drop(label, node, "monotone map on the class axis; top-1 unchanged")

    def map_simple(self, label: str, node: OnnxNode, to: str, n_inputs: int) -> None:
        ins = self.data_inputs(node)
        if len(ins) != n_inputs:
            raise _reject(node, f"expected {n_inputs} inputs, found {len(ins)}")
        self.mark_used(ins)
        self.emit(label, to, ins, list(node.outputs), {})
        self.log_map(label, node, to)

    def map_conv(self, label: str, node: OnnxNode) -> None:
        ins = self.data_inputs(node)
        if len(ins) not in (2, 3):
            raise _reject(node, f"expected X, W[, B], found {len(ins)} inputs")
        if int(_attr(node, "group", 1)) != 1:
            raise _reject(node, "grouped convolution is not supported")
        w = self.take_tensor(node, ins[1], "weight")
        if len(w.dims) != 4:
            raise _reject(node, f"weight rank {len(w.dims)}, only 2-D convolution")
        dil = _ints_attr(node, "dilations", [1, 1])
        if dil != [1, 1]:
            raise _reject(node, f"dilations {dil} are not supported")
        kernel = _ints_attr(node, "kernel_shape", [int(w.dims[2]), int(w.dims[3])])
        if kernel != [int(w.dims[2]), int(w.dims[3])]:
            raise _reject(node, f"kernel_shape {kernel} disagrees with weight dims {w.dims}")
        attrs = {
            "strides": _ints_attr(node, "strides", [1, 1]),
            "pads": self.pads_of(node),
        }
        self.mark_used(ins)
        self.emit(label, "Conv2D", ins, list(node.outputs), attrs)
        self.log_map(label, node, "Conv2D")

    def pads_of(self, node: OnnxNode) -> List[int]:
        auto = _attr(node, "auto_pad", "NOTSET")
        if isinstance(auto, bytes):
            auto = auto.decode()
        if auto == "VALID":
            return [0, 0, 0, 0]
        if auto not in ("", "NOTSET"):
            raise _reject(node, f"auto_pad {auto!r} needs shape inference; set explicit pads")
        pads = _ints_attr(node, "pads", [0, 0, 0, 0])
        if len(pads) != 4:
            raise _reject(node, f"pads {pads}: expected [top, left, bottom, right]")
        return pads

    def map_maxpool(self, label: str, node: OnnxNode) -> None:
        ins = self.data_inputs(node)
        if len(node.outputs) > 1:
            raise _reject(node, "indices output is not supported")
        if int(_attr(node, "ceil_mode", 0)) != 0:
            raise _reject(node, "ceil_mode=1 is not supported")
        dil = _ints_attr(node, "dilations", [1, 1])
        if dil != [1, 1]:
            raise _reject(node, f"dilations {dil} are not supported")
        kernel = _ints_attr(node, "kernel_shape", [])
        if len(kernel) != 2:
            raise _reject(node, f"kernel_shape {kernel}: only 2-D pooling")
        attrs = {
            "kernel": kernel,
            "strides": _ints_attr(node, "strides", [1, 1]),
            "pads": self.pads_of(node),
        }
        self.emit(label, "MaxPool", ins, list(node.outputs), attrs)
        self.log_map(label, node, "MaxPool")

    def map_batchnorm(self, label: str, node: OnnxNode) -> None:
        ins = self.data_inputs(node)
        if len(ins) != 5:
            raise _reject(node, f"expected X, scale, bias, mean, var; found {len(ins)}")
        if len(node.outputs) > 1:
            raise _reject(node, "training outputs present; export in inference mode")
        if int(_attr(node, "training_mode", 0)) != 0:
            raise _reject(node, "training_mode=1 is not supported")
        for name in ins[1:]:
            self.take_tensor(node, name, "normalization parameter")
        self.mark_used(ins)
        self.emit(label, "BatchNormalization", ins, list(node.outputs),
                  {"epsilon": float(_attr(node, "epsilon", 1e-5))})
        self.log_map(label, node, "BatchNormalization")

    def map_gemm(self, label: str, node: OnnxNode) -> None:
        ins = self.data_inputs(node)
        if len(ins) not in (2, 3):
            raise _reject(node, f"expected A, B[, C], found {len(ins)} inputs")
        if float(_attr(node, "alpha", 1.0)) != 1.0 or float(_attr(node, "beta", 1.0)) != 1.0:
            raise _reject(node, "alpha/beta scaling is not supported")
        if int(_attr(node, "transA", 0)) != 0:
            raise _reject(node, "transA=1 is not supported")
        trans_b = int(_attr(node, "transB", 0))
        self.mark_used(ins)
        if trans_b == 0:
            # portable Gemm stores weights [out, in]; transpose the layout
            # (a pure 4-byte permutation, no float arithmetic)
            w = self.take_tensor(node, ins[1], "weight")
            if len(w.dims) != 2:
                raise _reject(node, f"weight rank {len(w.dims)}, expected 2")
            k, n = (int(d) for d in w.dims)
            arr = np.frombuffer(w.f32_bytes(), dtype="<f4").reshape(k, n)
            self.out[ins[1]] = PortableTensor((n, k), np.ascontiguousarray(arr.T).tobytes())
            self.manifest.notes.append(
                f"tensor {ins[1]!r}: stored transposed ([in,out] -> [out,in]) for node {label!r}"
            )
        self.emit(label, "Gemm", ins, list(node.outputs), {})
        self.log_map(label, node, "Gemm")

    def map_flatten(self, label: str, node: OnnxNode) -> None:
        ins = self.data_inputs(node)
        self.emit(label, "Flatten", ins, list(node.outputs),
                  {"axis": int(_attr(node, "axis", 1))})
        self.log_map(label, node, "Flatten")

    def map_reshape(self, label: str, node: OnnxNode) -> None:
        ins = self.data_inputs(node)
        if len(ins) != 2:
            raise _reject(node, "expected data and shape inputs")
        if int(_attr(node, "allowzero", 0)) != 0:
            raise _reject(node, "allowzero=1 is not supported")
        shape_t = self.take_tensor(node, ins[1], "shape")
        target = [int(v) for v in shape_t.i64_values()]
        # the shape moves into an attribute; the shape tensor itself is not carried
        self.emit(label, "Reshape", ins[:1], list(node.outputs), {"shape": target})
        self.log_map(label, node, "Reshape")
        self.manifest.notes.append(
            f"node {label!r}: shape input {ins[1]!r} folded into the shape attribute"
        )
        self.consumed.add(ins[1])
        self.mark_used(ins[:1])

    # -- assembly ----------------------------------------------------------------

    def fix_dims(self, dims, what: str) -> Tuple[int, ...]:
        shape = []
        for d in dims:
            if isinstance(d, str) or d == 0:
                self.manifest.notes.append(
                    f"{what}: dynamic dimension {d!r} fixed to 1"
                )
                d = 1
            if d < 0:
                raise WireFormatError(f"{what}: negative dimension {d}")
            shape.append(int(d))
        return tuple(shape)

    def assemble(self, name: str) -> PortableGraph:
        referenced = {n for node in self.nodes for n in node.inputs}
        inits: Dict[str, PortableTensor] = {}
        for tname, t in self.tensors.items():
            if tname in self.out:
                inits[tname] = self.out[tname]
            elif t.data_type == DT_FLOAT:
                inits[tname] = _f32_tensor(t)
            elif tname in referenced:
                raise UnsupportedOpError(
                    f"tensor {tname!r} is {t.dtype_name()}; only float32 tensors "
                    f"can be carried"
                )
            elif tname not in self.consumed:
                self.manifest.notes.append(
                    f"unused {t.dtype_name()} initializer {tname!r} dropped"
                )

        inputs = []
        for vi in self.graph.inputs:
            if vi.name in self.tensors:
                continue  # old exporters list weights as graph inputs
            if vi.elem_type not in (0, DT_FLOAT):
                raise UnsupportedOpError(
                    f"graph input {vi.name!r} is not float32"
                )
            inputs.append((vi.name, self.fix_dims(vi.dims, f"input {vi.name!r}")))

        outputs = []
        produced = {n for node in self.nodes for n in node.outputs}
        produced |= set(inits) | {n for n, _ in inputs}
        for vi in self.graph.outputs:
            resolved = self.resolve(vi.name)
            if resolved not in produced:
                raise WireFormatError(
                    f"graph output {vi.name!r} resolves to {resolved!r}, "
                    f"which nothing produces"
                )
            outputs.append((resolved, self.fix_dims(vi.dims, f"output {vi.name!r}")))

        return PortableGraph(
            name=name,
            nodes=self.nodes,
            initializers=inits,
            inputs=inputs,
            outputs=outputs,
        )


def map_model(model: OnnxModel, *, name: str, source_file: str,
              source_sha256: str) -> Tuple[PortableGraph, ConversionManifest]:
    manifest = ConversionManifest(
        source_file=source_file,
        source_sha256=source_sha256,
        source_ir_version=model.ir_version,
        source_opset={k or "ai.onnx": v for k, v in model.opset.items()},
        source_nodes=len(model.graph.nodes),
    )
    mapper = _Mapper(model, manifest)
    mapper.run()
    graph = mapper.assemble(name)
    manifest.account()
    return graph, manifest


def convert_model(onnx_path: Union[str, Path], out_dir: Union[str, Path],
                  ) -> ConversionManifest:
    """Read an .onnx file, write model.json + weights.bin + conversion.json.

    Deterministic: converting the same file twice gives byte-identical
    outputs (no timestamps, sorted tensor layout, stable JSON).
    """
    onnx_path = Path(onnx_path)
    data = onnx_path.read_bytes()
    model = load_onnx(onnx_path)
    graph, manifest = map_model(
        model,
        name=model.graph.name or onnx_path.stem,
        source_file=onnx_path.name,
        source_sha256=hashlib.sha256(data).hexdigest(),
    )
    out_dir = Path(out_dir)
    write_model(graph, out_dir)
    (out_dir / "conversion.json").write_text(
        json.dumps(manifest.to_dict(), indent=1, sort_keys=True)
    )
    return manifest
