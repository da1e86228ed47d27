"""Minimal protobuf wire-format reader for ONNX model files.

Decodes just the fields the converter consumes, straight from the wire
encoding (no protobuf runtime, no generated classes). Unknown fields are
skipped by wire type, so files carrying docstrings, metadata props or
newer optional fields still parse. Deprecated group wire types are
rejected; ONNX has never used them.

Field numbers follow onnx.proto3:

  ModelProto      ir_version=1 producer_name=2 graph=7 opset_import=8
  GraphProto      node=1 name=2 initializer=5 input=11 output=12
  NodeProto       input=1 output=2 name=3 op_type=4 attribute=5
  AttributeProto  name=1 f=2 i=3 s=4 t=5 floats=7 ints=8 type=20
  TensorProto     dims=1 data_type=2 float_data=4 int32_data=5
                  int64_data=7 name=8 raw_data=9
  ValueInfoProto  name=1 type=2; TypeProto tensor_type=1;
  Tensor          elem_type=1 shape=2; Shape dim=1;
  Dimension       dim_value=1 dim_param=2
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .errors import WireFormatError

_VARINT = 0
_FIXED64 = 1
_LENGTH = 2
_FIXED32 = 5

# TensorProto.DataType values we accept.
DT_FLOAT = 1
DT_INT32 = 6
DT_INT64 = 7

_DT_NAMES = {
    1: "float32", 2: "uint8", 3: "int8", 4: "uint16", 5: "int16",
    6: "int32", 7: "int64", 8: "string", 9: "bool", 10: "float16",
    11: "float64", 12: "uint32", 13: "uint64",
}


def _read_varint(buf: bytes, pos: int) -> Tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise WireFormatError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise WireFormatError("varint wider than 64 bits")


def _signed(value: int) -> int:
    # int64 fields are encoded as 64-bit two's complement varints
    return value - (1 << 64) if value >= (1 << 63) else value


def _fields(buf: bytes):
    """Yield (field_number, wire_type, payload) over one message body.

    payload is the raw int for varints, bytes for everything else.
    """
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        num, wt = key >> 3, key & 7
        if wt == _VARINT:
            val, pos = _read_varint(buf, pos)
            yield num, wt, val
        elif wt == _FIXED64:
            if pos + 8 > len(buf):
                raise WireFormatError("truncated fixed64")
            yield num, wt, buf[pos:pos + 8]
            pos += 8
        elif wt == _LENGTH:
            ln, pos = _read_varint(buf, pos)
            if pos + ln > len(buf):
                raise WireFormatError("length-delimited field overruns buffer")
            yield num, wt, buf[pos:pos + ln]
            pos += ln
        elif wt == _FIXED32:
            if pos + 4 > len(buf):
                raise WireFormatError("truncated fixed32")
            yield num, wt, buf[pos:pos + 4]
            pos += 4
        else:
            raise WireFormatError(f"unsupported wire type {wt} (group encoding?)")


def _ints_field(wt: int, payload, out: List[int]) -> None:
    """Repeated int64: either one varint or a packed block of them."""
    if wt == _VARINT:
        out.append(_signed(payload))
    elif wt == _LENGTH:
        pos = 0
        while pos < len(payload):
            v, pos = _read_varint(payload, pos)
            out.append(_signed(v))
    else:
        raise WireFormatError("repeated int64 field with unexpected wire type")


def _floats_field(wt: int, payload, out: List[float]) -> None:
    """Repeated float: one fixed32 or a packed block."""
    if wt == _FIXED32:
        out.append(struct.unpack("<f", payload)[0])
    elif wt == _LENGTH:
        if len(payload) % 4:
            raise WireFormatError("packed float block not a multiple of 4 bytes")
        out.extend(struct.unpack(f"<{len(payload) // 4}f", payload))
    else:
        raise WireFormatError("repeated float field with unexpected wire type")


@dataclass
class OnnxTensor:
    name: str = ""
    dims: List[int] = field(default_factory=list)
    data_type: int = 0
    float_data: List[float] = field(default_factory=list)
    int_data: List[int] = field(default_factory=list)
    raw_data: Optional[bytes] = None

    @property
    def elem_count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def dtype_name(self) -> str:
        return _DT_NAMES.get(self.data_type, f"datatype#{self.data_type}")

    def f32_bytes(self) -> bytes:
        """The tensor's values as little-endian binary32, bit-exact."""
        if self.data_type != DT_FLOAT:
            raise WireFormatError(
                f"tensor {self.name!r} is {self.dtype_name()}, expected float32"
            )
        if self.raw_data is not None:
            if len(self.raw_data) != 4 * self.elem_count:
                raise WireFormatError(
                    f"tensor {self.name!r}: raw_data holds {len(self.raw_data)} bytes "
                    f"for {self.elem_count} float32 values"
                )
            return self.raw_data
        if len(self.float_data) != self.elem_count:
            raise WireFormatError(
                f"tensor {self.name!r}: float_data holds {len(self.float_data)} "
                f"values for dims {self.dims}"
            )
        return struct.pack(f"<{len(self.float_data)}f", *self.float_data)

    def i64_values(self) -> List[int]:
        if self.data_type not in (DT_INT64, DT_INT32):
            raise WireFormatError(
                f"tensor {self.name!r} is {self.dtype_name()}, expected an integer type"
            )
        if self.raw_data is not None:
            width = 8 if self.data_type == DT_INT64 else 4
            code = "q" if self.data_type == DT_INT64 else "i"
            if len(self.raw_data) % width:
                raise WireFormatError(f"tensor {self.name!r}: ragged raw_data")
            n = len(self.raw_data) // width
            return list(struct.unpack(f"<{n}{code}", self.raw_data))
        return list(self.int_data)


# AttributeProto.AttributeType
ATTR_FLOAT = 1
ATTR_INT = 2
ATTR_STRING = 3
ATTR_TENSOR = 4
ATTR_FLOATS = 6
ATTR_INTS = 7


@dataclass
class OnnxAttr:
    name: str = ""
    type: int = 0
    f: float = 0.0
    i: int = 0
    s: bytes = b""
    t: Optional[OnnxTensor] = None
    floats: List[float] = field(default_factory=list)
    ints: List[int] = field(default_factory=list)

    def value(self) -> Union[float, int, str, OnnxTensor, List[float], List[int]]:
        if self.type == ATTR_FLOAT:
            return self.f
        if self.type == ATTR_INT:
            return self.i
        if self.type == ATTR_STRING:
            return self.s.decode("utf-8", "replace")
        if self.type == ATTR_TENSOR:
            if self.t is None:
                raise WireFormatError(f"attribute {self.name!r}: missing tensor payload")
            return self.t
        if self.type == ATTR_FLOATS:
            return self.floats
        if self.type == ATTR_INTS:
            return self.ints
        raise WireFormatError(
            f"attribute {self.name!r} has unsupported type code {self.type}"
        )


@dataclass
class OnnxNode:
    name: str = ""
    op_type: str = ""
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    attrs: Dict[str, OnnxAttr] = field(default_factory=dict)


@dataclass
class OnnxValueInfo:
    name: str = ""
    elem_type: int = 0
    # each dim is an int, or a string when the model left it symbolic
    dims: List[Union[int, str]] = field(default_factory=list)


@dataclass
class OnnxGraph:
    name: str = ""
    nodes: List[OnnxNode] = field(default_factory=list)
    initializers: Dict[str, OnnxTensor] = field(default_factory=dict)
    inputs: List[OnnxValueInfo] = field(default_factory=list)
    outputs: List[OnnxValueInfo] = field(default_factory=list)


@dataclass
class OnnxModel:
    ir_version: int = 0
    producer: str = ""
    opset: Dict[str, int] = field(default_factory=dict)
    graph: OnnxGraph = field(default_factory=OnnxGraph)


def _parse_tensor(buf: bytes) -> OnnxTensor:
    t = OnnxTensor()
    for num, wt, payload in _fields(buf):
        if num == 1:
            _ints_field(wt, payload, t.dims)
        elif num == 2 and wt == _VARINT:
            t.data_type = payload
        elif num == 4:
            _floats_field(wt, payload, t.float_data)
        elif num in (5, 7):
            _ints_field(wt, payload, t.int_data)
        elif num == 8 and wt == _LENGTH:
            t.name = payload.decode("utf-8")
        elif num == 9 and wt == _LENGTH:
            t.raw_data = payload
    return t


def _parse_attr(buf: bytes) -> OnnxAttr:
    a = OnnxAttr()
    for num, wt, payload in _fields(buf):
        if num == 1 and wt == _LENGTH:
            a.name = payload.decode("utf-8")
        elif num == 2 and wt == _FIXED32:
            a.f = struct.unpack("<f", payload)[0]
        elif num == 3 and wt == _VARINT:
            a.i = _signed(payload)
        elif num == 4 and wt == _LENGTH:
            a.s = payload
        elif num == 5 and wt == _LENGTH:
            a.t = _parse_tensor(payload)
        elif num == 7:
            _floats_field(wt, payload, a.floats)
        elif num == 8:
            _ints_field(wt, payload, a.ints)
        elif num == 20 and wt == _VARINT:
            a.type = payload
    if not a.type:
        # Pre-IR-4 exporters sometimes omit the type tag; infer from payload.
        if a.t is not None:
            a.type = ATTR_TENSOR
        elif a.ints:
            a.type = ATTR_INTS
        elif a.floats:
            a.type = ATTR_FLOATS
        elif a.s:
            a.type = ATTR_STRING
    return a


def _parse_node(buf: bytes) -> OnnxNode:
    n = OnnxNode()
    for num, wt, payload in _fields(buf):
        if num == 1 and wt == _LENGTH:
            n.inputs.append(payload.decode("utf-8"))
        elif num == 2 and wt == _LENGTH:
            n.outputs.append(payload.decode("utf-8"))
        elif num == 3 and wt == _LENGTH:
            n.name = payload.decode("utf-8")
        elif num == 4 and wt == _LENGTH:
            n.op_type = payload.decode("utf-8")
        elif num == 5 and wt == _LENGTH:
            a = _parse_attr(payload)
            n.attrs[a.name] = a
    return n


def _parse_dim(buf: bytes) -> Union[int, str]:
    value: Union[int, str] = 0
    for num, wt, payload in _fields(buf):
        if num == 1 and wt == _VARINT:
            value = _signed(payload)
        elif num == 2 and wt == _LENGTH:
            value = payload.decode("utf-8")
    return value


def _parse_value_info(buf: bytes) -> OnnxValueInfo:
    vi = OnnxValueInfo()
    for num, wt, payload in _fields(buf):
        if num == 1 and wt == _LENGTH:
            vi.name = payload.decode("utf-8")
        elif num == 2 and wt == _LENGTH:
            for tnum, twt, tpayload in _fields(payload):  # TypeProto
                if tnum == 1 and twt == _LENGTH:  # tensor_type
                    for enum_, ewt, epayload in _fields(tpayload):
                        if enum_ == 1 and ewt == _VARINT:
                            vi.elem_type = epayload
                        elif enum_ == 2 and ewt == _LENGTH:  # shape
                            for snum, swt, spayload in _fields(epayload):
                                if snum == 1 and swt == _LENGTH:
                                    vi.dims.append(_parse_dim(spayload))
    return vi


def _parse_graph(buf: bytes) -> OnnxGraph:
    g = OnnxGraph()
    for num, wt, payload in _fields(buf):
        if num == 1 and wt == _LENGTH:
            g.nodes.append(_parse_node(payload))
        elif num == 2 and wt == _LENGTH:
            g.name = payload.decode("utf-8")
        elif num == 5 and wt == _LENGTH:
            t = _parse_tensor(payload)
            g.initializers[t.name] = t
        elif num == 11 and wt == _LENGTH:
            g.inputs.append(_parse_value_info(payload))
        elif num == 12 and wt == _LENGTH:
            g.outputs.append(_parse_value_info(payload))
    return g


def parse_model(data: bytes) -> OnnxModel:
    """Decode a serialized ModelProto."""
    if not data:
        raise WireFormatError("empty file")
    m = OnnxModel()
    saw_graph = False
    try:
        for num, wt, payload in _fields(data):
            if num == 1 and wt == _VARINT:
                m.ir_version = _signed(payload)
            elif num == 2 and wt == _LENGTH:
                m.producer = payload.decode("utf-8", "replace")
            elif num == 7 and wt == _LENGTH:
                m.graph = _parse_graph(payload)
                saw_graph = True
            elif num == 8 and wt == _LENGTH:
                domain, version = "", 0
                for onum, owt, opayload in _fields(payload):
                    if onum == 1 and owt == _LENGTH:
                        domain = opayload.decode("utf-8")
                    elif onum == 2 and owt == _VARINT:
                        version = _signed(opayload)
                m.opset[domain] = version
    except struct.error as exc:
        raise WireFormatError(str(exc)) from exc
    if not saw_graph:
        raise WireFormatError("no graph in model (is this an ONNX file?)")
    return m


def load_onnx(path: Union[str, Path]) -> OnnxModel:
    return parse_model(Path(path).read_bytes())
