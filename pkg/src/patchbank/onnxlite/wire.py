"""ONNX model (de)serialization over the protobuf wire format.

Implements just the message subset an inference consumer needs — graph, nodes,
attributes, initializers, value infos, opset imports, metadata — directly on
the wire encoding, so no protobuf or onnx package is required.  Unknown fields
are skipped on read, which keeps files from full exporters loadable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError

# TensorProto.DataType values.
TENSOR_DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("u1"),
    3: np.dtype("i1"),
    6: np.dtype("<i4"),
    7: np.dtype("<i8"),
    9: np.dtype("?"),
    11: np.dtype("<f8"),
}
DTYPE_TO_ONNX = {np.dtype(v): k for k, v in TENSOR_DTYPES.items()}

_WIRE_VARINT = 0
_WIRE_I64 = 1
_WIRE_LEN = 2
_WIRE_I32 = 5


# ---------------------------------------------------------------------------
# Low-level wire helpers


def _write_varint(buf: bytearray, value: int) -> None:
    if value < 0:
        value &= (1 << 64) - 1
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.append(byte | 0x80)
        else:
            buf.append(byte)
            return


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise FormatError("truncated varint")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise FormatError("varint too long")


def _signed64(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _tag(buf: bytearray, field_number: int, wire_type: int) -> None:
    _write_varint(buf, (field_number << 3) | wire_type)


def _put_bytes(buf: bytearray, field_number: int, payload: bytes) -> None:
    _tag(buf, field_number, _WIRE_LEN)
    _write_varint(buf, len(payload))
    buf.extend(payload)


def _put_str(buf: bytearray, field_number: int, text: str) -> None:
    _put_bytes(buf, field_number, text.encode("utf-8"))


def _put_int(buf: bytearray, field_number: int, value: int) -> None:
    _tag(buf, field_number, _WIRE_VARINT)
    _write_varint(buf, value)


def _put_float(buf: bytearray, field_number: int, value: float) -> None:
    _tag(buf, field_number, _WIRE_I32)
    buf.extend(np.float32(value).tobytes())


def _put_packed_ints(buf: bytearray, field_number: int, values) -> None:
    inner = bytearray()
    for v in values:
        _write_varint(inner, int(v))
    _put_bytes(buf, field_number, bytes(inner))


def _skip_field(data: bytes, pos: int, wire_type: int) -> int:
    if wire_type == _WIRE_VARINT:
        _, pos = _read_varint(data, pos)
        return pos
    if wire_type == _WIRE_I64:
        return pos + 8
    if wire_type == _WIRE_LEN:
        size, pos = _read_varint(data, pos)
        return pos + size
    if wire_type == _WIRE_I32:
        return pos + 4
    raise FormatError(f"unsupported wire type {wire_type}")


def _fields(data: bytes):
    """Iterate (field_number, wire_type, value) triples of one message."""
    pos = 0
    end = len(data)
    while pos < end:
        key, pos = _read_varint(data, pos)
        field_number, wire_type = key >> 3, key & 7
        if wire_type == _WIRE_VARINT:
            value, pos = _read_varint(data, pos)
        elif wire_type == _WIRE_LEN:
            size, pos = _read_varint(data, pos)
            if pos + size > end:
                raise FormatError("truncated length-delimited field")
            value = data[pos : pos + size]
            pos += size
        elif wire_type == _WIRE_I32:
            value = data[pos : pos + 4]
            pos += 4
        elif wire_type == _WIRE_I64:
            value = data[pos : pos + 8]
            pos += 8
        else:
            raise FormatError(f"unsupported wire type {wire_type}")
        yield field_number, wire_type, value


def _packed_varints(value: bytes) -> list[int]:
    out = []
    pos = 0
    while pos < len(value):
        v, pos = _read_varint(value, pos)
        out.append(_signed64(v))
    return out


# ---------------------------------------------------------------------------
# Model structures


@dataclass
class AttributeValue:
    """One node attribute; exactly one of the payload slots is set."""

    name: str
    i: int | None = None
    f: float | None = None
    s: bytes | None = None
    ints: list[int] | None = None
    floats: list[float] | None = None
    tensor: np.ndarray | None = None

    def as_text(self) -> str:
        return (self.s or b"").decode("utf-8")


@dataclass
class NodeDef:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attributes: dict[str, AttributeValue] = field(default_factory=dict)

    def attr(self, name: str, default=None):
        a = self.attributes.get(name)
        if a is None:
            return default
        for slot in (a.i, a.f, a.s, a.ints, a.floats, a.tensor):
            if slot is not None:
                return slot
        return default


@dataclass
class GraphDef:
    name: str = ""
    nodes: list[NodeDef] = field(default_factory=list)
    initializers: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[tuple[str, list[int | str]]] = field(default_factory=list)
    outputs: list[tuple[str, list[int | str]]] = field(default_factory=list)


@dataclass
class ModelDef:
    graph: GraphDef
    ir_version: int = 8
    opset_version: int = 17
    producer_name: str = ""
    metadata: dict[str, str] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Decoding


def _decode_tensor(data: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    data_type = 1
    raw: bytes | None = None
    floats: list[bytes] = []
    int64s: list[int] = []
    int32s: list[int] = []
    doubles: list[bytes] = []
    name = ""
    for fnum, wtype, value in _fields(data):
        if fnum == 1:
            dims.extend(_packed_varints(value) if wtype == _WIRE_LEN else [_signed64(value)])
        elif fnum == 2:
            data_type = value
        elif fnum == 4:
            floats.append(value)  # packed buffer or single 4-byte scalar
        elif fnum == 5:
            int32s.extend(_packed_varints(value) if wtype == _WIRE_LEN else [_signed64(value)])
        elif fnum == 7:
            int64s.extend(_packed_varints(value) if wtype == _WIRE_LEN else [_signed64(value)])
        elif fnum == 8:
            name = value.decode("utf-8")
        elif fnum == 9:
            raw = value
        elif fnum == 10:
            doubles.append(value)
    if data_type not in TENSOR_DTYPES:
        raise FormatError(f"tensor {name!r}: unsupported data type {data_type}")
    dtype = TENSOR_DTYPES[data_type]
    if raw is not None:
        array = np.frombuffer(raw, dtype=dtype)
    elif floats:
        array = np.frombuffer(b"".join(floats), dtype="<f4")
    elif doubles:
        array = np.frombuffer(b"".join(doubles), dtype="<f8")
    elif int64s:
        array = np.asarray(int64s, dtype=np.int64)
    elif int32s:
        array = np.asarray(int32s, dtype=np.int32)
    else:
        array = np.zeros(0, dtype=dtype)
    try:
        array = array.reshape(dims) if dims else array.reshape(())
    except ValueError as exc:
        raise FormatError(f"tensor {name!r}: {exc}") from exc
    return name, np.ascontiguousarray(array)


def _decode_attribute(data: bytes) -> AttributeValue:
    attr = AttributeValue(name="")
    for fnum, wtype, value in _fields(data):
        if fnum == 1:
            attr.name = value.decode("utf-8")
        elif fnum == 2:
            attr.f = float(np.frombuffer(value, dtype="<f4")[0])
        elif fnum == 3:
            attr.i = _signed64(value)
        elif fnum == 4:
            attr.s = value
        elif fnum == 5:
            _, attr.tensor = _decode_tensor(value)
        elif fnum == 7:
            if wtype == _WIRE_LEN:
                attr.floats = np.frombuffer(value, dtype="<f4").tolist()
            else:
                attr.floats = (attr.floats or []) + [float(np.frombuffer(value, dtype="<f4")[0])]
        elif fnum == 8:
            if wtype == _WIRE_LEN:
                attr.ints = _packed_varints(value)
            else:
                attr.ints = (attr.ints or []) + [_signed64(value)]
    return attr


def _decode_node(data: bytes) -> NodeDef:
    node = NodeDef(op_type="", inputs=[], outputs=[])
    for fnum, _, value in _fields(data):
        if fnum == 1:
            node.inputs.append(value.decode("utf-8"))
        elif fnum == 2:
            node.outputs.append(value.decode("utf-8"))
        elif fnum == 3:
            node.name = value.decode("utf-8")
        elif fnum == 4:
            node.op_type = value.decode("utf-8")
        elif fnum == 5:
            attr = _decode_attribute(value)
            node.attributes[attr.name] = attr
    return node


def _decode_value_info(data: bytes) -> tuple[str, list[int | str]]:
    name = ""
    shape: list[int | str] = []
    for fnum, _, value in _fields(data):
        if fnum == 1:
            name = value.decode("utf-8")
        elif fnum == 2:  # TypeProto
            for f2, _, v2 in _fields(value):
                if f2 != 1:  # tensor_type
                    continue
                for f3, _, v3 in _fields(v2):
                    if f3 != 2:  # shape
                        continue
                    for f4, _, v4 in _fields(v3):
                        if f4 != 1:  # dim
                            continue
                        dim: int | str = 0
                        for f5, _, v5 in _fields(v4):
                            if f5 == 1:
                                dim = _signed64(v5)
                            elif f5 == 2:
                                dim = v5.decode("utf-8")
                        shape.append(dim)
    return name, shape


def _decode_graph(data: bytes) -> GraphDef:
    graph = GraphDef()
    for fnum, _, value in _fields(data):
        if fnum == 1:
            graph.nodes.append(_decode_node(value))
        elif fnum == 2:
            graph.name = value.decode("utf-8")
        elif fnum == 5:
            name, tensor = _decode_tensor(value)
            graph.initializers[name] = tensor
        elif fnum == 11:
            graph.inputs.append(_decode_value_info(value))
        elif fnum == 12:
            graph.outputs.append(_decode_value_info(value))
    return graph


def decode_model(blob: bytes) -> ModelDef:
    graph = None
    ir_version = 8
    opset = 17
    producer = ""
    metadata: dict[str, str] = {}
    try:
        for fnum, wtype, value in _fields(blob):
            if fnum == 1 and wtype == _WIRE_VARINT:
                ir_version = value
            elif fnum == 2 and wtype == _WIRE_LEN:
                producer = value.decode("utf-8", "replace")
            elif fnum == 7 and wtype == _WIRE_LEN:
                graph = _decode_graph(value)
            elif fnum == 8 and wtype == _WIRE_LEN:
                domain, version = "", 0
                for f2, _, v2 in _fields(value):
                    if f2 == 1:
                        domain = v2.decode("utf-8")
                    elif f2 == 2:
                        version = v2
                if domain in ("", "ai.onnx"):
                    opset = version
            elif fnum == 14 and wtype == _WIRE_LEN:
                key = val = ""
                for f2, _, v2 in _fields(value):
                    if f2 == 1:
                        key = v2.decode("utf-8")
                    elif f2 == 2:
                        val = v2.decode("utf-8")
                metadata[key] = val
    except FormatError:
        raise
    except Exception as exc:  # malformed bytes surface as format errors
        raise FormatError(f"malformed model file: {exc}") from exc
    if graph is None:
        raise FormatError("model file has no graph")
    return ModelDef(
        graph=graph,
        ir_version=ir_version,
        opset_version=opset,
        producer_name=producer,
        metadata=metadata,
    )


def read_model(path) -> ModelDef:
    with open(path, "rb") as fh:
        return decode_model(fh.read())


# ---------------------------------------------------------------------------
# Encoding


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in DTYPE_TO_ONNX:
        raise ValueError(f"tensor {name!r}: unsupported dtype {array.dtype}")
    buf = bytearray()
    _put_packed_ints(buf, 1, array.shape)
    _put_int(buf, 2, DTYPE_TO_ONNX[array.dtype])
    _put_str(buf, 8, name)
    _put_bytes(buf, 9, np.ascontiguousarray(array).tobytes())
    return bytes(buf)


def _encode_attribute(attr: AttributeValue) -> bytes:
    buf = bytearray()
    _put_str(buf, 1, attr.name)
    if attr.f is not None:
        _put_float(buf, 2, attr.f)
        _put_int(buf, 20, 1)
    elif attr.i is not None:
        _put_int(buf, 3, attr.i)
        _put_int(buf, 20, 2)
    elif attr.s is not None:
        _put_bytes(buf, 4, attr.s)
        _put_int(buf, 20, 3)
    elif attr.tensor is not None:
        _put_bytes(buf, 5, _encode_tensor("", attr.tensor))
        _put_int(buf, 20, 4)
    elif attr.floats is not None:
        inner = bytearray()
        for v in attr.floats:
            inner.extend(np.float32(v).tobytes())
        _put_bytes(buf, 7, bytes(inner))
        _put_int(buf, 20, 6)
    elif attr.ints is not None:
        _put_packed_ints(buf, 8, attr.ints)
        _put_int(buf, 20, 7)
    else:
        raise ValueError(f"attribute {attr.name!r} has no payload")
    return bytes(buf)


def _encode_node(node: NodeDef) -> bytes:
    buf = bytearray()
    for name in node.inputs:
        _put_str(buf, 1, name)
    for name in node.outputs:
        _put_str(buf, 2, name)
    if node.name:
        _put_str(buf, 3, node.name)
    _put_str(buf, 4, node.op_type)
    for attr in node.attributes.values():
        _put_bytes(buf, 5, _encode_attribute(attr))
    return bytes(buf)


def _encode_value_info(name: str, shape, elem_type: int = 1) -> bytes:
    shape_buf = bytearray()
    for dim in shape:
        dim_buf = bytearray()
        if isinstance(dim, str):
            _put_str(dim_buf, 2, dim)
        else:
            _put_int(dim_buf, 1, int(dim))
        _put_bytes(shape_buf, 1, bytes(dim_buf))
    tensor_buf = bytearray()
    _put_int(tensor_buf, 1, elem_type)
    _put_bytes(tensor_buf, 2, bytes(shape_buf))
    type_buf = bytearray()
    _put_bytes(type_buf, 1, bytes(tensor_buf))
    buf = bytearray()
    _put_str(buf, 1, name)
    _put_bytes(buf, 2, bytes(type_buf))
    return bytes(buf)


def _encode_graph(graph: GraphDef) -> bytes:
    buf = bytearray()
    for node in graph.nodes:
        _put_bytes(buf, 1, _encode_node(node))
    _put_str(buf, 2, graph.name or "graph")
    for name, tensor in graph.initializers.items():
        _put_bytes(buf, 5, _encode_tensor(name, tensor))
    for name, shape in graph.inputs:
        _put_bytes(buf, 11, _encode_value_info(name, shape))
    for name, shape in graph.outputs:
        _put_bytes(buf, 12, _encode_value_info(name, shape))
    return bytes(buf)


def encode_model(model: ModelDef) -> bytes:
    buf = bytearray()
    _put_int(buf, 1, model.ir_version)
    if model.producer_name:
        _put_str(buf, 2, model.producer_name)
    _put_bytes(buf, 7, _encode_graph(model.graph))
    opset_buf = bytearray()
    _put_str(opset_buf, 1, "")
    _put_int(opset_buf, 2, model.opset_version)
    _put_bytes(buf, 8, bytes(opset_buf))
    for key, value in model.metadata.items():
        entry = bytearray()
        _put_str(entry, 1, key)
        _put_str(entry, 2, value)
        _put_bytes(buf, 14, bytes(entry))
    return bytes(buf)


def write_model(model: ModelDef, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(model))
