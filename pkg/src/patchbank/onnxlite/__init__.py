"""Self-contained ONNX model reading and CPU execution.

Covers the operator subset emitted for the supported backbone families; used
as the fallback inference backend when the onnxruntime package is absent.
"""

from .wire import (  # noqa: F401
    AttributeValue,
    GraphDef,
    ModelDef,
    NodeDef,
    decode_model,
    encode_model,
    read_model,
    write_model,
)
from .executor import run_graph, SUPPORTED_OPS  # noqa: F401
